import numpy as np
import pytest
from sklearn.base import clone

from lesion_synth.tokenizer import LesionFocusedVQVAE

from conftest import toy_images


def test_pyramid_shapes_and_range(tiny_tokenizer):
    X, _ = toy_images(5, 8, seed=1)
    pyr = tiny_tokenizer.transform(X)
    assert [p.shape for p in pyr] == [(5, 1, 1), (5, 2, 2)]
    assert all(p.dtype == np.int64 and p.min() >= 0 and p.max() < 8 for p in pyr)


def test_dequantize_matches_quantize(tiny_tokenizer):
    X, _ = toy_images(3, 8, seed=2)
    pyr, f_hat = tiny_tokenizer.quantize(tiny_tokenizer.encode(X))
    np.testing.assert_array_equal(tiny_tokenizer.dequantize(pyr), f_hat)


def test_reconstruction_is_an_image(tiny_tokenizer):
    X, _ = toy_images(3, 8, seed=3)
    out = tiny_tokenizer.reconstruct(X)
    assert out.shape == X.shape and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, tiny_tokenizer.inverse_transform(tiny_tokenizer.transform(X)))


def test_history_records_every_epoch(tiny_tokenizer):
    h = tiny_tokenizer.history_
    assert len(h) == 1 and h[0]["epoch"] == 1
    assert {"pixel", "lesion_focus", "feature", "perceptual", "total"} <= set(h[0])


def test_same_seed_same_weights(tiny_tokenizer):
    X, M = toy_images(12, 8)
    again = clone(tiny_tokenizer).fit(X, masks=M)
    assert again.history_ == tiny_tokenizer.history_
    for a, b in zip(again.transform(X), tiny_tokenizer.transform(X)):
        np.testing.assert_array_equal(a, b)


def test_save_load_round_trip(tiny_tokenizer, tmp_path):
    back = LesionFocusedVQVAE.load(tiny_tokenizer.save(tmp_path / "tok.pt"))
    X, _ = toy_images(2, 8, seed=4)
    np.testing.assert_array_equal(back.reconstruct(X), tiny_tokenizer.reconstruct(X))
    assert (tmp_path / "tok.json").exists()


def test_input_validation(tiny_tokenizer):
    with pytest.raises(ValueError):
        tiny_tokenizer.transform(np.zeros((1, 16, 16, 3), np.float32))
    with pytest.raises(ValueError, match="pyramid has"):
        tiny_tokenizer.dequantize([np.zeros((1, 1, 1), np.int64)])
    X, _ = toy_images(2, 8)
    with pytest.raises(ValueError, match="masks are required"):
        LesionFocusedVQVAE(scales=((1, 1), (2, 2)), epochs=1).fit(X)
