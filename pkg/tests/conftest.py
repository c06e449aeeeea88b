import numpy as np
import pytest

from lesion_synth.tokenizer import LesionFocusedVQVAE


def toy_images(n, size, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, size, size, 3)).astype(np.float32)
    M = np.zeros((n, size, size), np.uint8)
    M[:, size // 4: 3 * size // 4, size // 4: 3 * size // 4] = 1
    return X, M


@pytest.fixture(scope="session")
def tiny_tokenizer():
    """A fitted tokenizer with scales [(1,1),(2,2)] on 8x8 images."""
    X, M = toy_images(12, 8)
    return LesionFocusedVQVAE(scales=((1, 1), (2, 2)), vocab_size=8, code_dim=4, channels=8,
                              epochs=1, batch_size=6, disc_start_epoch=5).fit(X, masks=M)
