import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lesion_synth._frozen import FrozenConvStack
from lesion_synth.tokenizer import LossBreakdown, lesion_focus_loss, vqvae_loss
from lesion_synth.tokenizer.networks import PatchDiscriminator

from _oracles import central_difference

SCALES = [(1, 1), (2, 2), (4, 4)]


def _codes(rng, B=2, d=4):
    return [torch.as_tensor(rng.normal(size=(B, d, h, w))) for h, w in SCALES]


def _masks(value, B=2):
    return [torch.full((B, 1, h, w), float(value), dtype=torch.float64) for h, w in SCALES]


def rel_err(analytic, numeric):
    """Largest deviation relative to the largest gradient entry."""
    a, b = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lesion_focus_mask_identities(seed):
    rng = np.random.default_rng(seed)
    real, recon = _codes(rng), _codes(rng)
    assert float(lesion_focus_loss(real, recon, _masks(1))) == 0.0
    full = sum(float(((r - q) ** 2).mean()) for r, q in zip(real, recon))
    assert float(lesion_focus_loss(real, recon, _masks(0))) == pytest.approx(full, rel=1e-12)


def test_lesion_focus_hand_case():
    # one cell per scale differs by a unit vector; with M = 0 the term is the sum of per-scale means
    scales = [(1, 1), (2, 2)]
    real = [torch.zeros(1, 3, h, w, dtype=torch.float64) for h, w in scales]
    recon = [r.clone() for r in real]
    recon[0][0, 0, 0, 0] = 1.0
    recon[1][0, 2, 1, 0] = 1.0
    masks = [torch.zeros(1, 1, h, w, dtype=torch.float64) for h, w in scales]
    expected = 1.0 / 3 + 1.0 / 12
    assert float(lesion_focus_loss(real, recon, masks)) == pytest.approx(expected, abs=1e-15)


def test_identity_case_zero_terms():
    rng = np.random.default_rng(0)
    I = torch.as_tensor(rng.random((2, 3, 8, 8)))
    codes = _codes(rng)
    f = torch.as_tensor(rng.normal(size=(2, 4, 4, 4)))
    out = vqvae_loss(I, I.clone(), codes, [c.clone() for c in codes], f, f.clone(), _masks(0))
    assert out.pixel == 0 and out.lesion_focus == 0 and out.feature == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 3), st.floats(0, 3))
def test_total_decomposes(seed, lam_p, lam_g):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    I = torch.as_tensor(rng.random((2, 3, 8, 8)))
    I_hat = torch.as_tensor(rng.random((2, 3, 8, 8)))
    codes, recon = _codes(rng), _codes(rng)
    f = torch.as_tensor(rng.normal(size=(2, 4, 4, 4)))
    f_hat = torch.as_tensor(rng.normal(size=(2, 4, 4, 4)))
    masks = [(torch.rand(2, 1, h, w) > 0.5).double() for h, w in SCALES]
    out = vqvae_loss(I, I_hat, codes, recon, f, f_hat, masks, lambda_perceptual=lam_p,
                     lambda_adversarial=lam_g, perceptual_net=FrozenConvStack((4, 8)).double(),
                     discriminator=PatchDiscriminator(3, 8, 1).double())
    v = out.as_floats()
    expected = v["pixel"] + v["lesion_focus"] + v["feature"] + lam_p * v["perceptual"] + lam_g * v["adversarial"]
    assert abs(v["total"] - expected) <= 1e-8
    assert min(v["pixel"], v["lesion_focus"], v["feature"], v["perceptual"]) >= 0


def test_nan_term_is_named():
    I = torch.zeros(1, 3, 4, 4)
    bad = I.clone()
    bad[0, 0, 0, 0] = float("nan")
    codes = [torch.zeros(1, 2, 1, 1)]
    masks = [torch.zeros(1, 1, 1, 1)]
    with pytest.raises(FloatingPointError, match="pixel"):
        vqvae_loss(I, bad, codes, codes, torch.zeros(1, 2, 1, 1), torch.zeros(1, 2, 1, 1), masks)


def test_breakdown_fields():
    assert [f for f in LossBreakdown.__dataclass_fields__] == \
        ["pixel", "lesion_focus", "feature", "perceptual", "adversarial", "total"]


# ----------------------------------------------------------------- gradients


def _grad(fn, x):
    t = torch.as_tensor(x, dtype=torch.float64).requires_grad_(True)
    fn(t).backward()
    return t.grad.numpy()


def test_pixel_gradient_matches_central_differences():
    rng = np.random.default_rng(1)
    I = torch.as_tensor(rng.random((1, 3, 8, 8)))
    x0 = rng.random((1, 3, 8, 8))
    codes = [torch.zeros(1, 4, 1, 1, dtype=torch.float64)]
    f = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
    masks = [torch.zeros(1, 1, 1, 1, dtype=torch.float64)]
    loss = lambda t: vqvae_loss(I, t, codes, codes, f, f, masks).pixel  # noqa: E731
    numeric = central_difference(lambda a: float(loss(torch.as_tensor(a))), x0)
    assert rel_err(_grad(loss, x0), numeric) < 1e-4


def test_feature_gradient_matches_central_differences():
    rng = np.random.default_rng(2)
    f = torch.as_tensor(rng.normal(size=(1, 4, 2, 2)))
    x0 = rng.normal(size=(1, 4, 2, 2))
    I = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    codes = [torch.zeros(1, 4, 1, 1, dtype=torch.float64)]
    masks = [torch.zeros(1, 1, 1, 1, dtype=torch.float64)]
    loss = lambda t: vqvae_loss(I, I, codes, codes, f, t, masks).feature  # noqa: E731
    numeric = central_difference(lambda a: float(loss(torch.as_tensor(a))), x0)
    assert rel_err(_grad(loss, x0), numeric) < 1e-4


def test_lesion_focus_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    real = _codes(rng, B=1, d=4)
    masks = [(torch.rand(1, 1, h, w, generator=torch.Generator().manual_seed(7)) > 0.4).double()
             for h, w in SCALES]
    sizes = [int(np.prod(c.shape)) for c in real]
    x0 = rng.normal(size=sum(sizes))

    def loss(flat):
        parts, s = [], 0
        for c, n in zip(real, sizes):
            parts.append(flat[s:s + n].reshape(c.shape))
            s += n
        return lesion_focus_loss(real, parts, masks)

    numeric = central_difference(lambda a: float(loss(torch.as_tensor(a))), x0)
    analytic = _grad(loss, x0)
    assert np.any(analytic == 0)  # masked cells carry no gradient
    assert rel_err(analytic, numeric) < 1e-4
