"""Fréchet distance, Inception Score and the inter-class FID matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr

FID_JITTER = 1e-6


@dataclass(frozen=True)
class FeatureSet:
    matrix: np.ndarray  # (N, D)
    extractor_id: str
    sample_ids: tuple = ()
    labels: tuple = ()

    def __len__(self):
        return self.matrix.shape[0]


def _as_matrix(x, name):
    m = np.asarray(x.matrix if isinstance(x, FeatureSet) else x, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"{name} must be a (N, D) matrix")
    if m.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 samples, got {m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def _sqrt_psd(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=FID_JITTER):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix S1^{1/2} S2 S1^{1/2}, which shares its spectrum with
    S1 S2. When either covariance is near singular both receive ``eps * I``.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    s1, s2 = (s1 + s1.T) / 2.0, (s2 + s2.T) / 2.0
    scale = max(1.0, np.abs(np.diag(s1)).max(), np.abs(np.diag(s2)).max())
    if min(np.linalg.eigvalsh(s1)[0], np.linalg.eigvalsh(s2)[0]) < eps * scale:
        eye = np.eye(s1.shape[0])
        s1, s2 = s1 + eps * eye, s2 + eps * eye
    r1 = _sqrt_psd(s1)
    m = r1 @ s2 @ r1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((m + m.T) / 2.0), 0.0, None)).sum()
    diff = mu1 - mu2
    fid = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


def compute_fid(features_real, features_fake, eps=FID_JITTER):
    """FID between two feature sets (arrays or :class:`FeatureSet`), sample covariance with N - 1."""
    if isinstance(features_real, FeatureSet) and isinstance(features_fake, FeatureSet) \
            and features_real.extractor_id != features_fake.extractor_id:
        raise ValueError(f"feature sets come from different extractors: "
                         f"{features_real.extractor_id!r} vs {features_fake.extractor_id!r}")
    a = _as_matrix(features_real, "features_real")
    b = _as_matrix(features_fake, "features_fake")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0),
                            np.cov(b, rowvar=False), eps)


def inception_score(class_probabilities, num_splits=10):
    """Mean and std over splits of exp(E_x KL(p(y|x) || p(y))).

    Rows must be probability vectors. ``num_splits`` is capped at the number of rows.
    """
    p = np.asarray(class_probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("class_probabilities must be a non-empty (N, C) matrix")
    if (p < 0).any() or not np.allclose(p.sum(1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("rows of class_probabilities must be probability vectors")
    scores = []
    for part in np.array_split(p, min(num_splits, p.shape[0])):
        marginal = part.mean(0, keepdims=True)
        kl = rel_entr(part, marginal).sum(1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


compute_is = inception_score


@dataclass
class FidMatrix:
    values: np.ndarray  # (C, C); rows = prompted source class, cols = real target class
    absent: np.ndarray  # (C, C) bool
    class_names: tuple
    col_mean: np.ndarray  # per target class, over present cells
    col_std: np.ndarray

    @property
    def complete(self):
        return not self.absent.any()


def fid_confusion_matrix(synth, real_by_class, class_names=None, eps=FID_JITTER):
    """Grid of FIDs between synthesized and real feature sets.

    ``synth`` maps a source class ``i`` to the features of images generated
    from prompt ``i`` (compared against every real class), or maps ``(i, j)``
    to features of images generated from source ``i`` targeting class ``j``.
    ``real_by_class`` maps ``j`` to real features. Cells without at least two
    samples on both sides are marked absent (NaN), never zero.
    """
    classes = sorted(real_by_class)
    n = len(classes)
    values = np.full((n, n), np.nan)
    absent = np.ones((n, n), dtype=bool)
    for a, i in enumerate(classes):
        for b, j in enumerate(classes):
            fake = synth.get((i, j), synth.get(i))
            real = real_by_class.get(j)
            if fake is None or real is None or len(fake) < 2 or len(real) < 2:
                continue
            values[a, b] = compute_fid(real, fake, eps)
            absent[a, b] = False
    with np.errstate(invalid="ignore"):
        col_mean = np.array([np.nanmean(values[:, b]) if (~absent[:, b]).any() else np.nan
                             for b in range(n)])
        col_std = np.array([np.nanstd(values[:, b]) if (~absent[:, b]).any() else np.nan
                            for b in range(n)])
    names = tuple(class_names) if class_names is not None else tuple(str(c) for c in classes)
    return FidMatrix(values, absent, names, col_mean, col_std)
