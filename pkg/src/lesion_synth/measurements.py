"""Lesion measurement scores computed from an image and its lesion mask.

Fourteen scores in a fixed order: five shape descriptors, five first-order
histogram statistics of the masked grayscale pixels and four gray-level
co-occurrence (GLCM) texture features.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_masks

FEATURE_NAMES = (
    "area_fraction",
    "perimeter_norm",
    "circularity",
    "elongation",
    "bbox_aspect",
    "intensity_mean",
    "intensity_std",
    "intensity_skewness",
    "intensity_kurtosis_excess",
    "intensity_entropy_bits",
    "glcm_contrast",
    "glcm_correlation",
    "glcm_energy",
    "glcm_homogeneity",
)
N_FEATURES = len(FEATURE_NAMES)
GLCM_OFFSETS = ((0, 1), (1, 0))

# relative threshold below which a variance is treated as exactly zero
_DEGENERATE_STD = 1e-12


def _quantize(values, lo, hi, n_bins):
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    q = np.floor((values - lo) / (hi - lo) * n_bins).astype(np.int64)
    return np.clip(q, 0, n_bins - 1)


def glcm(image_gray, mask, num_levels=16, offsets=GLCM_OFFSETS):
    """Symmetric, normalised co-occurrence matrix averaged over ``offsets``.

    Gray levels are quantised uniformly over the min-max range of the masked
    pixels and only pairs with both pixels inside the mask are counted.

    Returns ``(P, degenerate)``. When no offset yields a valid pair, ``P`` is
    uniform on the diagonal cells of the gray levels present in the mask and
    ``degenerate`` is True.
    """
    if num_levels < 2:
        raise ValueError("num_levels must be >= 2")
    if len(offsets) == 0:
        raise ValueError("offsets must be non-empty")
    g = np.asarray(image_gray, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if g.shape != m.shape:
        raise ValueError(f"image {g.shape} and mask {m.shape} differ")
    if not m.any():
        raise ValueError("mask is empty")
    vals = g[m]
    levels = np.zeros(g.shape, dtype=np.int64)
    levels[m] = _quantize(vals, vals.min(), vals.max(), num_levels)

    H, W = g.shape
    mats = []
    for dy, dx in offsets:
        ys0, ys1 = max(0, -dy), min(H, H - dy)
        xs0, xs1 = max(0, -dx), min(W, W - dx)
        a = (slice(ys0, ys1), slice(xs0, xs1))
        b = (slice(ys0 + dy, ys1 + dy), slice(xs0 + dx, xs1 + dx))
        valid = m[a] & m[b]
        if not valid.any():
            continue
        i, j = levels[a][valid], levels[b][valid]
        counts = np.zeros((num_levels, num_levels), dtype=np.float64)
        np.add.at(counts, (i, j), 1.0)
        counts = counts + counts.T
        mats.append(counts / counts.sum())
    if not mats:
        present = np.unique(levels[m])
        P = np.zeros((num_levels, num_levels))
        P[present, present] = 1.0 / present.size
        return P, True
    return np.mean(mats, axis=0), False


def glcm_features(P):
    """Return (contrast, correlation, energy, homogeneity) of a normalised GLCM."""
    n = P.shape[0]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    contrast = float(np.sum(P * (i - j) ** 2))
    energy = float(np.sum(P ** 2))
    homogeneity = float(np.sum(P / (1.0 + np.abs(i - j))))
    mu_i, mu_j = np.sum(P * i), np.sum(P * j)
    sd_i = math.sqrt(max(np.sum(P * (i - mu_i) ** 2), 0.0))
    sd_j = math.sqrt(max(np.sum(P * (j - mu_j) ** 2), 0.0))
    if sd_i <= _DEGENERATE_STD or sd_j <= _DEGENERATE_STD:
        correlation = 0.0
    else:
        correlation = float(np.sum(P * (i - mu_i) * (j - mu_j)) / (sd_i * sd_j))
    return contrast, correlation, energy, homogeneity


def boundary_length(mask) -> int:
    """Number of 4-connected lesion/background transitions; the frame counts as background."""
    m = np.pad(np.asarray(mask).astype(np.int8), 1)
    return int(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


def shape_features(mask):
    m = np.asarray(mask).astype(bool)
    H, W = m.shape
    area = int(m.sum())
    perimeter = boundary_length(m)
    ys, xs = np.nonzero(m)
    # pixels are unit squares, each contributing 1/12 variance per axis
    coords = np.stack([ys, xs]).astype(np.float64)
    coords -= coords.mean(axis=1, keepdims=True)
    cov = coords @ coords.T / area + np.eye(2) / 12.0
    lam = np.linalg.eigvalsh(cov)
    elongation = math.sqrt(lam[0] / lam[1])
    bh = ys.max() - ys.min() + 1
    bw = xs.max() - xs.min() + 1
    return (
        area / (H * W),
        perimeter / (2.0 * (H + W)),
        4.0 * math.pi * area / perimeter ** 2,
        elongation,
        min(bh, bw) / max(bh, bw),
    )


def histogram_features(values, n_bins=32):
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    d = v - mean
    var = float(np.mean(d ** 2))
    std = math.sqrt(var)
    if std <= _DEGENERATE_STD * max(1.0, abs(mean)):
        std = skew = kurt = 0.0
    else:
        skew = float(np.mean(d ** 3) / std ** 3)
        kurt = float(np.mean(d ** 4) / var ** 2 - 3.0)
    hist = np.bincount(_quantize(v, v.min(), v.max(), n_bins), minlength=n_bins)
    p = hist[hist > 0] / v.size
    entropy = float(-np.sum(p * np.log2(p))) if p.size > 1 else 0.0
    return mean, std, skew, kurt, entropy


def extract_measurements(image, mask, num_levels=16, hist_bins=32) -> np.ndarray:
    """Compute the 14 lesion measurement scores (see ``FEATURE_NAMES``).

    ``image`` is (H, W) grayscale or (H, W, C); colour images are reduced to
    their channel mean. ``mask`` must be binary with at least one lesion pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    m = np.asarray(mask)
    if m.shape != gray.shape:
        raise ValueError(f"image {gray.shape} and mask {m.shape} differ")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    m = m.astype(bool)
    if not m.any():
        raise ValueError("cannot extract measurements from an empty mask")
    P, _ = glcm(gray, m, num_levels)
    out = np.array(shape_features(m) + histogram_features(gray[m], hist_bins) + glcm_features(P))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite measurement: {dict(zip(FEATURE_NAMES, out))}")
    return out


class MeasurementExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping (images, masks) to (N, 14) measurement vectors."""

    def __init__(self, num_levels=16, hist_bins=32):
        self.num_levels = num_levels
        self.hist_bins = hist_bins

    def fit(self, X, y=None, masks=None):
        return self

    def transform(self, X, masks=None):
        if masks is None:
            raise ValueError("masks are required")
        X = check_images(X)
        M = check_masks(masks, shape=X.shape[:3])
        return np.stack([extract_measurements(x, m, self.num_levels, self.hist_bins)
                         for x, m in zip(X, M)])

    def fit_transform(self, X, y=None, masks=None):
        return self.fit(X, y, masks).transform(X, masks)

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_NAMES, dtype=object)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class MeasurementNormalizer(StandardScaler):
    """Per-dimension z-scoring with population std; zero-variance dimensions get std 1.

    A thin persistence layer over :class:`~sklearn.preprocessing.StandardScaler`,
    which already implements exactly this convention.
    """

    def __init__(self):
        super().__init__(with_mean=True, with_std=True)

    def fit(self, X, y=None, sample_weight=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("cannot fit a normalizer on an empty measurement set")
        return super().fit(X, y, sample_weight)

    @property
    def std_(self):
        check_is_fitted(self)
        return self.scale_

    def save(self, path):
        """Write a 2 x D table: the first row holds means, the second stds."""
        check_is_fitted(self)
        names = FEATURE_NAMES if self.mean_.shape[0] == N_FEATURES else \
            [f"f{i}" for i in range(self.mean_.shape[0])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stat", *names])
            w.writerow(["mean", *(repr(float(v)) for v in self.mean_)])
            w.writerow(["std", *(repr(float(v)) for v in self.scale_)])
        return Path(path)

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        norm = cls()
        norm.mean_ = np.array([float(v) for v in rows[1][1:]])
        norm.scale_ = np.array([float(v) for v in rows[2][1:]])
        norm.var_ = norm.scale_ ** 2
        norm.n_features_in_ = norm.mean_.shape[0]
        norm.n_samples_seen_ = 0
        return norm


def fit_normalizer(vectors) -> MeasurementNormalizer:
    return MeasurementNormalizer().fit(vectors)


def normalize(v, normalizer: MeasurementNormalizer) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = normalizer.transform(v.reshape(-1, v.shape[-1]))
    return out.reshape(v.shape)


def write_measurements(path, sample_ids, vectors):
    """One row per sample id, 14 named columns, full float precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *FEATURE_NAMES])
        for sid, v in zip(sample_ids, vectors):
            w.writerow([sid, *(repr(float(x)) for x in v)])
    return Path(path)


def read_measurements(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0][1:]) != FEATURE_NAMES:
        raise ValueError(f"{path}: unexpected columns {rows[0]}")
    ids = [r[0] for r in rows[1:]]
    return ids, np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
