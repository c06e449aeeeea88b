"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_images(X, resolution=None, name="X"):
    """Return ``X`` as a float32 array of shape (N, H, W, C) with values in [0, 1].

    A single (H, W, C) image is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W, C), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    if resolution is not None and tuple(X.shape[1:3]) != tuple(resolution):
        raise ValueError(
            f"{name} resolution {tuple(X.shape[1:3])} does not match configured {tuple(resolution)}"
        )
    return X


def check_masks(masks, shape=None, name="masks"):
    """Return binary masks as uint8 (N, H, W); raise on values outside {0, 1}."""
    M = np.asarray(masks)
    if M.ndim == 2:
        M = M[None]
    if M.ndim == 4 and M.shape[-1] == 1:
        M = M[..., 0]
    if M.ndim != 3:
        raise ValueError(f"{name} must have shape (N, H, W), got {M.shape}")
    if not np.isin(M, (0, 1)).all():
        raise ValueError(f"{name} must be binary with values in {{0, 1}}")
    if shape is not None and tuple(M.shape) != tuple(shape):
        raise ValueError(f"{name} shape {M.shape} does not match {tuple(shape)}")
    return M.astype(np.uint8)


def check_labels(y, n_samples, n_classes=None):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} labels, got {y.shape[0]}")
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"label {int(y.max())} out of range for {n_classes} classes")
    return y


def check_scales(scales):
    """Normalise a scale list to a tuple of (h, w) int pairs sorted ascending by area."""
    out = tuple((int(h), int(w)) for h, w in scales)
    if not out:
        raise ValueError("at least one scale is required")
    areas = [h * w for h, w in out]
    if any(a <= 0 for a in areas):
        raise ValueError(f"scales must be positive, got {out}")
    if any(b <= a for a, b in zip(areas, areas[1:])):
        raise ValueError(f"scales must be strictly increasing in area, got {out}")
    return out


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples into JSON-ready values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    return obj
