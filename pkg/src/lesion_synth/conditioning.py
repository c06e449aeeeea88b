"""Condition tokens [class embedding, measurement embedding] and the class-average measurement codebook."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .measurements import FEATURE_NAMES, N_FEATURES


class EmptyClassError(LookupError):
    pass


class MeasurementEncoder(nn.Module):
    """Linear projection of a measurement vector followed by LayerNorm and SiLU."""

    def __init__(self, n_measurements=N_FEATURES, width=256):
        super().__init__()
        self.n_measurements = n_measurements
        self.proj = nn.Linear(n_measurements, width)
        self.norm = nn.LayerNorm(width)
        self.act = nn.SiLU()

    def forward(self, v):
        if v.shape[-1] != self.n_measurements:
            raise ValueError(f"expected {self.n_measurements} measurements, got {v.shape[-1]}")
        return self.act(self.norm(self.proj(v)))


def build_condition_tokens(class_embedding: nn.Embedding, classes, measurement_embedding):
    """Stack the class row and the measurement embedding into a (B, 2, width) prefix."""
    classes = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    n = class_embedding.num_embeddings
    if classes.numel() and (int(classes.min()) < 0 or int(classes.max()) >= n):
        raise ValueError(f"class id out of range [0, {n})")
    s = class_embedding(classes)
    fq = measurement_embedding.reshape(s.shape[0], -1)
    if fq.shape[-1] != s.shape[-1]:
        raise ValueError(f"measurement embedding width {fq.shape[-1]} != class width {s.shape[-1]}")
    return torch.stack([s, fq], dim=1)


class MeasurementCodebook(BaseEstimator):
    """Per-class running mean of raw measurement vectors.

    ``partial_fit`` folds new vectors into the running means; ``fit`` rebuilds
    from scratch. ``query`` returns the stored mean and fails for classes that
    have never been updated.
    """

    def __init__(self, n_classes=7, n_features=N_FEATURES, class_names=None):
        self.n_classes = n_classes
        self.n_features = n_features
        self.class_names = class_names

    def _init(self):
        self.means_ = np.zeros((self.n_classes, self.n_features), dtype=np.float64)
        self.counts_ = np.zeros(self.n_classes, dtype=np.int64)

    def _class_id(self, c):
        c = int(c)
        if not 0 <= c < self.n_classes:
            raise ValueError(f"class {c} out of range [0, {self.n_classes})")
        return c

    def update(self, c, v):
        if not hasattr(self, "means_"):
            self._init()
        c = self._class_id(c)
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.n_features:
            raise ValueError(f"expected {self.n_features} measurements, got {v.shape[0]}")
        self.counts_[c] += 1
        self.means_[c] += (v - self.means_[c]) / self.counts_[c]
        return self

    def partial_fit(self, X, y):
        for v, c in zip(np.asarray(X, dtype=np.float64), np.asarray(y).reshape(-1)):
            self.update(c, v)
        return self

    def fit(self, X, y):
        self._init()
        return self.partial_fit(X, y)

    def query(self, c) -> np.ndarray:
        c = self._class_id(c)
        if not hasattr(self, "counts_") or self.counts_[c] == 0:
            name = self._names()[c]
            raise EmptyClassError(f"class {name!r} has no measurement statistics")
        return self.means_[c].copy()

    def _names(self):
        return list(self.class_names) if self.class_names is not None else \
            [str(i) for i in range(self.n_classes)]

    def save(self, path):
        """CSV rows of class name, count and the mean vector in shortest round-trip repr."""
        if not hasattr(self, "means_"):
            self._init()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = FEATURE_NAMES if self.n_features == N_FEATURES else \
                [f"f{i}" for i in range(self.n_features)]
            w.writerow(["class", "count", *cols])
            for name, n, mean in zip(self._names(), self.counts_, self.means_):
                w.writerow([name, int(n), *(repr(float(x)) for x in mean)])
        return Path(path)

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        cb = cls(n_classes=len(body), n_features=len(rows[0]) - 2,
                 class_names=[r[0] for r in body])
        cb.counts_ = np.array([int(r[1]) for r in body], dtype=np.int64)
        cb.means_ = np.array([[float(x) for x in r[2:]] for r in body], dtype=np.float64)
        return cb
