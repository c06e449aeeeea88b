"""Feature extractors for FID and the feature export file."""
from __future__ import annotations

import csv
import hashlib
import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .._frozen import FrozenConvStack
from .._validation import check_images
from ..data import IMAGE_SUFFIXES, read_image
from .metrics import FeatureSet

logger = logging.getLogger(__name__)


class FrozenFeatureExtractor(TransformerMixin, BaseEstimator):
    """Global-average-pooled activations of a frozen, seeded random conv stack.

    Images are resized to ``input_size`` first so features are comparable
    across dataset resolutions.
    """

    def __init__(self, seed=0, channels=(16, 32, 64), input_size=64):
        self.seed = seed
        self.channels = channels
        self.input_size = input_size

    @property
    def extractor_id(self):
        ch = "-".join(str(c) for c in self.channels)
        return f"frozen-conv-v1/seed={self.seed}/ch={ch}/in={self.input_size}"

    def fit(self, X=None, y=None):
        self.net_ = FrozenConvStack(tuple(self.channels), 3, self.seed)
        return self

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags

    @torch.no_grad()
    def transform(self, X):
        if not hasattr(self, "net_"):
            self.fit()
        X = check_images(X)
        out = []
        for s in range(0, len(X), 128):
            x = torch.from_numpy(np.ascontiguousarray(X[s:s + 128].transpose(0, 3, 1, 2)))
            if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
                x = torch.nn.functional.interpolate(x, size=(self.input_size, self.input_size),
                                                    mode="bilinear", align_corners=False)
            out.append(self.net_(x)[-1].mean(dim=(2, 3)).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.channels[-1]))

    def feature_set(self, X, sample_ids=(), labels=()):
        return FeatureSet(self.transform(X), self.extractor_id, tuple(sample_ids), tuple(labels))


class ClassifierFeatureExtractor(TransformerMixin, BaseEstimator):
    """Penultimate-layer activations of a fitted :class:`ConvClassifier`."""

    def __init__(self, classifier=None):
        self.classifier = classifier

    @property
    def extractor_id(self):
        h = hashlib.sha256()
        for v in self.classifier.net_.state_dict().values():
            h.update(v.numpy().tobytes())
        return f"classifier-penultimate/{h.hexdigest()[:12]}"

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return self.classifier.embed(X)

    def feature_set(self, X, sample_ids=(), labels=()):
        return FeatureSet(self.transform(X), self.extractor_id, tuple(sample_ids), tuple(labels))


def export_features(image_dir, extractor, path, labels=None, resolution=None):
    """Write ``sample_id, label, f0..f{D-1}`` rows for every readable image in ``image_dir``.

    Unreadable files are skipped and returned in the second element.
    """
    paths = sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images found in {image_dir}")
    ids, images, skipped = [], [], []
    for p in paths:
        try:
            images.append(read_image(p, resolution))
            ids.append(p.stem)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", p, exc)
            skipped.append(p.name)
    if resolution is None and len({im.shape for im in images}) > 1:
        raise ValueError("images have mixed sizes; pass a resolution")
    feats = extractor.transform(np.stack(images))
    labels = labels or {}
    write_feature_table(path, ids, [labels.get(i, "") for i in ids], feats)
    return FeatureSet(feats, extractor.extractor_id, tuple(ids)), skipped


def write_feature_table(path, sample_ids, labels, feats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", *(f"f{i}" for i in range(feats.shape[1]))])
        for sid, lab, row in zip(sample_ids, labels, feats):
            w.writerow([sid, lab, *(repr(float(v)) for v in row)])
    return Path(path)
