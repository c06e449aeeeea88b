"""Small conv classifier and the augmentation recall protocol."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import recall_score
from sklearn.utils.validation import check_is_fitted

from .._validation import check_images, check_labels

logger = logging.getLogger(__name__)

CONDITIONS = ("baseline", "weighted", "augmented")


class _Net(nn.Module):
    def __init__(self, n_classes, channels=(16, 32, 64)):
        super().__init__()
        layers, c_in = [], 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, n_classes)

    def embed(self, x):
        return self.features(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.embed(x))


def _to_tensor(X):
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))


class ConvClassifier(ClassifierMixin, BaseEstimator):
    """Fixed small conv net trained with Adam on (N, H, W, 3) images in [0, 1].

    ``sampling="weighted"`` draws minibatches with probability inversely
    proportional to class frequency.
    """

    def __init__(self, n_classes=None, channels=(16, 32, 64), epochs=20, batch_size=32,
                 learning_rate=2e-3, sampling="uniform", random_state=0):
        self.n_classes = n_classes
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sampling = sampling
        self.random_state = random_state

    def fit(self, X, y):
        if self.sampling not in ("uniform", "weighted"):
            raise ValueError("sampling must be 'uniform' or 'weighted'")
        X = check_images(X)
        y = check_labels(y, len(X), self.n_classes)
        n_classes = self.n_classes or int(y.max()) + 1
        self.classes_ = np.arange(n_classes)
        xt, yt = _to_tensor(X), torch.as_tensor(y)
        n = len(y)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.net_ = _Net(n_classes, tuple(self.channels))
            gen = torch.Generator().manual_seed(self.random_state)
            opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
            if self.sampling == "weighted":
                counts = np.bincount(y, minlength=n_classes).astype(np.float64)
                w = torch.as_tensor(1.0 / counts[y])
            self.net_.train()
            for _ in range(self.epochs):
                if self.sampling == "weighted":
                    order = torch.multinomial(w, n, replacement=True, generator=gen)
                else:
                    order = torch.randperm(n, generator=gen)
                for s in range(0, n, self.batch_size):
                    idx = order[s:s + self.batch_size]
                    if len(idx) < 2:
                        continue
                    loss = F.cross_entropy(self.net_(xt[idx]), yt[idx])
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
            self.net_.eval()
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        out = [self.net_(_to_tensor(X[s:s + 256])).softmax(-1).double().numpy()
               for s in range(0, len(X), 256)]
        p = np.concatenate(out)
        return p / p.sum(1, keepdims=True)

    def predict(self, X):
        return self.predict_proba(X).argmax(1)

    @torch.no_grad()
    def embed(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        return np.concatenate([self.net_.embed(_to_tensor(X[s:s + 256])).double().numpy()
                               for s in range(0, len(X), 256)])


@dataclass
class RecallReport:
    class_names: tuple
    per_class: dict = field(default_factory=dict)  # condition -> (C,) recall, NaN where excluded
    mean: dict = field(default_factory=dict)
    excluded: tuple = ()

    def rows(self):
        return [(c, self.per_class[c], self.mean[c]) for c in CONDITIONS if c in self.mean]


def balance_with_synthetic(X, y, X_syn, y_syn, target_per_class, seed=0):
    """Top up each class with synthetic images until it has ``target_per_class`` samples.

    Classes already at or above the target are left as they are.
    """
    if X_syn is None or len(X_syn) == 0:
        raise ValueError("no synthetic samples available for balancing")
    rng = np.random.default_rng(seed)
    parts_x, parts_y = [X], [y]
    for c in np.unique(np.concatenate([y, y_syn])):
        need = target_per_class - int((y == c).sum())
        pool = np.flatnonzero(y_syn == c)
        if need <= 0:
            continue
        if len(pool) == 0:
            logger.warning("class %d has no synthetic samples; left unbalanced", c)
            continue
        pick = rng.choice(pool, size=need, replace=need > len(pool))
        parts_x.append(X_syn[pick])
        parts_y.append(y_syn[pick])
    return np.concatenate(parts_x), np.concatenate(parts_y)


def downstream_augment_eval(train, synth, test, class_names, target_per_class=None,
                            classifier_params=None, seed=0):
    """Per-class and mean test recall for baseline, weighted and augmented training.

    ``train``, ``synth`` and ``test`` are ``(images, labels)`` pairs. Classes
    absent from the test set are excluded from the mean and listed in
    ``excluded``.
    """
    X_tr, y_tr = check_images(train[0]), np.asarray(train[1], dtype=np.int64)
    X_te, y_te = check_images(test[0]), np.asarray(test[1], dtype=np.int64)
    X_syn = None if synth is None or len(synth[0]) == 0 else check_images(synth[0])
    if X_syn is None:
        raise ValueError("no synthetic samples available for balancing")
    y_syn = np.asarray(synth[1], dtype=np.int64)
    n_classes = len(class_names)
    present = np.isin(np.arange(n_classes), y_te)
    excluded = tuple(class_names[c] for c in range(n_classes) if not present[c])
    for name in excluded:
        logger.warning("class %s has no test samples; excluded from recall", name)
    if target_per_class is None:
        target_per_class = int(np.bincount(y_tr, minlength=n_classes).max())

    params = dict(classifier_params or {})
    params.setdefault("random_state", seed)
    setups = {
        "baseline": (X_tr, y_tr, "uniform"),
        "weighted": (X_tr, y_tr, "weighted"),
        "augmented": (*balance_with_synthetic(X_tr, y_tr, X_syn, y_syn, target_per_class, seed), "uniform"),
    }
    report = RecallReport(tuple(class_names), excluded=excluded)
    labels = np.flatnonzero(present)
    for cond in CONDITIONS:
        X, y, sampling = setups[cond]
        clf = ConvClassifier(n_classes=n_classes, sampling=sampling, **params).fit(X, y)
        rec = np.full(n_classes, np.nan)
        rec[labels] = recall_score(y_te, clf.predict(X_te), labels=labels, average=None,
                                   zero_division=0)
        report.per_class[cond] = rec
        report.mean[cond] = float(np.nanmean(rec))
    return report
