"""Scikit-learn style estimator for measurement-conditioned next-scale generation."""
from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .._validation import check_labels, check_scales, jsonable
from ..measurements import N_FEATURES
from .model import NextScaleTransformer
from .sampling import sample_tokens

logger = logging.getLogger(__name__)

MEASUREMENT_MODES = ("extracted", "fixed", "none")


def next_scale_loss(logits, target_pyramid):
    """Mean cross-entropy over every predicted token of every scale.

    ``logits`` is (B, L, V); ``target_pyramid`` a list of (B, h_k, w_k) index grids.
    """
    targets = torch.cat([torch.as_tensor(t, dtype=torch.long).reshape(t.shape[0], -1)
                         for t in target_pyramid], dim=1)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:2]:
        raise ValueError(f"targets {tuple(targets.shape)} do not match logits {tuple(logits.shape[:2])}")
    if int(targets.max()) >= V or int(targets.min()) < 0:
        raise IndexError(f"target index out of range [0, {V})")
    return F.cross_entropy(logits.reshape(-1, V), targets.reshape(-1))


def lr_factor(step, total_steps, warmup_fraction=0.05, floor=0.1):
    """Linear warmup, then cosine decay from 1 to ``floor``."""
    warmup = max(1, int(total_steps * warmup_fraction))
    ramp = min(1.0, (step + 1) / warmup)
    progress = min(step, total_steps) / total_steps
    return ramp * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * progress)))


class NextScaleVAR(BaseEstimator):
    """Class- and measurement-conditioned next-scale autoregressive token model.

    Wraps a fitted :class:`~lesion_synth.tokenizer.LesionFocusedVQVAE` whose
    codebook (frozen) and scale list define the token space.

    ``measurement_mode`` selects the second condition token:

    - ``"extracted"``: per-sample normalised measurement vectors passed by the caller;
    - ``"fixed"``: one constant vector for every sample, whatever is passed;
    - ``"none"``: the measurement token is hidden by the attention mask (class token only).
    """

    def __init__(self, tokenizer=None, n_classes=None, depth=6, heads=4, width=256,
                 mlp_ratio=4.0, measurement_mode="extracted", fixed_measurement=None,
                 n_measurements=N_FEATURES, scales=None, learning_rate=1e-3,
                 betas=(0.9, 0.95), weight_decay=0.05, epochs=200, batch_size=35,
                 grad_clip=1.0, temperature=1.0, top_k=0, top_p=1.0, random_state=0,
                 verbose=0):
        self.tokenizer = tokenizer
        self.n_classes = n_classes
        self.depth = depth
        self.heads = heads
        self.width = width
        self.mlp_ratio = mlp_ratio
        self.measurement_mode = measurement_mode
        self.fixed_measurement = fixed_measurement
        self.n_measurements = n_measurements
        self.scales = scales
        self.learning_rate = learning_rate
        self.betas = betas
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.temperature = temperature
        self.top_k = top_k
        self.top_p = top_p
        self.random_state = random_state
        self.verbose = verbose

    # ------------------------------------------------------------------ setup

    def _build(self, n_classes, codebook, scales, latent_size):
        if self.measurement_mode not in MEASUREMENT_MODES:
            raise ValueError(f"measurement_mode must be one of {MEASUREMENT_MODES}")
        self.scales_ = check_scales(scales)
        self.latent_size_ = tuple(latent_size)
        self.n_classes_ = int(n_classes)
        self.model_ = NextScaleTransformer(
            self.n_classes_, torch.as_tensor(codebook, dtype=torch.float32), self.scales_,
            self.latent_size_, self.width, self.depth, self.heads, self.mlp_ratio,
            self.n_measurements, use_measurement_token=self.measurement_mode != "none")
        self.history_ = []

    def _tokenizer_space(self):
        tok = self.tokenizer
        if tok is None:
            raise ValueError("a fitted tokenizer is required")
        check_is_fitted(tok, "encoder_")
        if self.scales is not None and check_scales(self.scales) != tok.scales_:
            raise ValueError(f"VAR scales {list(check_scales(self.scales))} do not match "
                             f"tokenizer scales {list(tok.scales_)}")
        return tok.codebook_.weight.detach(), tok.scales_, tok.latent_size_

    def check_tokenizer(self):
        """Raise if the tokenizer is unfitted or its scales differ from ``scales``."""
        self._tokenizer_space()
        return self

    def _condition_vectors(self, measurements, n):
        """Normalised measurement tensor (n, D) for the configured mode, or None."""
        if self.measurement_mode == "none":
            return None
        if self.measurement_mode == "fixed":
            v = np.zeros(self.n_measurements) if self.fixed_measurement is None \
                else np.asarray(self.fixed_measurement, dtype=np.float64)
            return torch.as_tensor(np.tile(v, (n, 1)), dtype=torch.float32)
        if measurements is None:
            raise ValueError("measurement_mode='extracted' requires measurement vectors")
        m = np.asarray(measurements, dtype=np.float64).reshape(n, -1)
        if m.shape[1] != self.n_measurements:
            raise ValueError(f"expected {self.n_measurements} measurements, got {m.shape[1]}")
        return torch.as_tensor(m, dtype=torch.float32)

    # --------------------------------------------------------------- training

    def fit(self, X, y, measurements=None):
        """Fit on images (N, H, W, 3); they are tokenized with ``self.tokenizer``."""
        pyramid = self.tokenizer.transform(X)
        return self.fit_pyramids(pyramid, y, measurements)

    def fit_pyramids(self, pyramid, y, measurements=None):
        codebook, scales, latent = self._tokenizer_space()
        n = np.asarray(pyramid[0]).shape[0]
        y = check_labels(y, n)
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        y = check_labels(y, n, n_classes)
        targets = [torch.as_tensor(np.asarray(p), dtype=torch.long) for p in pyramid]
        for t, s in zip(targets, scales):
            if tuple(t.shape[1:]) != s:
                raise ValueError(f"pyramid grid {tuple(t.shape[1:])} does not match scale {s}")
        cond_vec = self._condition_vectors(measurements, n)
        labels = torch.as_tensor(y)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self._build(n_classes, codebook, scales, latent)
            gen = torch.Generator().manual_seed(self.random_state)
            self._fit_loop(targets, labels, cond_vec, gen)
        return self

    def _fit_loop(self, targets, labels, cond_vec, gen):
        model = self.model_
        decay, no_decay = [], []
        for name, p in model.named_parameters():
            (decay if p.dim() >= 2 and "emb" not in name and "pos" not in name else no_decay).append(p)
        opt = torch.optim.AdamW([{"params": decay, "weight_decay": self.weight_decay},
                                 {"params": no_decay, "weight_decay": 0.0}],
                                lr=self.learning_rate, betas=tuple(self.betas))
        n = labels.shape[0]
        steps_per_epoch = -(-n // self.batch_size)
        total_steps = max(1, self.epochs * steps_per_epoch)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, total_steps))
        model.train()
        for epoch in range(self.epochs):
            perm = torch.randperm(n, generator=gen)
            total, count = 0.0, 0
            for s in range(0, n, self.batch_size):
                idx = perm[s:s + self.batch_size]
                batch = [t[idx] for t in targets]
                cond = model.condition_tokens(labels[idx], None if cond_vec is None else cond_vec[idx])
                logits = model(cond, model.embed_codes(batch))
                loss = next_scale_loss(logits, batch)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite VAR loss in epoch {epoch + 1}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if self.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), self.grad_clip)
                opt.step()
                sched.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            self.history_.append({"epoch": epoch + 1, "cross_entropy": total / count})
            if self.verbose:
                logger.info("VAR epoch %d: cross_entropy=%.4f", epoch + 1, total / count)
        model.eval()

    # -------------------------------------------------------------- inference

    def forward_train(self, y, pyramid, measurements=None):
        """Teacher-forced logits (B, L, V) for every token of every scale."""
        check_is_fitted(self, "model_")
        y = np.asarray(y).reshape(-1)
        targets = [torch.as_tensor(np.asarray(p), dtype=torch.long) for p in pyramid]
        if [tuple(t.shape[1:]) for t in targets] != list(self.scales_):
            raise ValueError(f"pyramid scales {[tuple(t.shape[1:]) for t in targets]} != {list(self.scales_)}")
        cond = self.model_.condition_tokens(torch.as_tensor(y), self._condition_vectors(measurements, len(y)))
        return self.model_(cond, self.model_.embed_codes(targets))

    def score(self, pyramid, y, measurements=None):
        """Negative mean next-scale cross-entropy (higher is better)."""
        with torch.no_grad():
            return -float(next_scale_loss(self.forward_train(y, pyramid, measurements), pyramid))

    @torch.no_grad()
    def sample(self, y, measurements=None, seeds=0, temperature=None, top_k=None, top_p=None):
        """Generate one token pyramid per entry of ``y``.

        ``seeds`` is either one int (sample i uses seed + i) or a per-sample
        sequence; every sample draws from its own generator, so a sample does
        not depend on what else is in the batch.
        """
        check_is_fitted(self, "model_")
        model = self.model_
        model.eval()
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        n = y.shape[0]
        seeds = [int(seeds) + i for i in range(n)] if np.isscalar(seeds) else [int(s) for s in seeds]
        if len(seeds) != n:
            raise ValueError("need one seed per sample")
        gens = [torch.Generator().manual_seed(s) for s in seeds]
        temperature = self.temperature if temperature is None else temperature
        top_k = self.top_k if top_k is None else top_k
        top_p = self.top_p if top_p is None else top_p

        cond = model.condition_tokens(torch.as_tensor(y), self._condition_vectors(measurements, n))
        pyramid, codes = [], []
        for k, (h, w) in enumerate(self.scales_):
            logits = model(cond, codes, n_scales=k + 1)[:, model.scale_slice(k)]
            idx = torch.stack([sample_tokens(logits[i], temperature, top_k, top_p, gens[i])
                               for i in range(n)]).view(n, h, w)
            pyramid.append(idx)
            codes.append(model.embed_codes([idx])[0])
        return [p.numpy() for p in pyramid]

    @torch.no_grad()
    def greedy(self, y, measurements=None):
        """Argmax decode, scale by scale."""
        check_is_fitted(self, "model_")
        model = self.model_
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        cond = model.condition_tokens(torch.as_tensor(y), self._condition_vectors(measurements, len(y)))
        pyramid, codes = [], []
        for k, (h, w) in enumerate(self.scales_):
            logits = model(cond, codes, n_scales=k + 1)[:, model.scale_slice(k)]
            idx = logits.argmax(dim=-1).view(len(y), h, w)
            pyramid.append(idx)
            codes.append(model.embed_codes([idx])[0])
        return [p.numpy() for p in pyramid]

    def generate(self, y, measurements=None, seeds=0, **sampler):
        """Sample pyramids and decode them to images with the tokenizer."""
        return self.tokenizer.inverse_transform(self.sample(y, measurements, seeds, **sampler))

    def condition_embedding(self, measurements, n=None):
        """F_q for the given normalised measurement vectors under the configured mode."""
        check_is_fitted(self, "model_")
        n = len(measurements) if n is None else n
        v = self._condition_vectors(measurements, n)
        if v is None:
            return None
        with torch.no_grad():
            return self.model_.measure_enc(v).numpy()

    # ------------------------------------------------------------ persistence

    def save(self, path):
        check_is_fitted(self, "model_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        params = {k: v for k, v in self.get_params(deep=False).items() if k != "tokenizer"}
        torch.save({"params": params, "n_classes": self.n_classes_, "scales": self.scales_,
                    "latent_size": self.latent_size_, "state": copy.deepcopy(self.model_.state_dict()),
                    "history": self.history_}, path)
        meta = {"kind": "var", "config": jsonable(params), "n_classes": self.n_classes_,
                "scales": [list(s) for s in self.scales_], "training_curve": self.history_}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path, tokenizer):
        blob = torch.load(path, map_location="cpu", weights_only=False)
        est = cls(tokenizer=tokenizer, **blob["params"])
        if tuple(tuple(s) for s in blob["scales"]) != tokenizer.scales_:
            raise ValueError(f"VAR checkpoint scales {blob['scales']} do not match tokenizer "
                             f"scales {list(tokenizer.scales_)}")
        est._build(blob["n_classes"], blob["state"]["codebook"], blob["scales"], blob["latent_size"])
        est.model_.load_state_dict(blob["state"])
        est.model_.eval()
        est.history_ = blob["history"]
        return est

