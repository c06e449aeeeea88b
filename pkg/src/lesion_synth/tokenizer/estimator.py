"""Scikit-learn style wrapper around the lesion-focused multi-scale VQ autoencoder."""
from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._frozen import FrozenConvStack
from .._validation import check_images, check_masks, check_scales, jsonable
from .losses import vqvae_loss
from .networks import Decoder, Encoder, PatchDiscriminator, hinge_d_loss
from .quantize import (build_mask_pyramid, dequantize, downsample, residual_cascade,
                       upsample)

logger = logging.getLogger(__name__)

DEFAULT_SCALES = ((1, 1), (2, 2), (3, 3), (4, 4), (6, 6), (8, 8), (16, 16))


class TrainingDivergedError(RuntimeError):
    pass


def _to_nchw(X) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(X, dtype=np.float32).transpose(0, 3, 1, 2)))


def _to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).contiguous().numpy()


class LesionFocusedVQVAE(TransformerMixin, BaseEstimator):
    """Multi-scale residual VQ autoencoder trained with a background-consistency term.

    ``transform`` maps images (N, H, W, 3) in [0, 1] to a token pyramid: a list
    of K integer arrays shaped (N, h_k, w_k). ``inverse_transform`` decodes a
    pyramid back to images.

    The training objective is pixel MSE + lesion-focused code disagreement
    outside the lesion mask at every scale + latent MSE + weighted perceptual
    and hinge-adversarial terms, plus a commitment penalty on the encoder.
    Setting ``lesion_focus=False`` drops the background term.
    """

    def __init__(self, scales=DEFAULT_SCALES, vocab_size=1024, code_dim=32, channels=64,
                 n_down=2, lambda_perceptual=1.0, lambda_adversarial=0.1, disc_start_epoch=20,
                 commitment_beta=0.25, lesion_focus=True, learning_rate=1e-3,
                 betas=(0.9, 0.95), weight_decay=0.05, epochs=200, batch_size=35,
                 restart_dead_codes=True, perceptual_seed=0, random_state=0, verbose=0):
        self.scales = scales
        self.vocab_size = vocab_size
        self.code_dim = code_dim
        self.channels = channels
        self.n_down = n_down
        self.lambda_perceptual = lambda_perceptual
        self.lambda_adversarial = lambda_adversarial
        self.disc_start_epoch = disc_start_epoch
        self.commitment_beta = commitment_beta
        self.lesion_focus = lesion_focus
        self.learning_rate = learning_rate
        self.betas = betas
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.restart_dead_codes = restart_dead_codes
        self.perceptual_seed = perceptual_seed
        self.random_state = random_state
        self.verbose = verbose

    # ------------------------------------------------------------------ setup

    def _build(self, resolution):
        scales = check_scales(self.scales)
        H, W = resolution
        f = 2 ** self.n_down
        if H % f or W % f:
            raise ValueError(f"resolution {resolution} not divisible by encoder stride {f}")
        latent = (H // f, W // f)
        if scales[-1] != latent:
            raise ValueError(f"finest scale {scales[-1]} must equal the latent size {latent}")
        self.scales_ = scales
        self.resolution_ = (int(H), int(W))
        self.latent_size_ = latent
        self.encoder_ = Encoder(3, self.channels, self.code_dim, self.n_down)
        self.decoder_ = Decoder(3, self.channels, self.code_dim, self.n_down)
        self.codebook_ = torch.nn.Embedding(self.vocab_size, self.code_dim)
        torch.nn.init.uniform_(self.codebook_.weight, -1.0 / self.vocab_size, 1.0 / self.vocab_size)
        self.discriminator_ = PatchDiscriminator(3, 32, 2)
        self.perceptual_ = FrozenConvStack(seed=self.perceptual_seed)
        self.history_ = []

    def _modules(self):
        return {"encoder": self.encoder_, "decoder": self.decoder_,
                "codebook": self.codebook_, "discriminator": self.discriminator_}

    def _set_train(self, mode):
        for m in self._modules().values():
            m.train(mode)

    # --------------------------------------------------------------- training

    @torch.no_grad()
    def _init_codebook(self, x, gen):
        """Seed codebook rows with residual vectors of an ideal cascade on real latents."""
        f = self.encoder_(x)
        vecs, residual = [], f
        for hk, wk in self.scales_:
            r = downsample(residual, (hk, wk))
            vecs.append(r.permute(0, 2, 3, 1).reshape(-1, self.code_dim))
            residual = residual - upsample(r, self.latent_size_)
        vecs = torch.cat(vecs)
        pick = torch.randint(0, vecs.shape[0], (self.vocab_size,), generator=gen)
        noise = torch.randn(self.vocab_size, self.code_dim, generator=gen) * (1e-3 * vecs.std() + 1e-6)
        self.codebook_.weight.copy_(vecs[pick] + noise)

    @torch.no_grad()
    def _restart_codes(self, usage, residual_pool, gen):
        dead = torch.nonzero(usage == 0).flatten()
        if dead.numel() == 0 or residual_pool.shape[0] == 0:
            return 0
        pick = torch.randint(0, residual_pool.shape[0], (dead.numel(),), generator=gen)
        noise = torch.randn(dead.numel(), self.code_dim, generator=gen) * (1e-3 * residual_pool.std() + 1e-6)
        self.codebook_.weight[dead] = residual_pool[pick] + noise
        return int(dead.numel())

    def fit(self, X, y=None, masks=None, checkpoint_out=None):
        """Train encoder, decoder, codebook and discriminator on images ``X`` with lesion ``masks``."""
        X = check_images(X)
        if masks is None:
            if self.lesion_focus:
                raise ValueError("masks are required when lesion_focus is enabled")
            masks = np.zeros(X.shape[:3], dtype=np.uint8)
        M = check_masks(masks, shape=X.shape[:3])
        if X.shape[0] == 0:
            raise ValueError("cannot fit on an empty training set")

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self._build(X.shape[1:3])
            gen = torch.Generator().manual_seed(self.random_state)
            self._fit_loop(_to_nchw(X), torch.from_numpy(M), gen, checkpoint_out)
        if checkpoint_out is not None:
            self.save(checkpoint_out)
        return self

    def _fit_loop(self, x_all, m_all, gen, checkpoint_out):
        n = x_all.shape[0]
        codebook_params = list(self.codebook_.parameters())
        net_params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        opt = torch.optim.AdamW(
            [{"params": net_params, "weight_decay": self.weight_decay},
             {"params": codebook_params, "weight_decay": 0.0}],
            lr=self.learning_rate, betas=tuple(self.betas))
        opt_d = torch.optim.AdamW(self.discriminator_.parameters(), lr=self.learning_rate,
                                  betas=tuple(self.betas), weight_decay=self.weight_decay)
        if self.epochs <= 0:
            return
        self._set_train(True)
        self._init_codebook(x_all[: min(n, 256)], gen)
        good_state = self._state_dict()

        for epoch in range(self.epochs):
            perm = torch.randperm(n, generator=gen)
            sums, n_batches = {}, 0
            usage = torch.zeros(self.vocab_size, dtype=torch.long)
            pool = None
            use_adv = self.lambda_adversarial > 0 and epoch >= self.disc_start_epoch
            try:
                for start in range(0, n, self.batch_size):
                    idx = perm[start:start + self.batch_size]
                    x, m = x_all[idx], m_all[idx]
                    stats, casc = self._train_step(x, m, opt, opt_d, use_adv)
                    for k, v in stats.items():
                        sums[k] = sums.get(k, 0.0) + v
                    n_batches += 1
                    for ind in casc.indices:
                        usage += torch.bincount(ind.flatten(), minlength=self.vocab_size)
                    pool = torch.cat([r.detach().permute(0, 2, 3, 1).reshape(-1, self.code_dim)
                                      for r in casc.residuals])
            except FloatingPointError as exc:
                self._load_state_dict(good_state)
                if checkpoint_out is not None:
                    self.save(checkpoint_out)
                raise TrainingDivergedError(f"tokenizer diverged in epoch {epoch + 1}: {exc}") from exc
            record = {k: v / n_batches for k, v in sums.items()}
            record["epoch"] = epoch + 1
            record["codes_used"] = int((usage > 0).sum())
            if self.restart_dead_codes and epoch < self.epochs - 1:
                record["codes_restarted"] = self._restart_codes(usage, pool, gen)
            self.history_.append(record)
            good_state = self._state_dict()
            if self.verbose:
                logger.info("tokenizer epoch %d: %s", epoch + 1,
                            ", ".join(f"{k}={v:.4g}" for k, v in record.items()))
        self._set_train(False)

    def _lesion_codes(self, x_hat, codebook):
        """Straight-through code grids of the re-encoded reconstruction."""
        casc = residual_cascade(self.encoder_(x_hat), codebook, self.scales_)
        return [r + (q - r).detach() for r, q in zip(casc.residuals, casc.codes)]

    def _train_step(self, x, m, opt, opt_d, use_adv):
        codebook = self.codebook_.weight
        f = self.encoder_(x)
        casc = residual_cascade(f, codebook, self.scales_)
        f_st = f + (casc.f_hat - f).detach()
        x_hat = self.decoder_(f_st)
        mask_pyr = build_mask_pyramid(m, self.scales_)
        if self.lesion_focus:
            codes_real = [q.detach() for q in casc.codes]
            codes_recon = self._lesion_codes(x_hat, codebook.detach())
        else:
            codes_real = codes_recon = [q.detach() for q in casc.codes]
        loss = vqvae_loss(
            x, x_hat, codes_real, codes_recon, f.detach(), casc.f_hat, mask_pyr,
            lambda_perceptual=self.lambda_perceptual,
            lambda_adversarial=self.lambda_adversarial if use_adv else 0.0,
            perceptual_net=self.perceptual_ if self.lambda_perceptual > 0 else None,
            discriminator=self.discriminator_ if use_adv else None,
            lesion_focus=self.lesion_focus)
        commitment = self.commitment_beta * F.mse_loss(f, casc.f_hat.detach())
        opt.zero_grad(set_to_none=True)
        (loss.total + commitment).backward()
        opt.step()
        stats = loss.as_floats()
        stats["commitment"] = float(commitment.detach())
        if use_adv:
            d_loss = hinge_d_loss(self.discriminator_(x), self.discriminator_(x_hat.detach()))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            stats["discriminator"] = float(d_loss.detach())
        return stats, casc

    # -------------------------------------------------------------- inference

    def _check_input(self, X):
        check_is_fitted(self, "encoder_")
        return check_images(X, resolution=self.resolution_)

    def _batches(self, n, size=64):
        for s in range(0, n, size):
            yield slice(s, min(n, s + size))

    @torch.no_grad()
    def encode(self, X) -> np.ndarray:
        """Images (N, H, W, 3) -> latents (N, h, w, d)."""
        X = self._check_input(X)
        self._set_train(False)
        x = _to_nchw(X)
        return np.concatenate([_to_nhwc(self.encoder_(x[s])) for s in self._batches(len(x))]) \
            if len(x) else np.zeros((0, *self.latent_size_, self.code_dim), np.float32)

    @torch.no_grad()
    def quantize(self, latents):
        """Latents (N, h, w, d) -> (pyramid, f_hat) with f_hat shaped like ``latents``."""
        check_is_fitted(self, "encoder_")
        f = _to_nchw(latents)
        if not torch.isfinite(f).all():
            raise ValueError("latents contain non-finite values")
        casc = residual_cascade(f, self.codebook_.weight, self.scales_)
        return [i.numpy() for i in casc.indices], _to_nhwc(casc.f_hat)

    @torch.no_grad()
    def dequantize(self, pyramid) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        self._check_pyramid(pyramid)
        f_hat = dequantize([torch.as_tensor(np.asarray(p)) for p in pyramid],
                           self.codebook_.weight, self.latent_size_)
        return _to_nhwc(f_hat)

    @torch.no_grad()
    def decode(self, latents) -> np.ndarray:
        """Latents (N, h, w, d) -> images (N, H, W, 3) in [0, 1]."""
        check_is_fitted(self, "encoder_")
        z = np.asarray(latents, dtype=np.float32)
        if z.ndim == 3:
            z = z[None]
        if z.shape[1:] != (*self.latent_size_, self.code_dim):
            raise ValueError(f"latent shape {z.shape[1:]} != {(*self.latent_size_, self.code_dim)}")
        self._set_train(False)
        t = _to_nchw(z)
        return np.concatenate([_to_nhwc(self.decoder_(t[s])) for s in self._batches(len(t))])

    def _check_pyramid(self, pyramid):
        if len(pyramid) != len(self.scales_):
            raise ValueError(f"pyramid has {len(pyramid)} scales, expected {len(self.scales_)}")
        for p, (h, w) in zip(pyramid, self.scales_):
            if tuple(np.shape(p)[-2:]) != (h, w):
                raise ValueError(f"pyramid grid {np.shape(p)} does not match scale {(h, w)}")

    def transform(self, X):
        """Images -> token pyramid (list of K int64 arrays shaped (N, h_k, w_k))."""
        return self.quantize(self.encode(X))[0]

    def inverse_transform(self, pyramid):
        return self.decode(self.dequantize(pyramid))

    def reconstruct(self, X):
        return self.decode(self.quantize(self.encode(X))[1])

    def code_vectors(self, pyramid):
        """Pyramid of indices -> list of (N, d, h_k, w_k) code tensors."""
        return [F.embedding(torch.as_tensor(np.asarray(p), dtype=torch.long),
                            self.codebook_.weight.detach()).permute(0, 3, 1, 2)
                for p in pyramid]

    # ------------------------------------------------------------ persistence

    def _state_dict(self):
        return copy.deepcopy({k: m.state_dict() for k, m in self._modules().items()})

    def _load_state_dict(self, state):
        for k, m in self._modules().items():
            m.load_state_dict(state[k])

    def save(self, path):
        """Write the weights to ``path`` and a JSON metadata sidecar next to it."""
        check_is_fitted(self, "encoder_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        params = self.get_params()
        torch.save({"params": params, "resolution": self.resolution_,
                    "state": self._state_dict(), "history": self.history_}, path)
        meta = {"kind": "tokenizer", "config": jsonable(params),
                "resolution": list(self.resolution_), "epochs_completed": len(self.history_),
                "loss_series": self.history_}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path):
        blob = torch.load(path, map_location="cpu", weights_only=False)
        est = cls(**blob["params"])
        est._build(blob["resolution"])
        est._load_state_dict(blob["state"])
        est.history_ = blob["history"]
        est._set_train(False)
        return est



def save_pyramid(path, pyramid, scales):
    """Write a token pyramid as JSON: the scale list plus row-major index arrays."""
    rec = {"scales": [list(s) for s in scales],
           "grids": [np.asarray(p).tolist() for p in pyramid]}
    Path(path).write_text(json.dumps(rec))
    return Path(path)


def load_pyramid(path):
    rec = json.loads(Path(path).read_text())
    return [np.asarray(g, dtype=np.int64) for g in rec["grids"]], [tuple(s) for s in rec["scales"]]
