"""Multi-scale residual quantisation on (B, d, h, w) latent grids.

For scales k = 1..K the running residual is area-downsampled to (h_k, w_k),
every cell is snapped to its nearest codebook row, the quantised grid is
bilinearly upsampled back to (h, w) and subtracted from the residual. The
reconstruction ``f_hat`` is the sum of all upsampled quantised grids.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F


def downsample(x: torch.Tensor, size) -> torch.Tensor:
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="area")


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def nearest_code(x: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``x`` (ties go to the lowest index)."""
    if codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    with torch.no_grad():
        # ||x||^2 is constant per row and does not affect the argmin
        d = (codebook * codebook).sum(1)[None, :] - 2.0 * x @ codebook.t()
        return d.argmin(dim=1)


def embed(idx: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """(B, h, w) indices -> (B, d, h, w) code vectors."""
    return F.embedding(idx, codebook).permute(0, 3, 1, 2)


class Cascade(NamedTuple):
    indices: list  # K tensors (B, h_k, w_k)
    f_hat: torch.Tensor  # (B, d, h, w)
    residuals: list  # K tensors (B, d, h_k, w_k): the downsampled residual each scale quantised
    codes: list  # K tensors (B, d, h_k, w_k): the selected code vectors


def residual_cascade(f: torch.Tensor, codebook: torch.Tensor, scales) -> Cascade:
    if codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    if f.dim() != 4:
        raise ValueError(f"expected a (B, d, h, w) latent, got shape {tuple(f.shape)}")
    B, d, h, w = f.shape
    if tuple(scales[-1]) != (h, w):
        raise ValueError(f"finest scale {tuple(scales[-1])} does not match latent size {(h, w)}")
    residual = f
    f_hat = torch.zeros_like(f)
    indices, residuals, codes = [], [], []
    for hk, wk in scales:
        r = downsample(residual, (hk, wk))
        idx = nearest_code(r.permute(0, 2, 3, 1).reshape(-1, d), codebook).view(B, hk, wk)
        q = embed(idx, codebook)
        up = upsample(q, (h, w))
        residual = residual - up
        f_hat = f_hat + up
        indices.append(idx)
        residuals.append(r)
        codes.append(q)
    return Cascade(indices, f_hat, residuals, codes)


def quantize_multiscale(f: torch.Tensor, codebook: torch.Tensor, scales):
    """Return ``(pyramid, f_hat)`` for latent ``f`` of shape (B, d, h, w)."""
    c = residual_cascade(f, codebook, scales)
    return c.indices, c.f_hat


def dequantize(pyramid, codebook: torch.Tensor, latent_size=None) -> torch.Tensor:
    """Sum of upsampled code grids; bit-identical to the ``f_hat`` of :func:`quantize_multiscale`."""
    V = codebook.shape[0]
    if latent_size is None:
        latent_size = tuple(pyramid[-1].shape[-2:])
    B = pyramid[0].shape[0]
    f_hat = torch.zeros(B, codebook.shape[1], *latent_size, dtype=codebook.dtype,
                        device=codebook.device)
    for idx in pyramid:
        idx = torch.as_tensor(idx, dtype=torch.long, device=codebook.device)
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= V):
            raise IndexError(f"token index out of range [0, {V})")
        f_hat = f_hat + upsample(embed(idx, codebook), latent_size)
    return f_hat


def next_scale_inputs(codes, latent_size, scales):
    """Teacher-forcing inputs for scales 2..K.

    The input for scale k is the cumulative reconstruction of scales < k,
    area-downsampled to (h_k, w_k). ``codes`` are the (B, d, h_j, w_j) code
    vectors of every scale; the finest scale's codes are never read.
    """
    out = []
    acc = None
    for k in range(1, len(scales)):
        up = upsample(codes[k - 1], latent_size)
        acc = up if acc is None else acc + up
        out.append(downsample(acc, scales[k]))
    return out


def build_mask_pyramid(mask, scales) -> list:
    """Max-pool a full-resolution binary mask down to every scale.

    Accepts (H, W) or (B, H, W) numpy arrays or tensors; returns K float tensors
    of shape (B, 1, h_k, w_k) with values in {0, 1}.
    """
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask)
    if not torch.isin(m, torch.tensor([0, 1], dtype=m.dtype)).all():
        raise ValueError("mask must be binary")
    if m.dim() == 2:
        m = m[None]
    m = m[:, None].float()
    return [F.adaptive_max_pool2d(m, (int(h), int(w))) for h, w in scales]
