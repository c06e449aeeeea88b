"""Block-causal decoder-only transformer for next-scale token prediction."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..conditioning import MeasurementEncoder, build_condition_tokens
from ..tokenizer.quantize import next_scale_inputs
from .sequence import N_CONDITION


class SelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, bias):
        B, L, C = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads) + bias
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, C))


class Block(nn.Module):
    def __init__(self, width, heads, mlp_ratio=4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"),
                                 nn.Linear(hidden, width))

    def forward(self, x, bias):
        x = x + self.attn(self.ln1(x), bias)
        return x + self.mlp(self.ln2(x))


def block_causal_bias(scales, use_measurement_token=True) -> torch.Tensor:
    """Additive attention bias over [condition tokens, scale 1, ..., scale K].

    A scale-k position sees the condition tokens and every position of scales
    <= k. Condition tokens see only each other. Without a measurement token the
    second condition slot is hidden from every other position.
    """
    levels = [-1] * N_CONDITION
    for k, (h, w) in enumerate(scales):
        levels += [k] * (h * w)
    lv = torch.tensor(levels)
    allowed = lv[None, :] <= lv[:, None]
    if not use_measurement_token:
        allowed[:, 1] = False
        allowed[1, 1] = True
    bias = torch.zeros(allowed.shape)
    bias[~allowed] = float("-inf")
    return bias


class NextScaleTransformer(nn.Module):
    def __init__(self, n_classes, codebook, scales, latent_size, width=256, depth=6, heads=4,
                 mlp_ratio=4.0, n_measurements=14, use_measurement_token=True):
        super().__init__()
        self.scales = tuple(tuple(s) for s in scales)
        self.latent_size = tuple(latent_size)
        self.vocab_size, code_dim = codebook.shape
        self.width = width
        self.use_measurement_token = use_measurement_token
        self.register_buffer("codebook", codebook.detach().clone())

        std = math.sqrt(1.0 / width / 3.0)
        self.class_emb = nn.Embedding(n_classes, width)
        self.measure_enc = MeasurementEncoder(n_measurements, width)
        self.cond_type = nn.Parameter(torch.zeros(N_CONDITION, width))
        self.word_embed = nn.Linear(code_dim, width)
        h1, w1 = self.scales[0]
        self.start = nn.Parameter(torch.empty(h1 * w1, width))
        self.level_emb = nn.Embedding(len(self.scales), width)
        self.pos = nn.ParameterList([nn.Parameter(torch.empty(h * w, width)) for h, w in self.scales])
        for p in [self.start, self.cond_type, self.class_emb.weight, self.level_emb.weight, *self.pos]:
            nn.init.trunc_normal_(p, std=std)
        self.blocks = nn.ModuleList([Block(width, heads, mlp_ratio) for _ in range(depth)])
        self.head_norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, self.vocab_size)
        self.register_buffer("attn_bias", block_causal_bias(self.scales, use_measurement_token),
                             persistent=False)
        lens = [h * w for h, w in self.scales]
        self.offsets = [sum(lens[:k]) for k in range(len(lens) + 1)]

    def condition_tokens(self, classes, measurements=None):
        if measurements is None or not self.use_measurement_token:
            B = torch.as_tensor(classes).reshape(-1).shape[0]
            fq = self.cond_type.new_zeros(B, self.width)
        else:
            fq = self.measure_enc(measurements.to(self.cond_type.dtype))
        return build_condition_tokens(self.class_emb, classes, fq)

    def embed_codes(self, pyramid):
        return [F.embedding(idx, self.codebook).permute(0, 3, 1, 2) for idx in pyramid]

    def _scale_inputs(self, B, codes, n_scales):
        """Token-space inputs for the first ``n_scales`` scales, built from ``codes`` of coarser scales."""
        parts = [self.start.expand(B, -1, -1)]
        if n_scales > 1:
            ctx = next_scale_inputs(codes[: n_scales - 1] + [None], self.latent_size,
                                    self.scales[:n_scales])
            for c in ctx:
                parts.append(self.word_embed(c.flatten(2).transpose(1, 2)))
        x = torch.cat(parts, dim=1)
        lvl = torch.cat([self.level_emb.weight[k].expand(h * w, -1) + self.pos[k]
                         for k, (h, w) in enumerate(self.scales[:n_scales])])
        return x + lvl

    def forward(self, cond, codes, n_scales=None):
        """Logits (B, sum_k h_k w_k, V) for every scale given condition tokens and code grids.

        ``codes`` are (B, d, h_k, w_k) code vectors per scale. Logits for scale k
        depend only on ``cond`` and ``codes[:k-1]``. With ``n_scales`` set, only
        the first ``n_scales`` scales are processed.
        """
        n_scales = len(self.scales) if n_scales is None else n_scales
        B = cond.shape[0]
        x = torch.cat([cond + self.cond_type, self._scale_inputs(B, codes, n_scales)], dim=1)
        L = x.shape[1]
        bias = self.attn_bias[:L, :L].to(x.dtype)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.head(self.head_norm(x[:, N_CONDITION:]))

    def scale_slice(self, k):
        return slice(self.offsets[k], self.offsets[k + 1])
