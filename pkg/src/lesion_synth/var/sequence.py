"""Flattening of token pyramids into the scale-ordered sequence the transformer sees."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CONDITION = 2
CONDITION_SLOT = -1


@dataclass(frozen=True)
class ScaleSequence:
    tokens: np.ndarray  # (B, 2 + L); condition slots hold CONDITION_SLOT
    coords: np.ndarray  # (2 + L, 3) of (scale, row, col); condition rows are all -1
    scales: tuple

    def __len__(self):
        return self.tokens.shape[1]


def scale_coordinates(scales) -> np.ndarray:
    rows = [(-1, -1, -1)] * N_CONDITION
    for k, (h, w) in enumerate(scales):
        rows.extend((k, i, j) for i in range(h) for j in range(w))
    return np.array(rows, dtype=np.int64)


def flatten_pyramid(pyramid, scales) -> ScaleSequence:
    """Row-major within each scale, scales ascending, two reserved condition slots first."""
    scales = tuple(tuple(int(v) for v in s) for s in scales)
    if len(pyramid) != len(scales):
        raise ValueError(f"pyramid has {len(pyramid)} scales, expected {len(scales)}")
    grids = []
    for g, (h, w) in zip(pyramid, scales):
        g = np.asarray(g)
        if g.ndim == 2:
            g = g[None]
        if g.shape[-2:] != (h, w):
            raise ValueError(f"grid shape {g.shape[-2:]} does not match scale {(h, w)}")
        grids.append(g.reshape(g.shape[0], -1))
    B = grids[0].shape[0]
    cond = np.full((B, N_CONDITION), CONDITION_SLOT, dtype=np.int64)
    return ScaleSequence(np.concatenate([cond, *grids], axis=1).astype(np.int64),
                         scale_coordinates(scales), scales)


def unflatten_sequence(seq: ScaleSequence):
    out, pos = [], N_CONDITION
    B = seq.tokens.shape[0]
    for h, w in seq.scales:
        out.append(seq.tokens[:, pos:pos + h * w].reshape(B, h, w))
        pos += h * w
    return out
