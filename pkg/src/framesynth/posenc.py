"""Sinusoidal positional maps for frame sequences.

A position token p becomes a spatially constant (1, d_model, h, w) map:
channel 2k holds sin(p * w_k), channel 2k+1 holds cos(p * w_k), with
w_k = 10000^(-2k / d_model). Wavelengths run geometrically from 2*pi up to
10000 * 2*pi. Shifting the token by m acts linearly on each (sin, cos)
channel pair through a rotation-like 2x2 block, which shift_matrix exposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine
from .engine import Tensor


def _frequencies(d_model: int, dtype) -> np.ndarray:
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even for sin/cos pairing, got {d_model}")
    k = np.arange(d_model // 2, dtype=np.float64)
    return (10000.0 ** (-2.0 * k / d_model)).astype(dtype)


def pos_vector(p: float, d_model: int, dtype=None) -> np.ndarray:
    """Channel vector of the positional map for token p."""
    dtype = dtype or engine.default_dtype()
    w = _frequencies(d_model, np.float64)
    vec = np.empty(d_model, dtype=np.float64)
    vec[0::2] = np.sin(p * w)
    vec[1::2] = np.cos(p * w)
    return vec.astype(dtype)


def pos_map(p: float, h: int, w: int, d_model: int) -> Tensor:
    """Spatially constant positional map of shape (1, d_model, h, w)."""
    if h < 1 or w < 1:
        raise ValueError(f"spatial extents must be >= 1, got {h}x{w}")
    vec = pos_vector(p, d_model)
    data = np.broadcast_to(vec.reshape(1, d_model, 1, 1), (1, d_model, h, w)).copy()
    return Tensor(data)


def pos_map_stack(positions: Sequence[float], h: int, w: int, d_model: int,
                  dtype=None) -> np.ndarray:
    """(n, d_model, h, w) array of positional maps, one per token."""
    dtype = dtype or engine.default_dtype()
    n = len(positions)
    out = np.empty((n, d_model, h, w), dtype=dtype)
    for i, p in enumerate(positions):
        out[i] = pos_vector(float(p), d_model, dtype).reshape(d_model, 1, 1)
    return out


def add_positional(features: Tensor, positions: Sequence[float]) -> Tensor:
    """Add each frame's positional map to its feature map (elementwise)."""
    n, c, h, w = features.shape
    if len(positions) != n:
        raise ValueError(
            f"got {len(positions)} position tokens for {n} frames")
    maps = pos_map_stack(positions, h, w, c, dtype=features.data.dtype)
    return engine.add(features, Tensor(maps))


@dataclass
class ShiftMatrix:
    """Per channel-pair 2x2 blocks mapping pos_map(p) onto pos_map(p+m)."""
    offset: float
    blocks: np.ndarray  # (d_model/2, 2, 2)

    def apply_to_vector(self, vec: np.ndarray) -> np.ndarray:
        pairs = vec.reshape(-1, 2)
        return np.einsum("kij,kj->ki", self.blocks, pairs).reshape(-1)

    def apply(self, pmap: np.ndarray) -> np.ndarray:
        """Apply the blocks along the channel axis of a (1, d, h, w) map."""
        n, d, h, w = pmap.shape
        pairs = pmap.reshape(n, d // 2, 2, h, w)
        out = np.einsum("kij,nkjhw->nkihw", self.blocks, pairs)
        return out.reshape(n, d, h, w)


def shift_matrix(m: float, d_model: int) -> ShiftMatrix:
    """Linear map taking every pos_map(p) to pos_map(p+m)."""
    w = _frequencies(d_model, np.float64)
    c, s = np.cos(w * m), np.sin(w * m)
    blocks = np.empty((d_model // 2, 2, 2), dtype=np.float64)
    blocks[:, 0, 0] = c
    blocks[:, 0, 1] = s
    blocks[:, 1, 0] = -s
    blocks[:, 1, 1] = c
    return ShiftMatrix(offset=float(m), blocks=blocks)
