"""Multi-head convolutional attention over frame feature maps.

Each head derives a query map per frame through one 3x3 conv and a paired
key/value map through another (key and value are the two channel halves of
a single conv output). The compatibility score of query i against key j is
a single-channel map produced by a small conv applied to their channelwise
concatenation; scores are softmaxed across keys per pixel and used to blend
the value maps. Head outputs concatenate channelwise; there is no output
projection and no 1/sqrt(d) logit scaling.

Works in three placements: encoder self-attention, decoder query
self-attention, and decoder cross-attention against encoded memory.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import engine
from .engine import ConvParams, Tensor


@dataclass
class HeadParams:
    """One attention head: query conv (d_model -> d_head), key/value conv
    (d_model -> 2*d_head) and the compatibility conv (2*d_head -> 1)."""
    q_net: ConvParams
    kv_net: ConvParams
    att_net: ConvParams

    def __post_init__(self):
        d_head = self.q_net.out_c
        if self.kv_net.out_c != 2 * d_head:
            raise ValueError(
                f"kv_net must output 2*d_head={2 * d_head} channels, "
                f"got {self.kv_net.out_c}")
        if self.att_net.in_c != 2 * d_head or self.att_net.out_c != 1:
            raise ValueError(
                f"att_net must map 2*d_head={2 * d_head} channels to 1, "
                f"got {self.att_net.in_c}->{self.att_net.out_c}")

    @property
    def d_head(self) -> int:
        return self.q_net.out_c


@dataclass
class AttentionMaps:
    """Per-head attention weights: values[(i, j)] is the h x w map of query
    i against key j. When normalized, weights sum to 1 across keys at every
    pixel and lie in [0, 1]."""
    values: np.ndarray  # (queries, keys, h, w)
    normalized: bool = True


def attention_logits(query_map: Tensor, key_map: Tensor,
                     att_params: ConvParams) -> Tensor:
    """Raw compatibility map of one query/key pair, shape (1, 1, h, w)."""
    if query_map.shape != key_map.shape:
        raise ValueError(
            f"query/key shape mismatch: {query_map.shape} vs {key_map.shape}")
    pair = engine.concat([query_map, key_map], axis=1)
    return engine.conv2d(pair, att_params)


def _head_forward(queries_src: Tensor, memory_src: Tensor, head: HeadParams,
                  key_mask: Optional[np.ndarray], collect: bool):
    q_count = queries_src.shape[0]
    n = memory_src.shape[0]
    d_head = head.d_head
    q_maps = engine.conv2d(queries_src, head.q_net)
    kv = engine.conv2d(memory_src, head.kv_net)
    k_maps = engine.narrow(kv, 1, 0, d_head)
    v_maps = engine.narrow(kv, 1, d_head, d_head)

    # one batched compatibility conv over all (query, key) pairs
    pairs = []
    for i in range(q_count):
        qi = engine.narrow(q_maps, 0, i, 1)
        for j in range(n):
            pairs.append(engine.concat([qi, engine.narrow(k_maps, 0, j, 1)], axis=1))
    logits_all = engine.conv2d(engine.concat(pairs, axis=0), head.att_net)

    outs = []
    maps = np.empty((q_count, n) + queries_src.shape[2:],
                    dtype=queries_src.data.dtype) if collect else None
    for i in range(q_count):
        logits = engine.narrow(logits_all, 0, i * n, n)
        if key_mask is not None:
            add = np.where(key_mask, -np.inf, 0.0).reshape(n, 1, 1, 1)
            logits = engine.add_array(logits, add)
        att = engine.softmax_along(logits, axis=0)  # (n, 1, h, w)
        outs.append(engine.frame_sum(engine.mul(att, v_maps)))
        if collect:
            maps[i] = att.data[:, 0]
    out = engine.concat(outs, axis=0) if len(outs) > 1 else outs[0]
    return out, (AttentionMaps(values=maps) if collect else None)


def _multi_head(queries_src: Tensor, memory_src: Tensor,
                heads: Sequence[HeadParams], key_mask=None,
                collect: bool = False, parallel: bool = False):
    if queries_src.shape[1:] != memory_src.shape[1:]:
        raise ValueError(
            f"query/memory feature shape mismatch: {queries_src.shape} vs "
            f"{memory_src.shape}")
    d_model = queries_src.shape[1]
    if d_model % len(heads) != 0:
        raise ValueError(f"d_model {d_model} not divisible by {len(heads)} heads")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (memory_src.shape[0],):
            raise ValueError(
                f"key_mask must have one entry per memory frame, got "
                f"{key_mask.shape} for {memory_src.shape[0]} frames")
        if key_mask.all():
            raise ValueError("key_mask cannot hide every memory frame")

    if parallel and len(heads) > 1:
        with ThreadPoolExecutor(max_workers=len(heads)) as pool:
            results = list(pool.map(
                lambda h: _head_forward(queries_src, memory_src, h, key_mask, collect),
                heads))
    else:
        results = [_head_forward(queries_src, memory_src, h, key_mask, collect)
                   for h in heads]
    out = engine.concat([r[0] for r in results], axis=1) if len(results) > 1 \
        else results[0][0]
    maps = [r[1] for r in results] if collect else None
    return out, maps


def conv_self_attention(inputs: Tensor, heads: Sequence[HeadParams],
                        collect_maps: bool = False, parallel: bool = False):
    """Self-attention across the frames of `inputs`. Returns the attended
    tensor and, when requested, one AttentionMaps per head."""
    return _multi_head(inputs, inputs, heads, None, collect_maps, parallel)


def cross_attention(queries: Tensor, memory: Tensor,
                    heads: Sequence[HeadParams], key_mask=None,
                    collect_maps: bool = False, parallel: bool = False):
    """Attention of decoder-stream queries against encoded memory frames.
    `key_mask` marks memory frames to exclude (forced zero weight)."""
    return _multi_head(queries, memory, heads, key_mask, collect_maps, parallel)
