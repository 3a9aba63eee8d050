"""Parallel top-k sparse self-attention at several fixed sparsity ratios,
combined by learnable scalars, with a gated channel-attention residual.

Tokens are voxels in (d, h, w) row-major order; channels split into heads
contiguously (channel = head * head_dim + e). All ratio branches share
one logits computation; each keeps its own top-k row mask. The branch
masks come from a single multi-threshold partition pass and are exactly
the masks topk_row_mask would produce per ratio.

The bottleneck arrangement runs one block per modality (separate
parameters), then one block across the channel-concatenated refined
features, projected back to C by a pointwise conv.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ParameterError, ShapeError
from .nn import Conv1, DWConv3, Linear, Module, ModuleList
from .tape import Param, Tensor

DEFAULT_RATIOS = (0.5, 0.65, 0.75, 0.8)


def validate_ratios(ratios: Sequence[float]):
    if not ratios:
        raise ConfigError("need at least one sparsity ratio")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"sparsity ratio must lie in (0, 1], got {r}")
    if list(ratios) != sorted(set(ratios)):
        raise ConfigError(f"ratios must be strictly ascending without duplicates: {ratios}")


def keep_count(ratio: float, n: int) -> int:
    return max(1, math.ceil(ratio * n))


def attention_branches(q: Tensor, k: Tensor, v: Tensor,
                       ratios: Sequence[float], tau: Tensor) -> list:
    """One output (B, heads, N, hd) per ratio, sharing the scaled logits."""
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.data.shape}, {k.data.shape}, {v.data.shape}")
    if q.data.ndim != 4:
        raise ShapeError(f"attention expects (B, heads, N, head_dim), got {q.data.shape}")
    heads, n = q.data.shape[1], q.data.shape[2]
    if tau.data.shape != (heads,):
        raise ShapeError(f"tau must have one entry per head, got {tau.data.shape}")
    if not (tau.data > 0).all():
        raise ParameterError(f"temperatures must be positive, got {tau.data}")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ParameterError(f"sparsity ratio must lie in (0, 1], got {r}")
    logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    inv_tau = ops.div(Tensor(np.ones(heads, dtype=tau.data.dtype)), tau)
    scaled = ops.mul(logits, ops.reshape(inv_tau, (1, heads, 1, 1)))
    masks = ops.topk_row_masks(scaled.data, [keep_count(r, n) for r in ratios])
    outs = []
    for mask in masks:
        attn = ops.softmax_lastdim(ops.masked_fill_neg_inf(scaled, mask))
        outs.append(ops.matmul(attn, v))
    return outs


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, ratio: float, tau: Tensor) -> Tensor:
    """Single-ratio top-k attention; the multi-ratio path is branch-exact
    with repeated calls to this."""
    return attention_branches(q, k, v, [ratio], tau)[0]


def aggregate(outputs: Sequence[Tensor], alpha: Tensor, spatial: tuple) -> Tensor:
    """Weighted sum of ratio branches, folded back to (B, C, D, H, W)."""
    ws = ops.weighted_sum(list(outputs), alpha)
    b, heads, n, hd = ws.data.shape
    d, h, w = spatial
    if d * h * w != n:
        raise ShapeError(f"spatial {spatial} does not match token count {n}")
    return ops.reshape(ops.transpose(ws, (0, 1, 3, 2)), (b, heads * hd, d, h, w))


class MgaoBlock(Module):
    def __init__(self, c: int, rng, dtype=np.float32, heads: int = 4,
                 ratios: Sequence[float] = DEFAULT_RATIOS, gate_reduction: int = 4):
        super().__init__()
        validate_ratios(ratios)
        if c % heads:
            raise ConfigError(f"channels {c} not divisible by {heads} heads")
        self.c = c
        self.heads = heads
        self.ratios = tuple(ratios)
        self.qkv = Conv1(c, 3 * c, rng, dtype)
        self.dw = DWConv3(3 * c, rng, dtype)
        self.out_conv = Conv1(c, c, rng, dtype)
        hidden = max(1, c // gate_reduction)
        self.gate_fc1 = Linear(c, hidden, rng, dtype)
        self.gate_fc2 = Linear(hidden, c, rng, dtype)
        # positivity by construction: tau = exp(log_tau), init tau = 1
        self.log_tau = Param(np.zeros(heads, dtype=dtype))
        self.alpha = Param(np.full(len(ratios), 1.0 / len(ratios), dtype=dtype))

    def tau(self) -> Tensor:
        return ops.exp(self.log_tau)

    def project_qkv(self, x: Tensor):
        """-> (Q, K, V), each (B, heads, N, C/heads)."""
        b, c, d, h, w = x.data.shape
        if c != self.c:
            raise ShapeError(f"block built for {self.c} channels, got {c}")
        f = self.dw(self.qkv(x))
        hd = c // self.heads
        n = d * h * w

        def tokens(t):
            return ops.transpose(ops.reshape(t, (b, self.heads, hd, n)), (0, 1, 3, 2))

        q, k, v = ops.split_channels(f, [c, c, c])
        return tokens(q), tokens(k), tokens(v)

    def gated_output(self, x_in: Tensor, attn_out: Tensor) -> Tensor:
        """x_in + sigmoid-gated pointwise projection of the attention path."""
        if x_in.data.shape != attn_out.data.shape:
            raise ShapeError(f"residual shapes differ: {x_in.data.shape} vs {attn_out.data.shape}")
        b, c = x_in.data.shape[:2]
        g = ops.sigmoid(self.gate_fc2(ops.relu(self.gate_fc1(ops.global_avg_pool(attn_out)))))
        gated = ops.mul(ops.reshape(g, (b, c, 1, 1, 1)), self.out_conv(attn_out))
        return ops.add(x_in, gated)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.project_qkv(x)
        branches = attention_branches(q, k, v, self.ratios, self.tau())
        agg = aggregate(branches, self.alpha, x.data.shape[2:])
        return self.gated_output(x, agg)


class MgaoBottleneck(Module):
    """Stage 1: per-modality refinement; stage 2: cross-modal block on the
    channel concat, reduced back to C."""

    def __init__(self, c: int, rng, dtype=np.float32, heads: int = 4,
                 ratios: Sequence[float] = DEFAULT_RATIOS, gate_reduction: int = 4):
        super().__init__()
        self.stage1 = ModuleList([MgaoBlock(c, rng, dtype, heads, ratios, gate_reduction)
                                  for _ in range(4)])
        self.stage2 = MgaoBlock(4 * c, rng, dtype, heads, ratios, gate_reduction)
        self.reduce = Conv1(4 * c, c, rng, dtype)

    def forward(self, feats: Sequence[Tensor]):
        """-> (4 refined tensors, fused tensor), all (B, C, D, H, W)."""
        if len(feats) != 4:
            raise ShapeError(f"bottleneck expects 4 modality tensors, got {len(feats)}")
        base = feats[0].data.shape
        for m, f in enumerate(feats):
            if f.data.shape != base:
                raise ShapeError(f"bottleneck modality {m} shape {f.data.shape} != {base}")
        refined = [self.stage1[m](feats[m]) for m in range(4)]
        fused = self.reduce(self.stage2(ops.concat_channels(refined)))
        return refined, fused
