"""Quality-scored cross-modal feature compensation with auxiliary heads.

Each modality gets a global quality score q_m = sigmoid(FC(GAP(x_m))).
Enhancement adds, to each modality, the quality- and alpha-weighted
pointwise projections of the other three:

    out_m = x_m + sum_{n != m} alpha_mn * q_n * conv1x1x1_mn(x_n)

The 12 alpha scalars start at zero, so a fresh module is exactly the
identity map. With mask_quality on, an absent modality's score is pinned
to exactly 0, so it injects nothing anywhere.

Shared-per-scale auxiliary heads produce tumor-boundary logits (pointwise
conv to 1 channel) and per-region presence logits (GAP -> FC to 3).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ops
from .errors import ShapeError
from .nn import Conv1, Linear, Module, ModuleList
from .tape import Param, Tensor

# ordered (target m, source n) pairs; row-major, diagonal skipped
PAIRS = tuple((m, n) for m in range(4) for n in range(4) if m != n)


class MqaeScale(Module):
    def __init__(self, c: int, rng, dtype=np.float32, mask_quality: bool = True):
        super().__init__()
        self.c = c
        self.mask_quality = mask_quality
        self.quality_fcs = ModuleList([Linear(c, 1, rng, dtype) for _ in range(4)])
        self.transfers = ModuleList([Conv1(c, c, rng, dtype) for _ in PAIRS])
        self.alpha = Param(np.zeros(len(PAIRS), dtype=dtype))
        self.boundary_head = Conv1(c, 1, rng, dtype)
        self.semantic_fc = Linear(c, 3, rng, dtype)

    def quality_score(self, x: Tensor, m: int, present: bool) -> Tensor:
        """-> (B,) score in (0,1); exactly 0 for a masked-absent modality."""
        b = x.data.shape[0]
        if self.mask_quality and not present:
            return Tensor(np.zeros(b, dtype=x.data.dtype))
        q = ops.sigmoid(self.quality_fcs[m](ops.global_avg_pool(x)))
        return ops.reshape(q, (b,))

    def enhance(self, xs: Sequence[Tensor], qs: Sequence[Tensor]) -> list:
        if len(xs) != 4 or len(qs) != 4:
            raise ShapeError(f"enhance expects 4 feature and 4 quality tensors, got {len(xs)}/{len(qs)}")
        base = xs[0].data.shape
        for m, x in enumerate(xs):
            if x.data.shape != base:
                raise ShapeError(f"enhance: modality {m} shape {x.data.shape} != {base}")
        b = base[0]
        q5 = [ops.reshape(q, (b, 1, 1, 1, 1)) for q in qs]
        outs = []
        for m in range(4):
            acc = xs[m]
            for j, (tgt, src) in enumerate(PAIRS):
                if tgt != m:
                    continue
                term = ops.mul(self.transfers[j](xs[src]), q5[src])
                term = ops.mul(term, ops.select_scalar(self.alpha, (j,)))
                acc = ops.add(acc, term)
            outs.append(acc)
        return outs

    def aux_heads(self, x: Tensor):
        """-> (boundary logits (B,1,D,H,W), presence logits (B,3))."""
        return self.boundary_head(x), self.semantic_fc(ops.global_avg_pool(x))

    def forward(self, xs: Sequence[Tensor], mask: Sequence[bool]):
        """-> (4 enhanced tensors, 4 per-batch quality score tensors)."""
        qs = [self.quality_score(xs[m], m, bool(mask[m])) for m in range(4)]
        return self.enhance(xs, qs), qs
