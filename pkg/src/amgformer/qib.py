"""Spatially adaptive four-modality fusion at one decoder scale.

Each modality is aligned by its own pointwise conv + BN + ReLU; the four
aligned maps are concatenated and integrated down to C channels; a
pointwise head turns the integrated map into four non-negative spatial
weight maps (ReLU + BN, deliberately not softmax, so a modality can be
suppressed to zero everywhere); fusion is the voxelwise weighted sum.

Modality channel order everywhere: (FLAIR, T1CE, T1, T2).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ShapeError
from .nn import BatchNorm, Conv1, Conv3, Module, ModuleList
from .tape import Tensor

MODALITIES = ("FLAIR", "T1CE", "T1", "T2")


def _check_four(xs: Sequence[Tensor], what: str):
    if len(xs) != 4:
        raise ShapeError(f"{what} expects 4 modality tensors, got {len(xs)}")
    base = xs[0].data.shape
    for m, x in enumerate(xs):
        if x.data.ndim != 5:
            raise ShapeError(f"{what}: modality {m} is rank {x.data.ndim}, want 5")
        if x.data.shape != base:
            raise ShapeError(f"{what}: modality {m} shape {x.data.shape} != {base}")


def fuse(aligned: Sequence[Tensor], w: Tensor) -> Tensor:
    """sum_m w[:, m] * aligned[m], weight channel broadcast over features."""
    _check_four(aligned, "fuse")
    b, c, d, h, wd = aligned[0].data.shape
    if w.data.shape != (b, 4, d, h, wd):
        raise ShapeError(f"fusion weights must be {(b, 4, d, h, wd)}, got {w.data.shape}")
    wm = ops.split_channels(w, [1, 1, 1, 1])
    out = ops.mul(aligned[0], wm[0])
    for m in range(1, 4):
        out = ops.add(out, ops.mul(aligned[m], wm[m]))
    return out


class QibScale(Module):
    """Fusion block for one decoder scale with C-channel features."""

    def __init__(self, c: int, rng, dtype=np.float32, hard_mask: bool = False):
        super().__init__()
        self.c = c
        self.hard_mask = hard_mask
        self.align_convs = ModuleList([Conv1(c, c, rng, dtype, bias=False) for _ in range(4)])
        self.align_bns = ModuleList([BatchNorm(c, dtype) for _ in range(4)])
        self.sim_conv = Conv3(4 * c, c, rng, dtype, bias=False)
        self.sim_bn = BatchNorm(c, dtype)
        self.safc_conv = Conv1(c, 4, rng, dtype, bias=False)
        self.safc_bn = BatchNorm(4, dtype)

    def align(self, xs: Sequence[Tensor]) -> list:
        _check_four(xs, "align")
        return [ops.relu(self.align_bns[m](self.align_convs[m](x)))
                for m, x in enumerate(xs)]

    def sim_integrate(self, aligned: Sequence[Tensor]) -> Tensor:
        _check_four(aligned, "sim_integrate")
        return ops.relu(self.sim_bn(self.sim_conv(ops.concat_channels(list(aligned)))))

    def safc_weights(self, sim_out: Tensor) -> Tensor:
        if sim_out.data.shape[1] != self.c:
            raise ShapeError(f"safc_weights expects {self.c} channels, got {sim_out.data.shape[1]}")
        return ops.relu(self.safc_bn(self.safc_conv(sim_out)))

    def forward(self, xs: Sequence[Tensor], mask: Optional[Sequence[bool]] = None):
        """-> (fused (B,C,D,H,W), weights (B,4,D,H,W))."""
        aligned = self.align(xs)
        w = self.safc_weights(self.sim_integrate(aligned))
        if self.hard_mask and mask is not None:
            keep = np.asarray(mask, dtype=w.data.dtype).reshape(1, 4, 1, 1, 1)
            w = ops.mul(w, Tensor(keep))
        return fuse(aligned, w), w
