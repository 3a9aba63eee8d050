"""Training losses.

The segmentation term is batch-aggregated soft Dice (one score per class
over the whole batch) plus voxel-mean cross entropy. Multi-scale terms
reuse it on nearest-downsampled labels with the weight halved per coarser
level. Auxiliary per-modality decoders, boundary maps, and presence logits
are supervised only for modalities present in the availability mask.

Boundary ground truth is the morphological gradient of the whole-tumor
mask under the 6-connected cross element; semantic ground truth is the
three per-volume region presence bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import ops
from .errors import ContractError, DataError, ParameterError, ShapeError
from .network import NetOutput
from .tape import Tensor

REGION_NAMES = ("WT", "TC", "ET")


@dataclass
class LossConfig:
    lambda_ms: float = 0.5     # weight of the first coarse scale, halved per level
    lambda_aux: float = 0.25   # per auxiliary decoder
    lambda_b: float = 0.1
    lambda_s: float = 0.1
    eps: float = 1.0

    def __post_init__(self):
        for name in ("lambda_ms", "lambda_aux", "lambda_b", "lambda_s", "eps"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")


def _check_labels(labels: np.ndarray, num_classes: int):
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integer, got {labels.dtype}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise DataError(
            f"labels outside [0, {num_classes}): min {labels.min()} max {labels.max()}")


def one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    """(B,D,H,W) -> (B,D,H,W,K)."""
    return np.eye(num_classes, dtype=dtype)[labels]


def dice_ce_loss(logits: Tensor, labels: np.ndarray, eps: float = 1.0) -> Tensor:
    if logits.ndim != 5:
        raise ShapeError(f"logits must be (B,K,D,H,W), got {logits.shape}")
    k = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    _check_labels(labels, k)
    dt = logits.data.dtype
    voxels = labels.size

    logp = ops.log_softmax_lastdim(ops.transpose(logits, (0, 2, 3, 4, 1)))
    probs = ops.exp(logp)
    onehot = Tensor(one_hot(labels, k, dt))

    ce = ops.scale(ops.reduce_sum(ops.mul(logp, onehot)), -1.0 / voxels)

    axes = (0, 1, 2, 3)
    inter = ops.reduce_sum(ops.mul(probs, onehot), axes=axes)
    psum = ops.reduce_sum(probs, axes=axes)
    gsum = Tensor(onehot.data.sum(axis=axes))
    eps_t = Tensor(np.asarray(eps, dtype=dt))
    dice = ops.div(ops.add(ops.scale(inter, 2.0), eps_t),
                   ops.add(ops.add(psum, gsum), eps_t))
    dice_loss = ops.scale(ops.reduce_sum(ops.sub(Tensor(np.ones(k, dtype=dt)), dice)),
                          1.0 / k)
    return ops.add(dice_loss, ce)


def boundary_target(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Morphological gradient of the WT mask -> (B,1,D,H,W) in {0,1}."""
    wt = labels >= 1
    cross = ndimage.generate_binary_structure(3, 1)
    out = np.zeros((labels.shape[0], 1) + labels.shape[1:], dtype=dtype)
    for b in range(labels.shape[0]):
        dil = ndimage.binary_dilation(wt[b], cross)
        ero = ndimage.binary_erosion(wt[b], cross)
        out[b, 0] = (dil ^ ero).astype(dtype)
    return out


def boundary_loss(boundary_logits: Tensor, labels: np.ndarray,
                  eps: float = 1.0) -> Tensor:
    target = boundary_target(labels, boundary_logits.data.dtype)
    if boundary_logits.shape != target.shape:
        raise ShapeError(
            f"boundary logits {boundary_logits.shape} vs target {target.shape}")
    p = ops.sigmoid(boundary_logits)
    t = Tensor(target)
    dt = boundary_logits.data.dtype
    eps_t = Tensor(np.asarray(eps, dtype=dt))
    inter = ops.reduce_sum(ops.mul(p, t))
    denom = ops.add(ops.add(ops.reduce_sum(p), Tensor(np.asarray(target.sum(), dtype=dt))),
                    eps_t)
    dice = ops.div(ops.add(ops.scale(inter, 2.0), eps_t), denom)
    return ops.sub(Tensor(np.asarray(1.0, dtype=dt)), dice)


def presence_bits(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B,3) region presence: WT, TC, ET."""
    axes = (1, 2, 3)
    return np.stack([(labels >= 1).any(axis=axes),
                     (labels >= 2).any(axis=axes),
                     (labels == 3).any(axis=axes)], axis=1).astype(dtype)


def semantic_loss(semantic_logits: Tensor, labels: np.ndarray) -> Tensor:
    target = presence_bits(labels, semantic_logits.data.dtype)
    if semantic_logits.shape != target.shape:
        raise ShapeError(
            f"semantic logits {semantic_logits.shape} vs target {target.shape}")
    # bce(x, t) = softplus(x) - t*x, elementwise stable form
    t = Tensor(target)
    per = ops.sub(ops.softplus(semantic_logits), ops.mul(t, semantic_logits))
    return ops.reduce_mean(per)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor by strided sampling (top-left anchor)."""
    return labels[:, ::factor, ::factor, ::factor]


def total_loss(out: NetOutput, labels: np.ndarray, mask,
               cfg: LossConfig) -> tuple:
    """-> (scalar loss Tensor, per-term float breakdown)."""
    present = [m for m in range(4) if mask[m]]
    if not present:
        raise ContractError("no modality present")

    terms = {}
    total = dice_ce_loss(out.scale_logits[0], labels, cfg.eps)
    terms["main"] = float(total.data)

    ms = None
    if cfg.lambda_ms > 0:
        lam = cfg.lambda_ms
        for s, logit in enumerate(out.scale_logits[1:], start=1):
            piece = ops.scale(dice_ce_loss(logit, downsample_labels(labels, 2 ** s),
                                           cfg.eps), lam)
            ms = piece if ms is None else ops.add(ms, piece)
            lam *= 0.5
    terms["ms"] = float(ms.data) if ms is not None else 0.0
    if ms is not None:
        total = ops.add(total, ms)

    aux = None
    if cfg.lambda_aux > 0:
        if out.aux_logits is None:
            raise ContractError("training loss needs auxiliary decoder outputs")
        for m in present:
            piece = ops.scale(dice_ce_loss(out.aux_logits[m], labels, cfg.eps),
                              cfg.lambda_aux)
            aux = piece if aux is None else ops.add(aux, piece)
    terms["aux"] = float(aux.data) if aux is not None else 0.0
    if aux is not None:
        total = ops.add(total, aux)

    bnd = None
    if cfg.lambda_b > 0 and out.boundary_logits is not None:
        for m in present:
            piece = boundary_loss(out.boundary_logits[m], labels, cfg.eps)
            bnd = piece if bnd is None else ops.add(bnd, piece)
        bnd = ops.scale(bnd, cfg.lambda_b / len(present))
    terms["boundary"] = float(bnd.data) if bnd is not None else 0.0
    if bnd is not None:
        total = ops.add(total, bnd)

    sem = None
    if cfg.lambda_s > 0 and out.semantic_logits is not None:
        for m in present:
            piece = semantic_loss(out.semantic_logits[m], labels)
            sem = piece if sem is None else ops.add(sem, piece)
        sem = ops.scale(sem, cfg.lambda_s / len(present))
    terms["semantic"] = float(sem.data) if sem is not None else 0.0
    if sem is not None:
        total = ops.add(total, sem)

    terms["total"] = float(total.data)
    return total, terms
