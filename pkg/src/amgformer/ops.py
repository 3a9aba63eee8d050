"""Differentiable array ops over rank-5 volumes (B, C, D, H, W).

Forward math runs on plain numpy arrays; each op wraps the result in a
Tensor and registers a backward closure on the active tape.  Convolutions
rebuild their patch matrices inside backward instead of caching them, so
peak memory stays near the activation footprint.

Shape conventions:
    volumes      (B, C, D, H, W)
    conv3 weight (Cout, Cin, 3, 3, 3)
    conv1 weight (Cout, Cin)
    dwconv weight (C, 3, 3, 3)
    linear weight (Cout, Cin)
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateError, NumericError, ParameterError, ShapeError
from .tape import (Param, Tensor, accumulate, active_tape, monitoring_active,
                   record, report_kink_pattern)

_TAPS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def _r5(t: Tensor, name: str):
    if t.data.ndim != 5:
        raise ShapeError(f"{name} must be rank 5 (B, C, D, H, W), got shape {t.data.shape}")


def _any_grad(*ts) -> bool:
    return any(t is not None and t.requires_grad for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape the operand had before numpy
    broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g, b.data.shape))

    record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g, b.data.shape))

    record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    record(out, backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    record(out, backward)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s, x.requires_grad)

    def backward(g):
        accumulate(x, g * s)

    record(out, backward)
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x: Tensor) -> Tensor:
    if monitoring_active():
        report_kink_pattern(x.data > 0)
    out = Tensor(np.maximum(x.data, 0), x.requires_grad)

    def backward(g):
        accumulate(x, g * (x.data > 0))

    record(out, backward)
    return out


def _sigmoid_np(d: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    z = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid_np(x.data), x.requires_grad)

    def backward(g):
        s = out.data
        accumulate(x, g * s * (1.0 - s))

    record(out, backward)
    return out


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data), x.requires_grad)

    def backward(g):
        accumulate(x, g * out.data)

    record(out, backward)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-safe split form."""
    d = x.data
    out = Tensor(np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d))), x.requires_grad)

    def backward(g):
        accumulate(x, g * _sigmoid_np(d))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# softmax family (last axis)

def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis. -inf entries are treated as masked-out;
    a row that is entirely -inf raises DegenerateError."""
    d = x.data
    m = np.max(d, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateError("softmax encountered a fully masked (all -inf) row")
    e = np.exp(d - m)
    out = Tensor(e / e.sum(axis=-1, keepdims=True), x.requires_grad)

    def backward(g):
        s = out.data
        accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    record(out, backward)
    return out


def log_softmax_lastdim(x: Tensor) -> Tensor:
    d = x.data
    m = np.max(d, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateError("log-softmax encountered a fully masked (all -inf) row")
    lse = m + np.log(np.exp(d - m).sum(axis=-1, keepdims=True))
    out = Tensor(d - lse, x.requires_grad)

    def backward(g):
        s = np.exp(out.data)
        accumulate(x, g - s * g.sum(axis=-1, keepdims=True))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions / reshapes

def reduce_sum(x: Tensor, axes: Optional[tuple] = None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims), x.requires_grad)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        accumulate(x, np.broadcast_to(g, x.data.shape))

    record(out, backward)
    return out


def reduce_mean(x: Tensor, axes: Optional[tuple] = None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims), x.requires_grad)
    count = x.data.size // max(out.data.size, 1)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        accumulate(x, np.broadcast_to(g / count, x.data.shape))

    record(out, backward)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), x.requires_grad)

    def backward(g):
        accumulate(x, g.reshape(x.data.shape))

    record(out, backward)
    return out


def transpose(x: Tensor, axes: tuple) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), x.requires_grad)
    inv = tuple(np.argsort(axes))

    def backward(g):
        accumulate(x, g.transpose(inv))

    record(out, backward)
    return out


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in ts:
        _r5(t, "concat_channels input")
    out = Tensor(np.concatenate([t.data for t in ts], axis=1), _any_grad(*ts))
    sizes = [t.data.shape[1] for t in ts]

    def backward(g):
        off = 0
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                accumulate(t, g[:, off:off + s])
            off += s

    record(out, backward)
    return out


def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    _r5(x, "split_channels input")
    if sum(sizes) != x.data.shape[1]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover {x.data.shape[1]} channels")
    outs = []
    off = 0
    for s in sizes:
        piece = Tensor(np.ascontiguousarray(x.data[:, off:off + s]), x.requires_grad)

        def backward(g, off=off, s=s):
            buf = np.zeros_like(x.data)
            buf[:, off:off + s] = g
            accumulate(x, buf)

        record(piece, backward)
        outs.append(piece)
        off += s
    return outs


def select_scalar(x: Tensor, idx: tuple) -> Tensor:
    """Pull one element out of a tensor as a 0-d differentiable scalar."""
    out = Tensor(np.asarray(x.data[idx]), x.requires_grad)

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g
        accumulate(x, buf)

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# dense algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product. Leading (batch) dims must match exactly."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    record(out, backward)
    return out


def linear(x: Tensor, w: Param, b: Optional[Param] = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear expects (B, Cin) x (Cout, Cin), got {x.data.shape} and {w.data.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data
    out = Tensor(out_data, _any_grad(x, w, b))

    def backward(g):
        if x.requires_grad:
            accumulate(x, g @ w.data)
        if w.requires_grad:
            accumulate(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=0))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# convolutions

def _pad1(x: np.ndarray) -> np.ndarray:
    B, C, D, H, W = x.shape
    out = np.zeros((B, C, D + 2, H + 2, W + 2), dtype=x.dtype)
    out[:, :, 1:-1, 1:-1, 1:-1] = x
    return out


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B,C,D,H,W) -> (C*27, B*D*H*W) patch matrix of the 1-padded input.

    Column-major orientation lets each of the 27 taps fill its slice with
    near-contiguous slab copies; a transposed single gather is far slower.
    """
    B, C, D, H, W = x.shape
    xp = _pad1(x)
    buf = np.empty((C, 27, B, D, H, W), dtype=x.dtype)
    j = 0
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                slab = xp[:, :, dz:dz + D, dy:dy + H, dx:dx + W]
                buf[:, j] = slab.transpose(1, 0, 2, 3, 4)
                j += 1
    return buf.reshape(C * 27, B * D * H * W)


def _to_mat(g: np.ndarray) -> np.ndarray:
    """(B,O,D,H,W) -> (O, B*D*H*W)."""
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(g.shape[1], -1)


def _from_mat(m: np.ndarray, B: int, D: int, H: int, W: int) -> np.ndarray:
    o = m.shape[0]
    return np.ascontiguousarray(m.reshape(o, B, D, H, W).transpose(1, 0, 2, 3, 4))


def _corr3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1, pad-1 correlation of x with w as a single GEMM."""
    B, C, D, H, W = x.shape
    o = w.shape[0]
    out = w.reshape(o, -1) @ _im2col3(x)
    return _from_mat(out, B, D, H, W)


def conv1x1x1(x: Tensor, w: Param, b: Optional[Param] = None) -> Tensor:
    _r5(x, "conv1x1x1 input")
    B, C, D, H, W = x.data.shape
    if w.data.ndim != 2 or w.data.shape[1] != C:
        raise ShapeError(f"conv1x1x1 weight must be (Cout, {C}), got {w.data.shape}")
    o = w.data.shape[0]
    xm = x.data.reshape(B, C, -1)
    out_data = np.matmul(w.data, xm).reshape(B, o, D, H, W)
    if b is not None:
        out_data += b.data.reshape(1, o, 1, 1, 1)
    out = Tensor(out_data, _any_grad(x, w, b))

    def backward(g):
        gm = g.reshape(B, o, -1)
        if x.requires_grad:
            accumulate(x, np.matmul(w.data.T, gm).reshape(B, C, D, H, W))
        if w.requires_grad:
            accumulate(w, np.tensordot(gm, xm, axes=([0, 2], [0, 2])))
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3, 4)))

    record(out, backward)
    return out


def conv3x3x3(x: Tensor, w: Param, b: Optional[Param] = None) -> Tensor:
    _r5(x, "conv3x3x3 input")
    B, C, D, H, W = x.data.shape
    if w.data.shape[1:] != (C, 3, 3, 3):
        raise ShapeError(f"conv3x3x3 weight must be (Cout, {C}, 3, 3, 3), got {w.data.shape}")
    o = w.data.shape[0]
    taping = _any_grad(x, w, b) and active_tape() is not None
    cols = _im2col3(x.data)
    out_data = _from_mat(w.data.reshape(o, -1) @ cols, B, D, H, W)
    if b is not None:
        out_data += b.data.reshape(1, o, 1, 1, 1)
    out = Tensor(out_data, _any_grad(x, w, b))
    if not (taping and w.requires_grad):
        cols = None  # only the weight gradient reuses the patches

    def backward(g):
        if x.requires_grad:
            # correlation with the flipped, in/out-swapped kernel inverts the stencil
            wf = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            accumulate(x, _corr3(g, wf))
        if w.requires_grad:
            accumulate(w, (_to_mat(g) @ cols.T).reshape(o, C, 3, 3, 3))
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3, 4)))

    record(out, backward)
    return out


def dwconv3x3x3(x: Tensor, w: Param, b: Optional[Param] = None) -> Tensor:
    """Depthwise 3x3x3, computed as 27 shifted multiply-adds (no patch matrix)."""
    _r5(x, "dwconv3x3x3 input")
    B, C, D, H, W = x.data.shape
    if w.data.shape != (C, 3, 3, 3):
        raise ShapeError(f"dwconv3x3x3 weight must be ({C}, 3, 3, 3), got {w.data.shape}")
    xp = _pad1(x.data)
    out_data = np.zeros_like(x.data)
    for i, j, k in _TAPS:
        out_data += w.data[:, i, j, k].reshape(1, C, 1, 1, 1) * xp[:, :, i:i + D, j:j + H, k:k + W]
    if b is not None:
        out_data += b.data.reshape(1, C, 1, 1, 1)
    out = Tensor(out_data, _any_grad(x, w, b))

    def backward(g):
        if x.requires_grad:
            dxp = np.zeros((B, C, D + 2, H + 2, W + 2), dtype=g.dtype)
            for i, j, k in _TAPS:
                dxp[:, :, i:i + D, j:j + H, k:k + W] += w.data[:, i, j, k].reshape(1, C, 1, 1, 1) * g
            accumulate(x, dxp[:, :, 1:-1, 1:-1, 1:-1].copy())
        if w.requires_grad:
            xp2 = _pad1(x.data)
            dw = np.empty_like(w.data)
            for i, j, k in _TAPS:
                dw[:, i, j, k] = np.einsum(
                    "bcdhw,bcdhw->c", g, xp2[:, :, i:i + D, j:j + H, k:k + W], optimize=True)
            accumulate(w, dw)
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3, 4)))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization

def batch_norm(x: Tensor, gamma: Param, beta: Param,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (B, D, H, W).

    Training mode normalizes with the batch statistics (population variance)
    and updates the running buffers in place; eval mode reads the buffers.
    """
    _r5(x, "batch_norm input")
    C = x.data.shape[1]
    axes = (0, 2, 3, 4)
    if training:
        n = x.data.size // C
        if n < 2:
            raise DegenerateError("batch_norm needs at least 2 values per channel in training mode")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        n = 0
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    mean_b = mean.reshape(1, C, 1, 1, 1)
    inv_b = inv.reshape(1, C, 1, 1, 1)
    xhat = (x.data - mean_b) * inv_b
    out = Tensor(gamma.data.reshape(1, C, 1, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1, 1),
                 _any_grad(x, gamma, beta))

    def backward(g):
        # xhat is rebuilt from the saved per-channel stats rather than retained
        xh = (x.data - mean_b) * inv_b
        if gamma.requires_grad:
            accumulate(gamma, (g * xh).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gs = g * gamma.data.reshape(1, C, 1, 1, 1)
            if training:
                gsum = gs.sum(axis=axes, keepdims=True)
                gx = (gs * xh).sum(axis=axes, keepdims=True)
                accumulate(x, inv_b * (gs - gsum / n - xh * gx / n))
            else:
                accumulate(x, gs * inv_b)

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# resampling

def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, D, H, W) -> (B, C) spatial mean."""
    _r5(x, "global_avg_pool input")
    B, C, D, H, W = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3, 4)), x.requires_grad)

    def backward(g):
        accumulate(x, np.broadcast_to(g[:, :, None, None, None] / (D * H * W), x.data.shape))

    record(out, backward)
    return out


def avg_pool2(x: Tensor) -> Tensor:
    """2x2x2 mean pooling with stride 2; spatial dims must be even."""
    _r5(x, "avg_pool2 input")
    B, C, D, H, W = x.data.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {(D, H, W)}")
    r = x.data.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    out = Tensor(r.mean(axis=(3, 5, 7)), x.requires_grad)

    def backward(g):
        gg = np.broadcast_to((g / 8.0)[:, :, :, None, :, None, :, None],
                             (B, C, D // 2, 2, H // 2, 2, W // 2, 2))
        accumulate(x, gg.reshape(B, C, D, H, W))

    record(out, backward)
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of every spatial dim."""
    _r5(x, "upsample_nearest2 input")
    B, C, D, H, W = x.data.shape
    rep = np.broadcast_to(x.data[:, :, :, None, :, None, :, None],
                          (B, C, D, 2, H, 2, W, 2))
    out = Tensor(rep.reshape(B, C, 2 * D, 2 * H, 2 * W), x.requires_grad)

    def backward(g):
        accumulate(x, g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# sparse attention building blocks

def masked_fill_neg_inf(x: Tensor, keep: np.ndarray) -> Tensor:
    """Replace entries where keep is False with -inf (for masked softmax)."""
    if keep.shape != x.data.shape:
        raise ShapeError(f"mask shape {keep.shape} does not match scores {x.data.shape}")
    out = Tensor(np.where(keep, x.data, x.data.dtype.type(-np.inf)), x.requires_grad)

    def backward(g):
        accumulate(x, g * keep)

    record(out, backward)
    return out


def topk_row_masks(scores, ks: Sequence[int]) -> list:
    """Boolean keep-masks selecting the k largest entries of each last-axis row,
    for several k at once (one shared partition pass).

    Ties at the threshold value are broken toward the lower column index, so
    each row keeps exactly k entries and supports are nested across growing k.
    """
    a = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    m = a.shape[-1]
    for k in ks:
        if not isinstance(k, (int, np.integer)) or not 1 <= k <= m:
            raise ParameterError(f"top-k size must be an int in [1, {m}], got {k!r}")
    if not np.isfinite(a).all():
        raise NumericError("top-k scores must be finite")
    kth_idx = sorted({m - k for k in ks if k < m})
    part = np.partition(a, kth_idx, axis=-1) if kth_idx else None
    masks = []
    for k in ks:
        if k == m:
            mask = np.ones(a.shape, dtype=bool)
        else:
            thr = part[..., m - k:m - k + 1]
            gt = a > thr
            need = k - gt.sum(axis=-1, keepdims=True)
            eq = a == thr
            if np.array_equal(eq.sum(axis=-1, keepdims=True), need):
                # no row has duplicated threshold values; gt|eq already keeps
                # exactly k per row, so skip the tie-breaking scan
                mask = gt | eq
            else:
                mask = gt | (eq & (np.cumsum(eq, axis=-1) <= need))
        if monitoring_active():
            report_kink_pattern(mask)
        masks.append(mask)
    return masks


def topk_row_mask(scores, k: int) -> np.ndarray:
    """Single-k convenience wrapper around topk_row_masks."""
    return topk_row_masks(scores, [k])[0]


def weighted_sum(tensors: Sequence[Tensor], coeffs: Tensor) -> Tensor:
    """sum_i coeffs[i] * tensors[i] with a differentiable coefficient vector."""
    if coeffs.data.ndim != 1 or coeffs.data.shape[0] != len(tensors):
        raise ShapeError(f"need one coefficient per tensor, got {coeffs.data.shape} for {len(tensors)}")
    base = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != base:
            raise ShapeError("weighted_sum tensors must share one shape")
    out_data = coeffs.data[0] * tensors[0].data
    for i in range(1, len(tensors)):
        out_data = out_data + coeffs.data[i] * tensors[i].data
    out = Tensor(out_data, _any_grad(coeffs, *tensors))

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                accumulate(t, g * coeffs.data[i])
        if coeffs.requires_grad:
            dc = np.array([np.vdot(g, t.data) for t in tensors], dtype=coeffs.data.dtype)
            accumulate(coeffs, dc)

    record(out, backward)
    return out
