"""Reverse-mode autodiff core: tensors, parameters, and the tape.

The tape records one entry per differentiable op (the output tensor and a
backward closure).  backward() seeds a scalar loss with gradient one and
replays the entries in reverse.  Ops only record when a tape is active and
the output requires grad, so inference runs tape-free at zero cost.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import ContractError

_TAPES: list["Tape"] = []
_MONITORS: list["KinkMonitor"] = []


class Tensor:
    """A numpy array plus grad bookkeeping.

    Intermediate tensors get a lazily-allocated .grad during backward;
    it is None for tensors a loss never reached.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Param(Tensor):
    """A trainable leaf. Grad is always allocated and accumulates across
    backward calls until zero_grad()."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def accumulate(t: Tensor, g: np.ndarray):
    """Add a gradient contribution to a tensor, allocating on first touch."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        # += would corrupt aliased views passed through by reshape-like ops,
        # so the first contribution is kept by reference and later ones copy.
        t.grad = t.grad + g


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self._entries.append((out, backward_fn))

    def backward(self, loss: Tensor):
        """Run reverse accumulation from a scalar loss.

        Parameters keep their accumulated .grad; intermediates touched by
        this pass hold transient grads that the next forward discards.
        """
        if loss.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any parameter recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._entries):
            if out.grad is None:
                continue
            fn(out.grad)


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def record(out: Tensor, backward_fn: Callable[[np.ndarray], None]):
    """Record an op result on the active tape, if tracking is on."""
    if _TAPES and out.requires_grad:
        _TAPES[-1].record(out, backward_fn)


class KinkMonitor:
    """Collects the sign/selection pattern of every piecewise op in a pass.

    The gradient checker compares patterns between the two points of a
    central difference; a mismatch means the perturbation stepped across a
    ReLU or top-k boundary and that coordinate must be resampled.
    """

    def __init__(self):
        self.patterns: list[np.ndarray] = []

    def __enter__(self) -> "KinkMonitor":
        _MONITORS.append(self)
        return self

    def __exit__(self, *exc):
        _MONITORS.pop()
        return False

    def report(self, bits: np.ndarray):
        self.patterns.append(bits)

    def matches(self, other: "KinkMonitor") -> bool:
        if len(self.patterns) != len(other.patterns):
            return False
        for a, b in zip(self.patterns, other.patterns):
            if a.shape != b.shape or not np.array_equal(a, b):
                return False
        return True


def report_kink_pattern(bits: np.ndarray):
    if _MONITORS:
        _MONITORS[-1].report(bits)


def monitoring_active() -> bool:
    return bool(_MONITORS)
