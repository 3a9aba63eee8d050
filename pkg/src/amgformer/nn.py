"""Module tree with auto-registered parameters, buffers, and layers.

Assigning a Param or Module to an attribute registers it; iteration order
is attribute assignment order, which fixes the serialization layout.
Conv weights use He-normal init (std = sqrt(2 / fan_in)), biases start at
zero, and a conv directly followed by batch norm carries no bias.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .tape import Param, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, arr: np.ndarray):
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for n, p in self._params.items():
            yield (f"{prefix}.{n}" if prefix else n), p
        for n, child in self._children.items():
            yield from child.named_parameters(f"{prefix}.{n}" if prefix else n)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for n, b in self._buffers.items():
            yield (f"{prefix}.{n}" if prefix else n), b
        for n, child in self._children.items():
            yield from child.named_buffers(f"{prefix}.{n}" if prefix else n)

    def train(self, flag: bool = True):
        object.__setattr__(self, "training", flag)
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items: list = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)


def finalize_param_names(root: Module, prefix: str = ""):
    """Stamp each Param with its dotted path for diagnostics and checkpoints."""
    for name, p in root.named_parameters(prefix):
        p.name = name


def count_params(root: Module) -> int:
    return sum(p.size for p in root.parameters())


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    std = float(np.sqrt(2.0 / fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv1(Module):
    """Pointwise 3D convolution (pure channel mix)."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.w = Param(he_normal(rng, (cout, cin), cin, dtype))
        self.b = Param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1x1x1(x, self.w, self.b)


class Conv3(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.w = Param(he_normal(rng, (cout, cin, 3, 3, 3), cin * 27, dtype))
        self.b = Param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3x3x3(x, self.w, self.b)


class DWConv3(Module):
    def __init__(self, c: int, rng, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.w = Param(he_normal(rng, (c, 3, 3, 3), 27, dtype))
        self.b = Param(np.zeros(c, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.dwconv3x3x3(x, self.w, self.b)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.w = Param(he_normal(rng, (cout, cin), cin, dtype))
        self.b = Param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class BatchNorm(Module):
    def __init__(self, c: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, self.training, self.momentum, self.eps)


class ConvBnRelu(Module):
    """conv3x3x3 -> BN -> ReLU, the encoder/decoder workhorse block."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv3(cin, cout, rng, dtype, bias=False)
        self.bn = BatchNorm(cout, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


def state_entries(root: Module) -> list:
    """(name, kind, array) rows in deterministic order: params then buffers."""
    rows = [(name, "param", p.data) for name, p in root.named_parameters()]
    rows += [(name, "buffer", b) for name, b in root.named_buffers()]
    return rows


def load_state(root: Module, arrays: dict):
    """Copy a name->array mapping into the tree in place.

    Missing or extra names, or a shape mismatch, raise ShapeError; dtypes
    are cast to the destination's dtype.
    """
    params = dict(root.named_parameters())
    buffers = dict(root.named_buffers())
    expected = set(params) | set(buffers)
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ShapeError(f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
    for name, arr in arrays.items():
        dst = params[name].data if name in params else buffers[name]
        if dst.shape != arr.shape:
            raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {dst.shape}")
        dst[...] = arr
