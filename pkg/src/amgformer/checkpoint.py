"""Checkpoint files: one JSON manifest line, then raw little-endian state.

The manifest records a format version, the network config, the dtype, the
init seed, ordered parameter and buffer descriptors, and a free-form extra
dict (step counters and the like). The payload is every array's raw bytes
concatenated in manifest order. Loading reconstructs the network and fails
on any name, shape, or size disagreement.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .errors import DataError
from .network import AmgNet, NetConfig
from .nn import load_state, state_entries

VERSION = 1
_DTYPES = {"f32le": "<f4", "f64le": "<f8"}


def _dtype_tag(dtype) -> str:
    for tag, np_tag in _DTYPES.items():
        if np.dtype(np_tag) == np.dtype(dtype):
            return tag
    raise DataError(f"unsupported checkpoint dtype {dtype}")


def save_checkpoint(path, net: AmgNet, seed: int, extra: dict = None):
    rows = state_entries(net)
    manifest = {
        "version": VERSION,
        "config": asdict(net.cfg),
        "dtype": _dtype_tag(net.dtype),
        "seed": seed,
        "entries": [{"name": n, "kind": k, "shape": list(a.shape)}
                    for n, k, a in rows],
        "extra": extra or {},
    }
    tag = _DTYPES[manifest["dtype"]]
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for _, _, arr in rows:
            f.write(np.ascontiguousarray(arr, dtype=tag).tobytes())


def load_checkpoint(path) -> tuple:
    """-> (net, manifest dict)."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            manifest = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: unreadable manifest: {e}") from None
        payload = f.read()
    if manifest.get("version") != VERSION:
        raise DataError(f"{path}: unsupported version {manifest.get('version')!r}")
    if manifest.get("dtype") not in _DTYPES:
        raise DataError(f"{path}: unknown dtype {manifest.get('dtype')!r}")
    tag = _DTYPES[manifest["dtype"]]
    itemsize = np.dtype(tag).itemsize

    cfg_dict = dict(manifest["config"])
    cfg_dict["ratios"] = tuple(cfg_dict["ratios"])
    cfg = NetConfig(**cfg_dict)
    net = AmgNet(cfg, seed=manifest["seed"], dtype=np.dtype(tag).type)

    arrays = {}
    off = 0
    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * itemsize
        if off + nbytes > len(payload):
            raise DataError(f"{path}: payload truncated at {ent['name']}")
        arrays[ent["name"]] = np.frombuffer(
            payload, dtype=tag, count=count, offset=off).reshape(shape)
        off += nbytes
    if off != len(payload):
        raise DataError(f"{path}: {len(payload) - off} trailing payload bytes")
    load_state(net, arrays)
    return net, manifest
