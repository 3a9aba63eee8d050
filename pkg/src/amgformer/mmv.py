"""Multi-modal volume files.

Layout: one UTF-8 JSON header line (magic "MMV1", shape, dtype, modality
names, availability mask, label presence), a newline, then the raw payload:
four little-endian float32 volumes in header order, then uint8 labels when
present. Round-trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError
from .phantoms import MODALITIES, ModalityBundle

MAGIC = "MMV1"


def write_mmv(path, bundle: ModalityBundle):
    bundle.validate()
    b, _, d, h, w = bundle.volumes[0].shape
    header = {
        "magic": MAGIC,
        "shape": [b, d, h, w],
        "dtype": "f32le",
        "modalities": list(MODALITIES),
        "mask": [bool(x) for x in bundle.mask],
        "has_labels": True,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for v in bundle.volumes:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bundle.labels, dtype=np.uint8).tobytes())


def read_mmv(path) -> ModalityBundle:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: unreadable header: {e}") from None
        if header.get("magic") != MAGIC:
            raise DataError(f"{path}: bad magic {header.get('magic')!r}")
        if header.get("dtype") != "f32le":
            raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        if header.get("modalities") != list(MODALITIES):
            raise DataError(f"{path}: unexpected modality list")
        b, d, h, w = header["shape"]
        count = b * d * h * w
        payload = f.read()
    need = 4 * count * 4 + (count if header["has_labels"] else 0)
    if len(payload) != need:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    volumes = []
    off = 0
    for _ in range(4):
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        volumes.append(arr.reshape(b, 1, d, h, w).copy())
        off += count * 4
    if header["has_labels"]:
        labels = np.frombuffer(payload, dtype=np.uint8, count=count,
                               offset=off).reshape(b, d, h, w).copy()
    else:
        labels = np.zeros((b, d, h, w), dtype=np.uint8)
    bundle = ModalityBundle(volumes, np.asarray(header["mask"], dtype=bool),
                            labels)
    bundle.validate()
    return bundle
