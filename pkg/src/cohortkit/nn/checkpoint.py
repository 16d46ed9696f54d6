"""Versioned checkpoint container.

Layout: 4 magic bytes "UTFM", format version (u32 LE), metadata length
(u32 LE), a UTF-8 JSON metadata block ({"hyper": ..., "tensors": {name:
{"shape": [...], "offset": n}}}), then raw little-endian float32 payloads.
Offsets are relative to the end of the metadata block. Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .tensor import Tensor

MAGIC = b"UTFM"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict, hyper: dict | None = None):
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        arrays[name] = np.asarray(arr).astype("<f4", copy=False)

    directory = {}
    offset = 0
    for name in sorted(arrays):
        directory[name] = {"shape": list(arrays[name].shape), "offset": offset}
        offset += arrays[name].nbytes
    meta = json.dumps({"hyper": hyper or {}, "tensors": directory},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    meta_len = struct.unpack("<I", blob[8:12])[0]
    meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    payload = blob[12 + meta_len:]

    tensors = {}
    for name, entry in meta["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(shape).copy()
    return meta["hyper"], tensors
