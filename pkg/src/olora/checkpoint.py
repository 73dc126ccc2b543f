"""Binary checkpoint container shared by the model, streams and harness.

Layout: magic bytes ``OLRA``, version u32 little-endian, header length u64
little-endian, UTF-8 JSON header mapping tensor name to
``{"shape": [...], "dtype": "f32", "byte_offset": n}``, then the raw
little-endian float32 payloads. Offsets are relative to the end of the
header. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"OLRA"
VERSION = 1


def save(path, tensors: dict) -> None:
    """Write named float32 arrays; names are sorted for deterministic bytes."""
    entries = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {
            "shape": [int(s) for s in arr.shape],
            "dtype": "f32",
            "byte_offset": offset,
        }
        raw = arr.tobytes()
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load(path) -> dict:
    """Read a checkpoint back into a name -> float32 ndarray mapping."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_start = 16
    payload_start = header_start + header_len
    entries = json.loads(blob[header_start:payload_start].decode("utf-8"))
    out = {}
    for name, meta in entries.items():
        if meta["dtype"] != "f32":
            raise DataError(f"{path}: tensor {name!r} has unsupported dtype {meta['dtype']!r}")
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + meta["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        out[name] = arr.reshape(shape).copy()
    return out
