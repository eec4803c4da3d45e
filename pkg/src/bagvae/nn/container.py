"""Binary tensor container shared by checkpoints, embeddings and encoded caches.

Layout::

    b"BVAE1\\n"
    <8-byte little-endian unsigned length of the index>
    <index: UTF-8 JSON>
    <payload>

The index holds ``{"meta": {...}, "tensors": [{"name", "shape", "dtype",
"offset"}, ...]}``; offsets are relative to the start of the payload.
Floating tensors are written as little-endian float32 and upcast to float64
on load; integer tensors (``dtype == "i4"``) stay little-endian int32.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BVAE1\n"


class ContainerError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            if arr.size and (arr.max() > np.iinfo(np.int32).max or arr.min() < np.iinfo(np.int32).min):
                raise ContainerError(f"{name}: integer values exceed int32")
            blob = arr.astype("<i4").tobytes()
            dtype = "i4"
        else:
            blob = arr.astype("<f4").tobytes()
            dtype = "f4"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    index = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(index)))
        fh.write(index)
        for blob in blobs:
            fh.write(blob)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ContainerError(f"{path}: not a BVAE1 container")
    pos = len(MAGIC)
    (length,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        index = json.loads(raw[pos:pos + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt index") from exc
    payload = memoryview(raw)[pos + length:]
    tensors = {}
    for entry in index["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["dtype"] == "i4":
            arr = np.frombuffer(payload, dtype="<i4", count=count, offset=entry["offset"]).astype(np.int64)
        elif entry["dtype"] == "f4":
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"]).astype(np.float64)
        else:
            raise ContainerError(f"unsupported dtype {entry['dtype']!r}")
        tensors[entry["name"]] = arr.reshape(shape)
    return tensors, index.get("meta", {})
