"""Named-tensor binary container.

Layout::

    bytes 0..7    magic  b"GMSHTNSR"
    bytes 8..11   format version, uint32 little-endian
    bytes 12..15  descriptor length in bytes, uint32 little-endian
    descriptor    UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape", "offset"}]}
    payload       little-endian float64 arrays, row-major, at the given offsets

Integer data (faces, indices) is stored as float64; values are exact up to 2**53.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .mesh import atomic_write_bytes

MAGIC = b"GMSHTNSR"
VERSION = 1
_HEADER = struct.Struct("<8sII")


class ContainerError(InputError):
    pass


def dumps(tensors: dict, kind: str = "tensors", meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        if not np.all(np.isfinite(a)):
            raise ContainerError(f"tensor {name!r} holds non-finite values")
        entries.append({"name": str(name), "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes(order="C"))
        offset += a.nbytes
    desc = json.dumps(
        {"kind": kind, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(desc)) + desc + b"".join(blobs)


def loads(data: bytes, kind: str | None = None):
    """Parse a container; returns ``(tensors, meta)``."""
    if len(data) < _HEADER.size:
        raise ContainerError("file too short for container header")
    magic, version, dlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError("bad magic; not a tensor container")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = _HEADER.size + dlen
    try:
        desc = json.loads(data[_HEADER.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt descriptor: {exc}") from None
    if kind is not None and desc.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {desc.get('kind')!r}")
    tensors = {}
    payload = memoryview(data)[start:]
    for e in desc["tensors"]:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = int(e["offset"])
        if off + 8 * count > len(payload):
            raise ContainerError(f"tensor {e['name']!r} runs past end of file")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        tensors[e["name"]] = arr.astype(np.float64).reshape(shape)
    return tensors, desc.get("meta", {})


def save(path, tensors: dict, kind: str = "tensors", meta: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(tensors, kind, meta))


def load(path, kind: str | None = None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: {exc.strerror}") from None
    return loads(data, kind)
