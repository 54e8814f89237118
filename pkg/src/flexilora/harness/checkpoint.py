"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"FLXL"                 magic
    u32   format version
    u64   header length in bytes
    ...   UTF-8 JSON header: {"tensors": [{name, shape, dtype, offset, nbytes}], "sha256": hex}
    ...   payload: each array's raw little-endian bytes, in header order

The hash covers the payload. Loading re-derives it and refuses on mismatch.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FLXL"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_KINDS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def _kind(arr: np.ndarray) -> str:
    kind = _KINDS.get(arr.dtype.newbyteorder("<"))
    if kind is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return kind


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        kind = _kind(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps(
        {"tensors": entries, "sha256": hashlib.sha256(payload).hexdigest()}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def decode(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated before the header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError(f"{source}: truncated inside the header")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from None
    payload = blob[start:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{source}: payload is {len(payload)} bytes, header promises {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{source}: payload hash mismatch (corrupt file)")
    out = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Write atomically: a crash leaves either the old file or the new one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), str(path))
