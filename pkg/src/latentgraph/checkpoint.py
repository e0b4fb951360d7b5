"""Checkpoint container: named arrays plus JSON metadata in one binary file.

Layout (all integers little-endian)::

    b"LGCKPT\\x00\\x01"            8-byte magic
    u32 format version
    u32 header length, then the header as UTF-8 JSON (sorted keys)
    raw array bytes, concatenated in header order

The header lists, per parameter path, its shape, dtype tag and byte offset into
the payload.  Arrays are stored little-endian so files are portable, and the
writer is deterministic: the same arrays and metadata give the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LGCKPT\x00\x01"
FORMAT_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i4": np.dtype("<i4"),
           "i8": np.dtype("<i8"), "u1": np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _tag(dtype: np.dtype) -> str:
    for tag, dt in _DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt or np.dtype(dtype) == dt:
            return tag
    raise CheckpointError(f"unsupported dtype {dtype}")


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for path in sorted(arrays):
        arr = np.asarray(arrays[path])
        tag = _tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"path": path, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "metadata": dict(metadata or {})},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header] + chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    payload = memoryview(blob)[start + hlen:]
    arrays = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload for {e['path']!r}")
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dt).reshape(e["shape"])
        arrays[e["path"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return arrays, header["metadata"]


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None,
         namespace: str | None = None) -> None:
    """Write ``arrays`` (optionally prefixed ``namespace/``) atomically."""
    if namespace:
        arrays = {f"{namespace}/{k}": v for k, v in arrays.items()}
        metadata = {**(metadata or {}), "namespace": namespace}
    atomic_write_bytes(path, dumps(arrays, metadata))


def load(path: str | os.PathLike, namespace: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; with ``namespace`` only that prefix is returned (prefix stripped)."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    arrays, meta = loads(blob)
    if namespace is not None:
        if meta.get("namespace") != namespace:
            raise CheckpointError(f"{path}: expected namespace {namespace!r}, found {meta.get('namespace')!r}")
        prefix = namespace + "/"
        arrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return arrays, meta
