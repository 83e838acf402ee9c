"""Versioned binary container for named arrays plus a JSON header.

Layout::

    magic      8 bytes  b"H3DCKPT\\0"
    version    uint32 little-endian
    header_len uint64 little-endian
    header     UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload    raw little-endian array bytes, concatenated
    crc32      uint32 over header + payload

Round trips are bit-exact: arrays are stored in their own dtype and ``meta``
is stored as JSON (ints stay exact, floats use repr precision).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["MAGIC", "VERSION", "CheckpointError", "CheckpointVersionError", "CheckpointCorruptError", "write_container", "read_container"]

MAGIC = b"H3DCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_ALLOWED_DTYPES = ("<f4", "<f8", "<i8", "<u4", "<u8")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """Unknown magic or unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Truncated file, checksum mismatch or malformed header."""


def write_container(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        if a.dtype.str not in _ALLOWED_DTYPES:
            raise TypeError(f"{name}: unsupported dtype {a.dtype}")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    payload = b"".join(chunks)
    crc = zlib.crc32(payload, zlib.crc32(header))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointVersionError(f"{path}: not a checkpoint (file too short)")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    start = _PREFIX.size
    end = start + header_len
    if end + 4 > len(blob):
        raise CheckpointCorruptError(f"{path}: truncated checkpoint")
    header = blob[start:end]
    payload = blob[end:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload, zlib.crc32(header)) != crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch, payload is corrupt")
    try:
        doc = json.loads(header)
        arrays = {}
        for e in doc["tensors"]:
            if e["dtype"] not in _ALLOWED_DTYPES or e["offset"] + e["nbytes"] > len(payload):
                raise ValueError(f"bad entry {e['name']}")
            a = np.frombuffer(payload, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
            arrays[e["name"]] = a.reshape(e["shape"]).copy()
        return arrays, doc["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed checkpoint header ({exc})") from exc
