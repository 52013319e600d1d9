"""Versioned binary tensor archive shared by checkpoints and bundle files.

Layout::

    b"TPPARC01"                      8-byte magic
    uint64 little-endian             header length H
    H bytes of UTF-8 JSON            {"format_version", "kind", "meta", "tensors"}
    raw float64 little-endian data   row-major, concatenated in manifest order

Every tensor entry in the manifest records ``name``, ``shape``, ``dtype``,
``offset`` and ``nbytes``. Names are written in sorted order and the JSON is
serialized with sorted keys, so identical content always yields identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"TPPARC01"
FORMAT_VERSION = 1
_DTYPE = "<f8"


class ArchiveError(ValueError):
    """Raised for malformed or mismatched archive files."""


def _encode(kind: str, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype=_DTYPE, order="C")  # keeps 0-d shapes
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"tensor {name!r} contains non-finite values")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "tensors": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def save_archive(path, kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write an archive and return the SHA-256 hex digest of its bytes."""
    data = _encode(kind, dict(meta or {}), tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_archive(path, expect_kind: str | tuple[str, ...] | None = None):
    """Return ``(kind, meta, tensors)``; ``expect_kind`` guards against mixing files up."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    if len(data) < 16:
        raise ArchiveError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    kind = header["kind"]
    if expect_kind is not None:
        allowed = (expect_kind,) if isinstance(expect_kind, str) else tuple(expect_kind)
        if kind not in allowed:
            raise ArchiveError(f"{path}: archive holds {kind!r}, expected one of {allowed}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data) or e["dtype"] != _DTYPE:
            raise ArchiveError(f"{path}: tensor {e['name']!r} is truncated or has an unknown dtype")
        tensors[e["name"]] = np.frombuffer(data[lo:hi], dtype=_DTYPE).reshape(e["shape"]).copy()
    return kind, header["meta"], tensors


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
