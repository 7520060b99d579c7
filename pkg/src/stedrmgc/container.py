"""Versioned binary container for named float64 arrays plus JSON metadata.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"STEDRMGC"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted, no whitespace:
                         {"arrays": [{"name", "shape", "offset", "nbytes"}, ...],
                          "kind": str, "meta": {...}}
    offset 20+H          payload: each array as row-major little-endian
                         float64, concatenated in header order; "offset" is
                         relative to the start of the payload

The encoding is deterministic, so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"STEDRMGC"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def encode(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes(order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "meta": dict(meta or {}), "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes, expect_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise DataError("container truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError("not a stedrmgc container (bad magic)")
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise DataError(f"expected a {expect_kind!r} container, found {header['kind']!r}")
    payload = memoryview(blob)[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise DataError(f"container truncated inside array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        # mkstemp creates 0600; give the result ordinary umask-governed permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    atomic_write(path, encode(kind, arrays, meta))


def load(path, expect_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode(blob, expect_kind)
