"""Single-file binary container: JSON header followed by float64 blocks.

Byte layout (all integers little-endian)::

    0        4 bytes   magic (b"MSTW" for weights, b"MSTD" for datasets)
    4        uint32    format version
    8        uint64    header length H in bytes
    16       H bytes   UTF-8 JSON header
    16+H     0-7 bytes zero padding up to the next multiple of 8 (= data start D)
    D        ...       raw little-endian float64 blocks, C order

The header always holds ``"blocks"``: a list of ``{"name", "shape", "offset",
"nbytes"}`` with ``offset`` relative to D, and ``"data_bytes"``, the total
length of the data section. Everything else in the header is caller-owned.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

_PREFIX = struct.Struct("<4sIQ")
_LE_F64 = np.dtype("<f8")


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class CorruptHeaderError(ContainerError):
    """Magic, header JSON or total length is wrong (includes truncation)."""


class VersionMismatchError(ContainerError):
    """File was written with a different format version."""


class ShapeMismatchError(ContainerError):
    """A block's declared shape disagrees with its byte size or with its peers."""


def _align8(n: int) -> int:
    return (n + 7) // 8 * 8


def write_container(path, magic: bytes, version: int, header: dict,
                    blocks: List[Tuple[str, np.ndarray]]) -> None:
    entries, offset = [], 0
    arrays = []
    for name, arr in blocks:
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset,
                        "nbytes": a.nbytes})
        arrays.append(a)
        offset += _align8(a.nbytes)
    full = dict(header)
    full["blocks"] = entries
    full["data_bytes"] = offset
    raw = json.dumps(full, sort_keys=True).encode("utf-8")
    start = _align8(_PREFIX.size + len(raw))
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(raw)))
        fh.write(raw)
        fh.write(b"\0" * (start - _PREFIX.size - len(raw)))
        for a in arrays:
            fh.write(a.tobytes())
            fh.write(b"\0" * (_align8(a.nbytes) - a.nbytes))


def read_container(path, magic: bytes, version: int) -> Tuple[dict, Dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise CorruptHeaderError(f"{path}: file too short for a header ({len(buf)} bytes)")
    got_magic, got_version, hlen = _PREFIX.unpack_from(buf)
    if got_magic != magic:
        raise CorruptHeaderError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionMismatchError(f"{path}: format version {got_version}, reader supports {version}")
    if _PREFIX.size + hlen > len(buf):
        raise CorruptHeaderError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
        entries = header["blocks"]
        data_bytes = int(header["data_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from None
    start = _align8(_PREFIX.size + hlen)
    if len(buf) != start + data_bytes:
        raise CorruptHeaderError(
            f"{path}: expected {start + data_bytes} bytes, found {len(buf)} (truncated or padded)")
    arrays = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count * 8 != e["nbytes"]:
            raise ShapeMismatchError(f"{path}: block {e['name']!r} shape {shape} "
                                     f"does not match {e['nbytes']} bytes")
        lo = start + int(e["offset"])
        if lo + e["nbytes"] > len(buf):
            raise CorruptHeaderError(f"{path}: block {e['name']!r} runs past end of file")
        arr = np.frombuffer(buf, dtype=_LE_F64, count=count, offset=lo).reshape(shape)
        arrays[e["name"]] = arr.astype(np.float64)
    return header, arrays
