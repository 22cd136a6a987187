"""Self-describing binary tensor container.

Byte layout (all integers little-endian)::

    0       8 bytes   magic, identifies the file kind (e.g. b"HPSLIDE1")
    8       u64       H, length of the JSON header in bytes
    16      H bytes   UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "rows",
                      "cols", "offset"}, ...]}, keys sorted, no whitespace
    16+H    ...       tensor payloads, float64 little-endian, row-major,
                      concatenated in header order; "offset" is relative to
                      the start of this section

A file is valid only if its size is exactly ``16 + H + 8 * sum(rows*cols)``.
Writing is deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

_PREAMBLE = struct.Struct("<8sQ")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed container file."""

    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: at byte {offset}: {msg}")
        self.path = str(path)
        self.offset = offset


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
        blob = np.ascontiguousarray(arr, dtype=_F64).tobytes()
        entries.append({"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = dumps_json({"meta": meta, "tensors": entries}).encode("utf-8")
    return _PREAMBLE.pack(magic, len(header)) + header + b"".join(blobs)


def write(path, magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, meta, tensors))


def decode(data: bytes, magic: bytes, path="<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREAMBLE.size:
        raise FormatError(path, len(data), "file shorter than the 16-byte preamble")
    got, hlen = _PREAMBLE.unpack_from(data, 0)
    if got != magic:
        raise FormatError(path, 0, f"bad magic {got!r}, expected {magic!r}")
    start = _PREAMBLE.size + hlen
    if len(data) < start:
        raise FormatError(path, len(data), f"header declares {hlen} bytes but file ends early")
    try:
        header = json.loads(data[_PREAMBLE.size:start].decode("utf-8"))
        entries = header["tensors"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(path, _PREAMBLE.size, f"unreadable header: {exc}") from None

    expected = start + 8 * sum(int(e["rows"]) * int(e["cols"]) for e in entries)
    if len(data) != expected:
        raise FormatError(path, min(len(data), expected),
                          f"size {len(data)} does not match header-declared size {expected}")
    tensors: dict[str, np.ndarray] = {}
    pos = 0
    for e in entries:
        rows, cols = int(e["rows"]), int(e["cols"])
        if int(e["offset"]) != pos:
            raise FormatError(path, start + pos, f"tensor {e['name']!r} offset {e['offset']} != {pos}")
        n = rows * cols
        arr = np.frombuffer(data, dtype=_F64, count=n, offset=start + pos)
        tensors[e["name"]] = arr.astype(np.float64).reshape(rows, cols)
        pos += 8 * n
    return meta, tensors


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic, path)
