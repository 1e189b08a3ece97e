"""Binary container shared by recordings, datasets and checkpoints.

Layout: 8 magic bytes, little-endian uint64 header length, UTF-8 JSON header,
then a little-endian float64 payload. The header's ``arrays`` entry lists
``[name, shape]`` pairs in payload order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_LEN = struct.Struct("<Q")


class FormatError(ValueError):
    """File is not a well-formed container of the expected kind."""


def write_container(path: str | Path, magic: bytes, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    assert len(magic) == 8
    head = dict(header)
    head["arrays"] = [[name, list(np.shape(arr))] for name, arr in arrays.items()]
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path: str | Path, magic: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic bytes (expected {magic!r})")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(data, 8)
    end = 16 + hlen
    if len(data) < end:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    arrays: dict[str, np.ndarray] = {}
    offset = end
    for name, shape in header.pop("arrays", []):
        count = int(np.prod(shape, dtype=np.int64))
        stop = offset + 8 * count
        if stop > len(data):
            raise FormatError(f"{path}: truncated payload at array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = stop
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays
