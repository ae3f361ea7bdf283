"""Versioned binary container shared by every on-disk artifact.

Layout (all integers little-endian)::

    magic       8 bytes   e.g. b"ISSL-SCN"
    version     uint32
    header_len  uint32
    header      header_len bytes of UTF-8 JSON (sorted keys, no whitespace)
    payload     raw array bytes, concatenated in header["arrays"] order

Each ``header["arrays"]`` entry is ``{"name", "dtype", "shape"}``; dtypes are
stored as little-endian numpy dtype strings. Writing is deterministic, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1

MAGIC_SCENARIO = b"ISSL-SCN"
MAGIC_PROTOTYPES = b"ISSL-PRO"
MAGIC_FISHER = b"ISSL-FSH"
MAGIC_CHECKPOINT = b"ISSL-CKP"


class FormatError(ValueError):
    """Raised when a file does not match the expected container layout."""


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    full = dict(header)
    full["arrays"] = entries
    head = dump_json(full).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, head_len = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16 : 16 + head_len].decode("utf-8"))
    offset = 16 + head_len
    arrays = {}
    for entry in header.pop("arrays"):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                              offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays
