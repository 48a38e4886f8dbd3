"""Versioned binary container for named float64 arrays plus a JSON header.

Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header,
then the concatenated little-endian array payloads. Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"SWINBLOB"
VERSION = 1

_DTYPES = {"<f8", "<i8", "<c16"}


def write_blob(path: str, arrays: dict, meta: dict) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    blob = b"".join(
        [MAGIC, struct.pack("<IQ", VERSION, len(header)), header, *payloads]
    )
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_blob(path: str) -> tuple[dict, dict]:
    """Return (arrays, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter/checkpoint blob")
    version, header_len = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported blob version {version}")
    start = len(MAGIC) + 12
    header = json.loads(raw[start : start + header_len].decode())
    base = start + header_len
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        begin = base + entry["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=begin)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]
