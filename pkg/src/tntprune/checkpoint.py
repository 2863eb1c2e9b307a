"""The ``TNTC`` named-tensor container.

Layout (all integers little-endian)::

    b"TNTC"  version:u32
    repeated until EOF:
        name_len:u32  name:utf-8[name_len]  rank:u32  dims:u64[rank]  payload:f64[prod(dims)]

Reads are all-or-nothing: any truncation or malformed record raises
:class:`FormatError` carrying the byte offset, and nothing is returned.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"TNTC"
VERSION = 1


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise FormatError("file too short for TNTC header", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported TNTC version {version}", 4)
    out: dict[str, np.ndarray] = {}
    pos = 8
    end = len(buf)

    def need(n: int, what: str):
        if pos + n > end:
            raise FormatError(f"truncated {what}: need {n} bytes, {end - pos} left", pos)

    while pos < end:
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen, "tensor name")
        try:
            name = buf[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not UTF-8: {exc}", pos) from None
        pos += nlen
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", pos - nlen)
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        need(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
        out[name] = arr.reshape(dims)
        pos += 8 * count
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
