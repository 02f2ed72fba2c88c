"""Binary checkpoint container of named, shape-prefixed matrices.

Layout (all integers little-endian)::

    magic        8 bytes   b"GRASSCKP"
    version      uint32    1
    count        uint32    number of matrices
    then per matrix, in name order:
      name_len   uint32
      name       utf-8 bytes
      rows, cols uint32, uint32
      data       rows*cols float64, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InvalidInputError

MAGIC = b"GRASSCKP"
VERSION = 1


def dumps(mats: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(mats))]
    for name in sorted(mats):
        a = np.asarray(mats[name], dtype="<f8")
        if a.ndim != 2:
            raise InvalidInputError(f"{name}: only 2-D matrices can be stored")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<II", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise InvalidInputError("not a checkpoint (bad magic)")
    pos = 8
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    mats = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(blob):
                raise InvalidInputError("truncated checkpoint")
            mats[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except struct.error:
        raise InvalidInputError("truncated checkpoint") from None
    if pos != len(blob):
        raise InvalidInputError("trailing bytes after checkpoint")
    return mats


def save(path, mats: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(mats))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
