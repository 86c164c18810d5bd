"""Binary container for named arrays (weights, latents, training state).

Layout: magic ``SDFTNSR1``, then records until end of file.  Each record
is name length (u32), UTF-8 name, dtype code (u8), rank (u8), one u64
extent per axis, then the payload, all little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"SDFTNSR1"

_CODE_TO_DTYPE = {1: "<f8", 2: "<f4", 3: "<i8", 4: "u1"}
_KIND_TO_CODE = {("f", 8): 1, ("f", 4): 2, ("i", 8): 3, ("u", 1): 4}


def _dtype_code(arr):
    key = (arr.dtype.kind, arr.dtype.itemsize)
    code = _KIND_TO_CODE.get(key)
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype} in checkpoint record")
    return code


def write_records(path, records):
    """Write an ordered mapping of name -> ndarray."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in records.items():
            arr = np.asarray(arr)
            code = _dtype_code(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            f.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def read_records(path):
    """Read a container back into a dict of name -> ndarray."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint container")
    pos = len(MAGIC)
    records = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"{path}: truncated while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "record name length"))
        name = take(name_len, "record name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"header of {name!r}"))
        if code not in _CODE_TO_DTYPE:
            raise DataError(f"{path}: record {name!r} has unknown dtype code {code}")
        shape = tuple(
            struct.unpack("<Q", take(8, f"extent of {name!r}"))[0] for _ in range(rank)
        )
        dtype = np.dtype(_CODE_TO_DTYPE[code])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(count * dtype.itemsize, f"payload of {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return records
