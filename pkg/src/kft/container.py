"""Binary named-tensor container ("KFT1").

Layout: 4 magic bytes ``KFT1`` followed by zero or more records. Each record
is: u16 little-endian name length, UTF-8 name, u8 dtype code (0 = f32,
1 = f64), u8 rank, rank x u32 little-endian dims, then the raw little-endian
values in row-major order. Used for checkpoints, serialized clips, and any
other named weight blobs.
"""

from __future__ import annotations

import struct
import numpy as np

MAGIC = b"KFT1"

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ContainerError(Exception):
    """Base class for malformed container files."""


class MagicError(ContainerError):
    """File does not start with the KFT1 magic bytes."""


class TruncatedError(ContainerError):
    """File ends in the middle of a record."""


class DtypeError(ContainerError):
    """Unsupported dtype on write or unknown dtype code on read."""


def save_tensors(path, tensors: dict) -> None:
    """Write named arrays to ``path``. Insertion order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _DTYPE_TO_CODE.get(arr.dtype)
            if code is None:
                raise DtypeError(f"unsupported dtype {arr.dtype} for entry '{name}'")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise ContainerError(f"entry name too long: {name!r}")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"unexpected end of file while reading {what}")
    return buf


def load_tensors(path) -> dict:
    """Read all named arrays from ``path`` in file order."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise MagicError(f"bad magic bytes {magic!r} (expected {MAGIC!r})")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise TruncatedError("unexpected end of file in record header")
            (nlen,) = struct.unpack("<H", head)
            name = _read_exact(fh, nlen, "entry name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"'{name}' header"))
            dtype = _CODE_TO_DTYPE.get(code)
            if dtype is None:
                raise DtypeError(f"unknown dtype code {code} for entry '{name}'")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"'{name}' dims"))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, count * dtype.itemsize, f"'{name}' payload")
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return out
