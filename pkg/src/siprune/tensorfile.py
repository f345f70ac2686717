"""Bit-exact binary tensor container ("SIF1").

Layout, little-endian throughout::

    magic   4 bytes  b"SIF1"
    count   u32      number of entries
    entry*  { name_len: u32, name: UTF-8 bytes, dtype: u8 (0 = f32),
              ndim: u8, dims: ndim * u32, payload: row-major IEEE-754 f32 }

Values are widened to float64 on load; ``save`` quantizes to f32, so
``load(save(t))`` is bit-identical to the f32-quantized input. Entry order
is preserved (callers rely on it for model topology).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SIF1"
DTYPE_F32 = 0


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    """Write named tensors (1-D or 2-D float arrays) to ``path``."""
    seen = set()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            if name in seen:
                raise ValueError(f"duplicate tensor name {name!r}")
            seen.add(name)
            a = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", DTYPE_F32, a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a SIF1 file back into float64 arrays, preserving entry order."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated file while reading {what}", off)
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'SIF1'", 0)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_off = off
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", name_off)
        dtype_off = off
        dtype, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype != DTYPE_F32:
            raise FormatError(f"unsupported dtype {dtype} for {name!r}", dtype_off)
        dims = []
        for _ in range(ndim):
            (d,) = struct.unpack("<I", take(4, "dims"))
            dims.append(d)
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = take(4 * n_elem, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        out[name] = arr.reshape(dims)
    if off != len(data):
        raise FormatError("trailing bytes after last entry", off)
    return out
