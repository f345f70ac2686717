"""Standalone SIF1 writer.

Byte layout: magic "SIF1", u32-LE entry count, then per entry a u32-LE name
length, UTF-8 name, one dtype byte (0 = f32), one ndim byte, ndim u32-LE
dims and the row-major little-endian f32 payload. This mirrors the format
the pruning toolkit reads; the implementation here is deliberately
independent of it.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SIF1"
DTYPE_F32 = 0


def write_sif(tensors: dict[str, np.ndarray], path) -> None:
    """Write named arrays as an SIF1 file, casting values to f32."""
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_F32, data.ndim))
        for dim in data.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(data.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
