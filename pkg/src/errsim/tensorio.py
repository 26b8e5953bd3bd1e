"""Raw tensor file I/O and bit-level float helpers.

Tensor files are little-endian binary32, row-major, with the shape kept
externally (model manifest, corpus meta.json, trace manifest).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

DTYPE = np.dtype("<f4")


def load_tensor(path: str | Path, shape) -> np.ndarray:
    path = Path(path)
    shape = tuple(int(d) for d in shape)
    expected = int(np.prod(shape)) * 4
    data = path.read_bytes()
    if len(data) != expected:
        raise ValidationError(
            f"{path}: expected {expected} bytes for shape {shape}, got {len(data)}"
        )
    return np.frombuffer(data, dtype=DTYPE).reshape(shape).copy()


def save_tensor(path: str | Path, tensor: np.ndarray) -> None:
    arr = np.ascontiguousarray(tensor, dtype=DTYPE)
    Path(path).write_bytes(arr.tobytes())


def canonical_shape(shape) -> tuple[int, int, int]:
    """Map a tensor shape to the (maps, rows, cols) view used by the
    corruption patterns.

    Feature-map stacks (C, H, W) with C >= 2 keep their layout. Flat
    tensors, i.e. (1, N) and anything 3-D with a leading extent of 1,
    collapse to a single row (1, 1, N) so that row/point patterns stay
    meaningful and multi-map patterns are impossible.
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape) or not shape:
        raise ValidationError(f"invalid tensor shape {shape}")
    if len(shape) == 3 and shape[0] > 1:
        return shape
    n = 1
    for d in shape:
        n *= d
    return (1, 1, n)


def flat_index(loc, cshape) -> int:
    c, y, x = loc
    _, h, w = cshape
    return (c * h + y) * w + x


def unravel(index: int, cshape) -> tuple[int, int, int]:
    _, h, w = cshape
    c, rest = divmod(int(index), h * w)
    y, x = divmod(rest, w)
    return (c, y, x)


def float_bits(value: float) -> int:
    """binary32 encoding of a value as an unsigned 32-bit integer."""
    return struct.unpack("<I", struct.pack("<f", float(value)))[0]


def bits_float(bits: int) -> float:
    return struct.unpack("<f", struct.pack("<I", bits & 0xFFFFFFFF))[0]


def flip_bit(value: float, bit: int) -> float:
    if not 0 <= bit <= 31:
        raise ValueError(f"bit index {bit} outside [0, 31]")
    return bits_float(float_bits(value) ^ (1 << bit))


def bit_distance(a: float, b: float) -> int:
    """Number of differing bits between two binary32 encodings."""
    return int(bin(float_bits(a) ^ float_bits(b)).count("1"))


def bits_view(arr: np.ndarray) -> np.ndarray:
    """uint32 view of a float32 array (for bitwise comparisons)."""
    return np.ascontiguousarray(arr, dtype=DTYPE).view(np.uint32)
