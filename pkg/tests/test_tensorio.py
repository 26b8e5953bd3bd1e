import numpy as np
import pytest

from errsim.errors import ValidationError
from errsim.tensorio import (
    bit_distance,
    bits_float,
    canonical_shape,
    flat_index,
    flip_bit,
    float_bits,
    load_tensor,
    save_tensor,
    unravel,
)


def test_save_load_round_trip(tmp_path, rng):
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.bin"
    save_tensor(path, arr)
    loaded = load_tensor(path, (3, 4, 5))
    assert np.array_equal(arr.view(np.uint32), loaded.view(np.uint32))


def test_load_size_mismatch(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(b"\0" * 12)
    with pytest.raises(ValidationError, match="expected 16 bytes"):
        load_tensor(path, (2, 2))


def test_flat_index_unravel_inverse():
    cshape = (5, 7, 3)
    for i in range(5 * 7 * 3):
        assert flat_index(unravel(i, cshape), cshape) == i


def test_float_bits_round_trip():
    # round trip through the binary32 encoding preserves f32 values exactly
    for v in (0.0, -0.0, 1.0, -1.0, 3.14, float("inf"), 1e-44):
        assert bits_float(float_bits(v)) == float(np.float32(v))
    assert np.signbit(bits_float(float_bits(-0.0)))


def test_flip_bit_sign():
    assert flip_bit(1.0, 31) == -1.0
    assert flip_bit(-2.5, 31) == 2.5
    with pytest.raises(ValueError):
        flip_bit(1.0, 32)


def test_bit_distance():
    assert bit_distance(1.0, 1.0) == 0
    assert bit_distance(1.0, -1.0) == 1
    assert bit_distance(2.0, 57.25) == 5


def test_canonical_shape_rejects_bad_extents():
    with pytest.raises(ValidationError):
        canonical_shape((0, 3, 3))
