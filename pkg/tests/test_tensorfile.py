"""Binary tensor container: byte layout, round trips, forced error paths."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from telecast.rng import RngStream
from telecast.tensorfile import (BadMagicError, DimensionError, DtypeError,
                                 TruncatedError, load_tensor, save_tensor)


def test_round_trip_reproduces_data_bytes(tmp_path):
    arr = RngStream(0).normal((2, 3))
    path = tmp_path / "t.tns1"
    save_tensor(path, arr)
    blob = path.read_bytes()
    assert blob[14:] == arr.tobytes(order="C")
    assert np.array_equal(load_tensor(path), arr)


def test_header_layout_float32(tmp_path):
    arr = np.zeros((4, 8, 16), dtype=np.float32)
    path = tmp_path / "t.tns1"
    save_tensor(path, arr)
    blob = path.read_bytes()
    assert blob[:4] == b"TNS1"
    assert blob[4] == 1          # dtype code float32
    assert blob[5] == 3          # ndim
    assert struct.unpack("<3I", blob[6:18]) == (4, 8, 16)


def test_truncated_payload_names_byte_counts(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4)
    path = tmp_path / "t.tns1"
    save_tensor(path, arr)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(TruncatedError, match="expects 96 bytes, found 91"):
        load_tensor(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "t.tns1"
    path.write_bytes(b"NOPE" + bytes([2, 1]) + struct.pack("<I", 1) + b"\x00" * 8)
    with pytest.raises(BadMagicError):
        load_tensor(path)


def test_rank_overflow_on_load(tmp_path):
    path = tmp_path / "t.tns1"
    path.write_bytes(b"TNS1" + bytes([2, 5]) + struct.pack("<5I", 1, 1, 1, 1, 1))
    with pytest.raises(DimensionError, match="rank 5"):
        load_tensor(path)


def test_rank_overflow_on_save(tmp_path):
    with pytest.raises(DimensionError):
        save_tensor(tmp_path / "t.tns1", np.zeros((1, 1, 1, 1, 1)))


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.tns1"
    path.write_bytes(b"TNS1" + bytes([9, 1]) + struct.pack("<I", 1) + b"\x00" * 8)
    with pytest.raises(DtypeError):
        load_tensor(path)


def test_integer_dtype_rejected_on_save(tmp_path):
    with pytest.raises(DtypeError):
        save_tensor(tmp_path / "t.tns1", np.zeros(3, dtype=np.int64))


def test_header_shorter_than_dims(tmp_path):
    path = tmp_path / "t.tns1"
    path.write_bytes(b"TNS1" + bytes([2, 3]) + struct.pack("<I", 4))
    with pytest.raises(TruncatedError):
        load_tensor(path)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=0, max_size=4),
       st.sampled_from([np.float32, np.float64]),
       st.integers(0, 2 ** 31 - 1))
def test_round_trip_random_shapes(shape, dtype, seed):
    import tempfile
    arr = RngStream(seed).normal(tuple(shape)).astype(dtype)
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/t.tns1"
        save_tensor(path, arr)
        out = load_tensor(path)
    assert out.dtype == np.dtype(dtype).newbyteorder("=")
    assert np.array_equal(out, arr)
