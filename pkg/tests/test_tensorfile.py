import numpy as np
import pytest

from muvfs.tensorfile import (BadDtypeError, BadMagicError, BadVersionError,
                              TensorFileError, TruncatedPayloadError,
                              read_tensor_file, write_tensor_file)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5))
    path = tmp_path / "t.muvt"
    write_tensor_file(path, arr, dtype="f64")
    back = read_tensor_file(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_roundtrip_scalarish_shapes(tmp_path):
    for shape in ((1,), (7,), (2, 2), (1, 1, 1, 1)):
        arr = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
        path = tmp_path / "s.muvt"
        write_tensor_file(path, arr)
        assert np.array_equal(read_tensor_file(path), arr)


def test_f32_write_f64_read_within_precision(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((6, 6))
    path = tmp_path / "t32.muvt"
    write_tensor_file(path, arr, dtype="f32")
    back = read_tensor_file(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr.astype(np.float32).astype(np.float64))
    assert np.allclose(back, arr, atol=1e-6)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.muvt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(BadMagicError):
        read_tensor_file(path)


def test_bad_version(tmp_path):
    path = tmp_path / "t.muvt"
    write_tensor_file(path, np.zeros(3))
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(BadVersionError):
        read_tensor_file(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.muvt"
    write_tensor_file(path, np.zeros((4, 4)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        read_tensor_file(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.muvt"
    write_tensor_file(path, np.zeros(2))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(TensorFileError, match="trailing"):
        read_tensor_file(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.muvt"
    write_tensor_file(path, np.zeros(2))
    blob = bytearray(path.read_bytes())
    blob[6] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(BadDtypeError):
        read_tensor_file(path)


def test_nonfinite_write_rejected(tmp_path):
    with pytest.raises(TensorFileError):
        write_tensor_file(tmp_path / "x.muvt", np.array([np.inf]))
