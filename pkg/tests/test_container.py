"""Binary array container: round-trips, determinism, malformed-input errors."""

import numpy as np
import pytest

from egot2.container import (
    FormatError,
    decode_array,
    encode_array,
    file_digest,
    read_arrays,
    write_arrays,
)


@pytest.mark.parametrize(
    "arr",
    [
        np.arange(12, dtype=np.float32).reshape(3, 4),
        np.linspace(-1, 1, 30, dtype=np.float64).reshape(2, 3, 5),
        np.arange(-5, 5, dtype=np.int64),
        np.array(3.5, dtype=np.float32),  # rank 0
        np.zeros((0, 7), dtype=np.float32),  # empty dimension
    ],
)
def test_blob_round_trip(arr):
    blob = encode_array(arr)
    out, end = decode_array(blob)
    assert end == len(blob)
    assert out.dtype == arr.dtype
    assert out.shape == arr.shape
    assert np.array_equal(out, arr)


def test_blob_bytes_deterministic():
    arr = np.random.default_rng(3).normal(size=(4, 5)).astype(np.float32)
    assert encode_array(arr) == encode_array(arr.copy())


def test_blob_decode_at_offset():
    a = np.arange(4, dtype=np.int64)
    b = np.ones((2, 2), dtype=np.float32)
    buf = encode_array(a) + encode_array(b)
    out_a, next_off = decode_array(buf)
    out_b, end = decode_array(buf, next_off)
    assert np.array_equal(out_a, a)
    assert np.array_equal(out_b, b)
    assert end == len(buf)


def test_unsupported_dtype_rejected():
    with pytest.raises(FormatError, match="dtype"):
        encode_array(np.zeros(3, dtype=np.int32))


def test_corrupt_magic_rejected():
    blob = bytearray(encode_array(np.zeros(3, dtype=np.float32)))
    blob[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        decode_array(bytes(blob))


def test_truncated_payload_rejected():
    blob = encode_array(np.zeros(8, dtype=np.float64))
    with pytest.raises(FormatError, match="payload"):
        decode_array(blob[:-1])


def test_truncated_header_rejected():
    blob = encode_array(np.zeros(8, dtype=np.float64))
    with pytest.raises(FormatError, match="header|dims"):
        decode_array(blob[:6])


def test_bad_version_rejected():
    blob = bytearray(encode_array(np.zeros(2, dtype=np.float32)))
    blob[4] = 99
    with pytest.raises(FormatError, match="version"):
        decode_array(bytes(blob))


def test_multi_array_round_trip(tmp_path):
    arrays = {
        "w": np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32),
        "b": np.arange(4, dtype=np.int64),
        "x": np.random.default_rng(2).normal(size=(2,)).astype(np.float64),
    }
    meta = {"kind": "test", "nested": {"a": [1, 2]}}
    path = tmp_path / "multi.egt2"
    write_arrays(str(path), arrays, meta)
    out, out_meta = read_arrays(str(path))
    assert set(out) == set(arrays)
    for name in arrays:
        assert out[name].dtype == arrays[name].dtype
        assert np.array_equal(out[name], arrays[name])
    assert out_meta == meta


def test_multi_array_bytes_deterministic(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32), "z": np.ones((2, 3), dtype=np.int64)}
    p1, p2 = tmp_path / "one.egt2", tmp_path / "two.egt2"
    write_arrays(str(p1), arrays, {"seed": 5})
    write_arrays(str(p2), {k: v.copy() for k, v in arrays.items()}, {"seed": 5})
    assert p1.read_bytes() == p2.read_bytes()


def test_read_arrays_rejects_plain_blob(tmp_path):
    path = tmp_path / "blob.egt2"
    path.write_bytes(encode_array(np.zeros(3, dtype=np.float32)))
    with pytest.raises(FormatError, match="index"):
        read_arrays(str(path))


def test_read_arrays_rejects_corrupt_index(tmp_path):
    path = tmp_path / "multi.egt2"
    write_arrays(str(path), {"a": np.zeros(2, dtype=np.float32)})
    buf = bytearray(path.read_bytes())
    buf[12] ^= 0xFF  # inside the JSON index block
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        read_arrays(str(path))


def test_file_digest_tracks_content(tmp_path):
    p = tmp_path / "f.bin"
    p.write_bytes(b"hello")
    d1 = file_digest(str(p))
    assert d1 == file_digest(str(p))
    p.write_bytes(b"hellp")
    assert file_digest(str(p)) != d1
