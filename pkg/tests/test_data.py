import gzip

import numpy as np
import pytest

from forcelr.nn.data import (IDXFormatError, load_idx_dataset, read_idx, synthetic_blobs,
                             write_idx)


@pytest.mark.parametrize("dtype", [np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64])
def test_idx_round_trip(tmp_path, dtype):
    a = (np.arange(24).reshape(2, 3, 4) % 100).astype(dtype)
    write_idx(tmp_path / "a.idx", a)
    b = read_idx(tmp_path / "a.idx")
    assert b.dtype == np.dtype(dtype) and np.array_equal(a, b)


def test_idx_gzip(tmp_path):
    a = np.arange(10, dtype=np.uint8)
    write_idx(tmp_path / "a.idx", a)
    (tmp_path / "a.idx.gz").write_bytes(gzip.compress((tmp_path / "a.idx").read_bytes()))
    assert np.array_equal(read_idx(tmp_path / "a.idx.gz"), a)


def test_idx_header_is_big_endian(tmp_path):
    write_idx(tmp_path / "a.idx", np.zeros((2, 300), dtype=np.uint8))
    raw = (tmp_path / "a.idx").read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 2])
    assert raw[4:12] == bytes([0, 0, 0, 2, 0, 0, 1, 44])


@pytest.mark.parametrize("raw", [b"\x01\x00\x08\x01", b"\x00\x00\x07\x01\x00\x00\x00\x01\x00",
                                 b"\x00\x00\x08\x01\x00\x00", b"\x00\x00\x08\x01\x00\x00\x00\x03\x01"])
def test_idx_rejects_malformed(tmp_path, raw):
    (tmp_path / "bad.idx").write_bytes(raw)
    with pytest.raises(IDXFormatError):
        read_idx(tmp_path / "bad.idx")


def test_load_idx_dataset(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "ti", rng.integers(0, 256, (6, 5, 5)).astype(np.uint8))
    write_idx(tmp_path / "tl", np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8))
    write_idx(tmp_path / "vi", rng.integers(0, 256, (2, 5, 5)).astype(np.uint8))
    write_idx(tmp_path / "vl", np.array([1, 0], dtype=np.uint8))
    ds = load_idx_dataset(tmp_path / "ti", tmp_path / "tl", tmp_path / "vi", tmp_path / "vl")
    assert ds.input_shape == (1, 5, 5) and ds.num_classes == 3
    assert ds.x_train.dtype == np.float32 and ds.x_train.max() <= 1.0
    write_idx(tmp_path / "tl", np.array([0, 1], dtype=np.uint8))
    with pytest.raises(IDXFormatError):
        load_idx_dataset(tmp_path / "ti", tmp_path / "tl", tmp_path / "vi", tmp_path / "vl")


def test_synthetic_blobs():
    a = synthetic_blobs(samples=64, val_samples=32, seed=3)
    b = synthetic_blobs(samples=64, val_samples=32, seed=3)
    assert a.x_train.shape == (64, 1, 8, 8) and a.x_val.shape == (32, 1, 8, 8)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_val, b.y_val)
    assert np.bincount(a.y_train).tolist() == [32, 32]
    c = synthetic_blobs(samples=64, val_samples=32, seed=4)
    assert not np.array_equal(a.x_train, c.x_train)
    # class means peak at different pixels
    m0 = a.x_train[a.y_train == 0].mean(axis=0)[0]
    m1 = a.x_train[a.y_train == 1].mean(axis=0)[0]
    assert np.argmax(m0) != np.argmax(m1)
