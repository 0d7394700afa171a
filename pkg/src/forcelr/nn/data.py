"""Datasets: IDX files (MNIST layout) and seeded synthetic Gaussian-blob images."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..rng import make_rng

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file: two zero bytes, a type code, a dimension count, big-endian sizes."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IDXFormatError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise IDXFormatError(f"{path}: unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header != expected:
        raise IDXFormatError(f"{path}: payload has {len(raw) - header} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    array = np.asarray(array)
    for code, dt in _IDX_TYPES.items():
        if dt.kind == array.dtype.kind and dt.itemsize == array.dtype.itemsize:
            break
    else:
        raise IDXFormatError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.astype(dt).tobytes())


def load_idx_dataset(train_images, train_labels, val_images, val_labels,
                     scale: float = 1.0 / 255.0) -> Dataset:
    def images(p):
        a = read_idx(p).astype(np.float32) * np.float32(scale)
        return a[:, None] if a.ndim == 3 else a

    xt, yt = images(train_images), read_idx(train_labels).astype(np.int64)
    xv, yv = images(val_images), read_idx(val_labels).astype(np.int64)
    if len(xt) != len(yt) or len(xv) != len(yv):
        raise IDXFormatError("image and label counts differ")
    if len(xt) == 0:
        raise IDXFormatError("empty training set")
    classes = int(max(yt.max(), yv.max() if len(yv) else 0)) + 1
    return Dataset(xt, yt, xv, yv, classes)


def _render(rng, labels, centers, size, width, jitter, noise):
    n = len(labels)
    grid = np.arange(size, dtype=np.float64)
    c = centers[labels] + jitter * rng.standard_normal((n, 2))
    dy = (grid[None, :] - c[:, 0:1]) ** 2
    dx = (grid[None, :] - c[:, 1:2]) ** 2
    img = np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2.0 * width ** 2))
    img += noise * rng.standard_normal(img.shape)
    return img[:, None].astype(np.float32)


def synthetic_blobs(classes: int = 2, samples: int = 512, val_samples: int = 256,
                    image_size: int = 8, noise: float = 0.5, seed: int = 0,
                    width: float = 1.5, jitter: float = 1.0) -> Dataset:
    """Each class is a Gaussian bump around its own center, plus pixel noise."""
    if classes < 2 or samples < 1 or image_size < 4:
        raise ValueError("need at least 2 classes, 1 sample and 4x4 images")
    rng = make_rng(seed, "data")
    mid = (image_size - 1) / 2.0
    radius = image_size / 4.0
    angles = 2 * np.pi * np.arange(classes) / classes + np.pi / 4
    centers = np.stack([mid + radius * np.sin(angles), mid + radius * np.cos(angles)], axis=1)

    def split(n):
        labels = rng.permutation(np.arange(n) % classes)
        return _render(rng, labels, centers, image_size, width, jitter, noise), labels.astype(np.int64)

    xt, yt = split(samples)
    xv, yv = split(val_samples)
    return Dataset(xt, yt, xv, yv, classes)
