"""Image, sinogram and vector-field containers.

All three spaces are plain float64 numpy arrays:

* image        ``(M, M)``, indexed ``u[j, i]`` with ``i`` the column index
  along ``s`` and ``j`` the row index along ``t``; row-major storage.
* sinogram     ``(n_views, n_bins)``.
* vector field ``(2, M, M)``; ``v[0]`` is the ``s`` component, ``v[1]`` the
  ``t`` component.

Arithmetic is numpy's component-wise arithmetic. This module adds the few
reductions the solvers need and the binary field format used on disk.
"""

from __future__ import annotations

import enum
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDCT"
_HEADER = struct.Struct("<4sIII")


class ShapeError(ValueError):
    """Raised when two fields that must agree in shape do not."""


class FieldKind(enum.IntEnum):
    IMAGE = 1
    SINOGRAM = 2
    VECTOR_FIELD = 3


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def inner_product(a, b) -> float:
    """Euclidean inner product of two fields of the same space.

    Tuples are treated as product spaces, e.g. ``(sinogram, vector_field)``
    for the stacked operator range.
    """
    if isinstance(a, tuple):
        if not isinstance(b, tuple) or len(a) != len(b):
            raise ShapeError("product-space arguments must have equal length")
        return float(sum(inner_product(x, y) for x, y in zip(a, b)))
    _check_same_shape(a, b)
    return float(np.dot(np.ravel(a), np.ravel(b)))


def norm2(x) -> float:
    if isinstance(x, tuple):
        return float(np.sqrt(sum(norm2(c) ** 2 for c in x)))
    return float(np.linalg.norm(np.ravel(x)))


def norms(x) -> dict:
    """Return the l1, l2 and max norms of ``x`` as a dict."""
    flat = np.abs(np.ravel(np.asarray(x, dtype=np.float64)))
    if flat.size == 0:
        return {"l1": 0.0, "l2": 0.0, "linf": 0.0}
    return {
        "l1": float(flat.sum()),
        "l2": float(np.linalg.norm(flat)),
        "linf": float(flat.max()),
    }


def magnitude(v: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean length of a vector field, shape ``(M, M)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] != 2:
        raise ShapeError(f"expected a (2, M, M) vector field, got {v.shape}")
    return np.hypot(v[0], v[1])


def zeros_image(M: int) -> np.ndarray:
    return np.zeros((M, M))


def zeros_vector_field(M: int) -> np.ndarray:
    return np.zeros((2, M, M))


def _kind_of(array: np.ndarray, kind) -> FieldKind:
    if kind is not None:
        return FieldKind(kind)
    if array.ndim == 3:
        return FieldKind.VECTOR_FIELD
    # A 2-D array is ambiguous; square arrays default to images.
    if array.shape[0] == array.shape[1]:
        return FieldKind.IMAGE
    return FieldKind.SINOGRAM


def write_field(path, array, kind=None) -> None:
    """Write ``array`` in the ``PDCT`` binary field format.

    Header: magic ``PDCT``, u32 kind, u32 dim0, u32 dim1, then little-endian
    float64 values row-major. Vector fields store the ``s`` component first.
    """
    array = np.asarray(array, dtype=np.float64)
    kind = _kind_of(array, kind)
    if kind is FieldKind.VECTOR_FIELD:
        if array.ndim != 3 or array.shape[0] != 2:
            raise ShapeError(f"vector field must be (2, d0, d1), got {array.shape}")
        dim0, dim1 = array.shape[1:]
    else:
        if array.ndim != 2:
            raise ShapeError(f"{kind.name.lower()} must be 2-D, got {array.shape}")
        dim0, dim1 = array.shape
    if not np.all(np.isfinite(array)):
        raise ValueError("refusing to write a field with non-finite values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, int(kind), dim0, dim1))
        fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_field(path) -> tuple[FieldKind, np.ndarray]:
    """Read a ``PDCT`` field file; returns ``(kind, array)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a field header")
    magic, kind, dim0, dim1 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    kind = FieldKind(kind)
    shape = (2, dim0, dim1) if kind is FieldKind.VECTOR_FIELD else (dim0, dim1)
    count = int(np.prod(shape))
    payload = data[_HEADER.size:]
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: expected {count} values, found {len(payload) // 8}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return kind, values.reshape(shape)
