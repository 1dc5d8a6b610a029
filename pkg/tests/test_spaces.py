import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpct.spaces import (
    FieldKind,
    ShapeError,
    inner_product,
    magnitude,
    norms,
    read_field,
    write_field,
)

# Values below 1e-100 are flushed to zero so squared norms cannot underflow.
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False).map(
    lambda v: 0.0 if abs(v) < 1e-100 else v)


def test_inner_product_examples():
    ones = np.ones((2, 2))
    assert inner_product(ones, ones) == 4.0
    x = np.arange(4.0).reshape(2, 2)
    assert inner_product(x, np.zeros((2, 2))) == 0.0
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[4.0, 3.0], [2.0, 1.0]])
    loop = 0.0
    for i in range(2):
        for j in range(2):
            loop += a[i, j] * b[i, j]
    assert loop == 20.0
    assert inner_product(a, b) == loop


def test_inner_product_vector_field_sums_both_components():
    v = np.ones((2, 3, 3))
    assert inner_product(v, v) == 18.0


def test_inner_product_shape_mismatch():
    with pytest.raises(ShapeError):
        inner_product(np.ones((2, 2)), np.ones((3, 3)))


def test_norms_examples():
    assert norms(np.array([3.0, -4.0])) == {"l1": 7.0, "l2": 5.0, "linf": 4.0}
    assert norms(np.zeros(5)) == {"l1": 0.0, "l2": 0.0, "linf": 0.0}
    assert norms(np.array([-2.0])) == {"l1": 2.0, "l2": 2.0, "linf": 2.0}


def test_magnitude_examples():
    v = np.zeros((2, 3, 3))
    v[0, 1, 2], v[1, 1, 2] = 3.0, 4.0
    m = magnitude(v)
    assert m[1, 2] == 5.0
    assert np.count_nonzero(m) == 1
    assert not magnitude(np.zeros((2, 4, 4))).any()
    v = np.zeros((2, 4, 4))
    v[0] = 1.0
    np.testing.assert_array_equal(magnitude(v), np.ones((4, 4)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (2, 5, 5), elements=finite), arrays(np.float64, (2, 5, 5), elements=finite))
def test_cauchy_schwarz(a, b):
    lhs = abs(inner_product(a, b))
    rhs = np.linalg.norm(a) * np.linalg.norm(b)
    assert lhs <= rhs * (1 + 1e-12) + 1e-300


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 4, 4), elements=finite), st.floats(0, 2 * np.pi))
def test_magnitude_rotation_invariant(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.stack([c * v[0] - s * v[1], s * v[0] + c * v[1]])
    np.testing.assert_allclose(magnitude(rot), magnitude(v), rtol=1e-12, atol=1e-9)


def test_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 8, 8))
    assert inner_product(a, b) == inner_product(a.copy(), b.copy())


@pytest.mark.parametrize(
    "kind, shape",
    [(FieldKind.IMAGE, (4, 4)), (FieldKind.SINOGRAM, (3, 7)), (FieldKind.VECTOR_FIELD, (2, 5, 5))],
)
def test_field_roundtrip(tmp_path, kind, shape):
    x = np.random.default_rng(0).standard_normal(shape)
    path = tmp_path / "f.img"
    write_field(path, x, kind)
    k, y = read_field(path)
    assert k is kind
    np.testing.assert_array_equal(x, y)


def test_field_header_layout(tmp_path):
    path = tmp_path / "s.img"
    write_field(path, np.arange(6.0).reshape(2, 3), FieldKind.SINOGRAM)
    raw = path.read_bytes()
    assert raw[:4] == b"PDCT"
    assert struct.unpack("<III", raw[4:16]) == (2, 2, 3)
    assert len(raw) == 16 + 6 * 8
    assert struct.unpack("<d", raw[16 + 8:16 + 16])[0] == 1.0


def test_vector_field_stores_s_first(tmp_path):
    v = np.zeros((2, 2, 2))
    v[0] = 1.0
    v[1] = 2.0
    path = tmp_path / "v.img"
    write_field(path, v, FieldKind.VECTOR_FIELD)
    vals = np.frombuffer(path.read_bytes()[16:], dtype="<f8")
    np.testing.assert_array_equal(vals, [1, 1, 1, 1, 2, 2, 2, 2])


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.img"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        read_field(path)


def test_write_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        write_field(tmp_path / "x.img", np.array([[np.nan]]), FieldKind.IMAGE)
