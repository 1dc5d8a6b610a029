import math

import numpy as np
import pytest

from cpct.operators import (
    DegenerateOperatorError,
    FanBeamGeometry,
    FanBeamProjector,
    GradientOperator,
    IdentityOperator,
    MatrixOperator,
    StackedOperator,
    absolute_col_sums,
    absolute_row_sums,
    backproject,
    divergence,
    divergence_scaled,
    get_projector,
    gradient,
    gradient_scaled,
    inverse_weights,
    power_method,
    project,
)
from cpct.spaces import ShapeError, inner_product, norm2


def _rand_like(rng, shape):
    if shape and isinstance(shape[0], tuple):
        return tuple(rng.standard_normal(s) for s in shape)
    return rng.standard_normal(shape)


def adjoint_error(K, rng):
    x = _rand_like(rng, K.domain_shape)
    y = _rand_like(rng, K.range_shape)
    Kx = K.apply(x)
    lhs = inner_product(Kx, y)
    rhs = inner_product(x, K.apply_transpose(y))
    return abs(lhs - rhs) / (norm2(Kx) * norm2(y))


# --- reference constructions -------------------------------------------------


def dense_gradient(M):
    """Materialise the finite-difference gradient from its pixel formulas."""
    G = np.zeros((2 * M * M, M * M))
    idx = lambda i, j: j * M + i  # noqa: E731  (i along s = column, j along t = row)
    for j in range(M):
        for i in range(M):
            r = idx(i, j)
            G[r, idx(i, j)] -= 1.0
            if i < M - 1:
                G[r, idx(i + 1, j)] += 1.0
            r = M * M + idx(i, j)
            G[r, idx(i, j)] -= 1.0
            if j < M - 1:
                G[r, idx(i, j + 1)] += 1.0
    return G


def clip_length(p0, p1, xmin, xmax, ymin, ymax):
    """Liang-Barsky: length of segment p0->p1 inside an axis-aligned box.

    A segment running exactly along a box edge belongs to the box below it
    (lower index), so a lower or left edge contributes nothing.
    """
    d = p1 - p0
    if (d[1] == 0 and p0[1] == ymin) or (d[0] == 0 and p0[0] == xmin):
        return 0.0
    t0, t1 = 0.0, 1.0
    for p, q in ((-d[0], p0[0] - xmin), (d[0], xmax - p0[0]),
                 (-d[1], p0[1] - ymin), (d[1], ymax - p0[1])):
        if p == 0:
            if q < 0:
                return 0.0
            continue
        t = q / p
        if p < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    return max(t1 - t0, 0.0) * float(np.hypot(*d))


def brute_force_matrix(geom):
    M, d = geom.M, geom.pixel_size
    lo = -0.5 * geom.image_side
    A = np.zeros((geom.n_views * geom.n_bins, M * M))
    for v in range(geom.n_views):
        src, ends = geom.ray_endpoints(v)
        for b, e in enumerate(ends):
            for j in range(M):
                for i in range(M):
                    A[v * geom.n_bins + b, j * M + i] = clip_length(
                        src, e, lo + i * d, lo + (i + 1) * d, lo + j * d, lo + (j + 1) * d)
    return A


# --- projector ---------------------------------------------------------------


def single_pixel_geometry(angle):
    return FanBeamGeometry(M=1, n_views=1, n_bins=1, image_side=1.0, bin_size=0.1,
                           angles=(angle,))


def test_single_pixel_axis_chord():
    geom = single_pixel_geometry(0.0)
    assert project(geom, np.array([[2.5]]))[0, 0] == pytest.approx(2.5 * geom.pixel_size, rel=1e-14)


def test_single_pixel_diagonal_chord():
    geom = single_pixel_geometry(math.pi / 4)
    val = project(geom, np.array([[1.0]]))[0, 0]
    assert val == pytest.approx(math.sqrt(2) * geom.pixel_size, rel=1e-12)


def test_single_pixel_backprojection_is_chord():
    geom = single_pixel_geometry(math.pi / 4)
    chord = project(geom, np.ones((1, 1)))[0, 0]
    assert backproject(geom, np.ones((1, 1)))[0, 0] == chord


def test_zero_in_zero_out():
    geom = FanBeamGeometry.desk(M=16, n_views=6, n_bins=24)
    assert not project(geom, np.zeros((16, 16))).any()
    assert not backproject(geom, np.zeros((6, 24))).any()


def test_projector_matches_per_pixel_clipping():
    geom = FanBeamGeometry(M=6, n_views=7, n_bins=9, bin_size=0.6, image_side=3.0)
    A = get_projector(geom).matrix.toarray()
    np.testing.assert_allclose(A, brute_force_matrix(geom), atol=1e-12)


def test_ray_sum_equals_length_inside_grid():
    geom = FanBeamGeometry.desk(M=16, n_views=5, n_bins=40)
    A = get_projector(geom).matrix
    half = 0.5 * geom.image_side
    for v in range(geom.n_views):
        src, ends = geom.ray_endpoints(v)
        for b, e in enumerate(ends):
            expected = clip_length(src, e, -half, half, -half, half)
            assert A[v * geom.n_bins + b].sum() == pytest.approx(expected, abs=1e-12)


def test_edge_tangent_ray_goes_to_lower_index_pixel():
    # 2x2 grid; the central ray at angle 0 runs along the row boundary y = 0.
    geom = FanBeamGeometry(M=2, n_views=1, n_bins=1, image_side=2.0, angles=(0.0,))
    A = get_projector(geom).matrix.toarray()[0].reshape(2, 2)
    np.testing.assert_allclose(A, [[1.0, 1.0], [0.0, 0.0]])


def test_projector_shape_errors():
    geom = FanBeamGeometry.desk(M=8, n_views=4, n_bins=16)
    with pytest.raises(ShapeError):
        project(geom, np.zeros((9, 9)))
    with pytest.raises(ShapeError):
        backproject(geom, np.zeros((4, 15)))


@pytest.mark.parametrize("kwargs", [
    dict(M=8, n_views=3, n_bins=4, source_radius=-1.0),
    dict(M=8, n_views=3, n_bins=4, angles=(0.0, 0.0, 1.0)),
    dict(M=8, n_views=2, n_bins=4, angles=(0.0, 7.0)),
    dict(M=8, n_views=3, n_bins=4, image_side=0.0),
])
def test_geometry_validation(kwargs):
    with pytest.raises(ValueError):
        FanBeamGeometry(**kwargs)


def test_full_scale_geometry_defaults():
    geom = FanBeamGeometry.full_scale()
    assert (geom.M, geom.n_views, geom.n_bins) == (256, 60, 512)
    assert geom.source_radius == 40.0 and geom.source_detector_distance == 80.0
    assert geom.bin_size == pytest.approx(0.02)
    assert geom.angles[1] - geom.angles[0] == pytest.approx(2 * math.pi / 60)


# --- gradient / divergence ---------------------------------------------------


def test_gradient_of_ones():
    g = gradient(np.ones((2, 2)))
    np.testing.assert_array_equal(g[0], [[0.0, -1.0], [0.0, -1.0]])
    np.testing.assert_array_equal(g[1], [[0.0, 0.0], [-1.0, -1.0]])


def test_gradient_of_zero():
    assert not gradient(np.zeros((5, 5))).any()
    assert not divergence(np.zeros((2, 5, 5))).any()


def test_gradient_single_pixel_stencil():
    u = np.zeros((3, 3))
    u[1, 1] = 1.0
    g = gradient(u)
    expected_s = np.zeros((3, 3))
    expected_s[1, 0], expected_s[1, 1] = 1.0, -1.0
    expected_t = np.zeros((3, 3))
    expected_t[0, 1], expected_t[1, 1] = 1.0, -1.0
    np.testing.assert_array_equal(g[0], expected_s)
    np.testing.assert_array_equal(g[1], expected_t)


@pytest.mark.parametrize("M", [1, 3, 4, 7])
def test_gradient_matches_dense_construction(M):
    G = dense_gradient(M)
    basis = np.eye(M * M)
    cols = np.stack([gradient(e.reshape(M, M)).ravel() for e in basis], axis=1)
    np.testing.assert_array_equal(cols, G)


def test_minus_divergence_is_exact_transpose_dense():
    M = 4
    G = dense_gradient(M)
    basis = np.eye(2 * M * M)
    cols = np.stack([-divergence(e.reshape(2, M, M)).ravel() for e in basis], axis=1)
    np.testing.assert_array_equal(cols, G.T)


def test_scaled_operators():
    u = np.random.default_rng(1).standard_normal((5, 5))
    v = np.random.default_rng(2).standard_normal((2, 5, 5))
    np.testing.assert_array_equal(gradient_scaled(u, 1.0), gradient(u))
    np.testing.assert_array_equal(gradient_scaled(u, 2.0), 2.0 * gradient(u))
    np.testing.assert_array_equal(divergence_scaled(v, 2.0), 2.0 * divergence(v))
    with pytest.raises(ValueError):
        gradient_scaled(u, 0.0)
    with pytest.raises(ValueError):
        divergence_scaled(v, -1.0)
    with pytest.raises(ValueError):
        GradientOperator(5, scale=0.0)


# --- adjointness and linearity -----------------------------------------------


def _operators(M):
    geom = FanBeamGeometry.desk(M=M, n_views=12, n_bins=2 * M)
    A = FanBeamProjector(geom)
    return {
        "projector": A,
        "gradient": GradientOperator(M),
        "gradient_scaled": GradientOperator(M, scale=0.37),
        "stacked": StackedOperator(A, GradientOperator(M)),
        "stacked_scaled": StackedOperator(A, GradientOperator(M, scale=2e-5)),
    }


@pytest.mark.parametrize("M", [8, 32])
@pytest.mark.parametrize("name", ["projector", "gradient", "gradient_scaled", "stacked",
                                  "stacked_scaled"])
def test_adjoint_identity(M, name):
    K = _operators(M)[name]
    rng = np.random.default_rng(M)
    worst = max(adjoint_error(K, rng) for _ in range(100))
    assert worst <= 1e-12


@pytest.mark.parametrize("name", ["projector", "gradient", "stacked"])
def test_linearity(name):
    K = _operators(8)[name]
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((2, 8, 8))
    a, b = 1.7, -0.3
    lhs = K.apply(a * x + b * y)
    Kx, Ky = K.apply(x), K.apply(y)
    if isinstance(lhs, tuple):
        for l, kx, ky in zip(lhs, Kx, Ky):
            np.testing.assert_allclose(l, a * kx + b * ky, atol=1e-12 * np.abs(l).max())
    else:
        np.testing.assert_allclose(lhs, a * Kx + b * Ky, atol=1e-12 * np.abs(lhs).max())


# --- absolute sums -----------------------------------------------------------


def test_absolute_sums_dense_example():
    K = MatrixOperator([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(absolute_row_sums(K), [3.0, 7.0])
    np.testing.assert_array_equal(absolute_col_sums(K), [4.0, 6.0])
    np.testing.assert_allclose(inverse_weights(absolute_row_sums(K)), [1 / 3, 1 / 7])
    np.testing.assert_allclose(inverse_weights(absolute_col_sums(K)), [1 / 4, 1 / 6])


def test_absolute_sums_identity():
    K = IdentityOperator((3, 3))
    assert np.all(absolute_row_sums(K) == 1.0)
    assert np.all(absolute_col_sums(K) == 1.0)


@pytest.mark.parametrize("scale", [1.0, 0.25])
def test_gradient_absolute_sums_match_dense(scale):
    M = 3
    G = scale * np.abs(dense_gradient(M))
    K = GradientOperator(M, scale=scale)
    np.testing.assert_array_equal(K.abs_row_sums().ravel(), G.sum(axis=1))
    np.testing.assert_array_equal(K.abs_col_sums().ravel(), G.sum(axis=0))
    if scale == 1.0:
        assert K.abs_row_sums().max() <= 2.0


def test_projector_absolute_sums_match_matrix():
    geom = FanBeamGeometry.desk(M=8, n_views=5, n_bins=12)
    A = get_projector(geom)
    dense = A.matrix.toarray()
    np.testing.assert_allclose(A.abs_row_sums().ravel(), dense.sum(axis=1), rtol=1e-14)
    np.testing.assert_allclose(A.abs_col_sums().ravel(), dense.sum(axis=0), rtol=1e-14)


def test_inverse_weights_zero_sum_freezes():
    np.testing.assert_array_equal(inverse_weights(np.array([2.0, 0.0])), [0.5, 0.0])


# --- power method ------------------------------------------------------------


def test_power_method_identity():
    assert power_method(IdentityOperator((4, 4))).L == pytest.approx(1.0, abs=1e-12)


def test_power_method_diagonal():
    K = MatrixOperator(np.diag([3.0, 1.0]))
    assert power_method(K, x0=np.array([1.0, 1.0])).L == pytest.approx(3.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_power_method_random_dense(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((8, 6))
    top = np.sqrt(np.linalg.eigvalsh(B.T @ B).max())
    res = power_method(MatrixOperator(B), n_iter=2000)
    assert res.L == pytest.approx(top, abs=1e-8)


def test_power_method_start_vector_invariance():
    geom = FanBeamGeometry.desk(M=16, n_views=10, n_bins=32)
    K = StackedOperator(get_projector(geom), GradientOperator(16))
    values = [power_method(K, seed=s, n_iter=500).L for s in range(4)]
    values.append(power_method(K, x0=np.ones((16, 16)), n_iter=500).L)
    assert max(values) - min(values) <= 1e-10


def test_gradient_norm_bound():
    L = power_method(GradientOperator(16), n_iter=300).L
    assert L <= math.sqrt(8)
    assert L > 2.5


def test_power_method_trace_monotone():
    geom = FanBeamGeometry.desk(M=16, n_views=10, n_bins=32)
    res = power_method(StackedOperator(get_projector(geom), GradientOperator(16)), n_iter=60)
    trace = np.array(res.trace)
    assert np.all(np.diff(trace[3:]) >= -1e-12 * trace[-1])


def test_power_method_errors():
    with pytest.raises(ValueError):
        power_method(IdentityOperator((3,)), x0=np.zeros(3))
    with pytest.raises(DegenerateOperatorError):
        power_method(MatrixOperator(np.zeros((2, 2))))
    with pytest.raises(ValueError):
        power_method(IdentityOperator((3,)), n_iter=0)
