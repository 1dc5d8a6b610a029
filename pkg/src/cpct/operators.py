"""Matrix-free linear operators and the power method.

Every operator exposes ``apply`` and ``apply_transpose`` where the latter is
the exact matrix transpose of the former, plus the absolute row/column sums
needed for diagonal preconditioning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .spaces import ShapeError, norm2

logger = logging.getLogger(__name__)


class DegenerateOperatorError(ArithmeticError):
    """The power method collapsed to the zero vector."""


def _check_shape(x, shape, what):
    if np.shape(x) != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {np.shape(x)}")


class LinearOperator:
    """Base class. Subclasses set ``domain_shape`` and ``range_shape``."""

    domain_shape: tuple
    range_shape: tuple

    def apply(self, x):
        raise NotImplementedError

    def apply_transpose(self, y):
        raise NotImplementedError

    def abs_row_sums(self):
        """``|K| 1_X``, shaped like the range."""
        raise NotImplementedError

    def abs_col_sums(self):
        """``|K|^T 1_Y``, shaped like the domain."""
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(x)


class MatrixOperator(LinearOperator):
    """Dense matrix acting on flat vectors; used for small reference systems."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        m, n = self.matrix.shape
        self.domain_shape = (n,)
        self.range_shape = (m,)

    def apply(self, x):
        _check_shape(x, self.domain_shape, "MatrixOperator.apply")
        return self.matrix @ x

    def apply_transpose(self, y):
        _check_shape(y, self.range_shape, "MatrixOperator.apply_transpose")
        return self.matrix.T @ y

    def abs_row_sums(self):
        return np.abs(self.matrix).sum(axis=1)

    def abs_col_sums(self):
        return np.abs(self.matrix).sum(axis=0)


class IdentityOperator(LinearOperator):
    def __init__(self, shape):
        self.domain_shape = self.range_shape = tuple(shape)

    def apply(self, x):
        _check_shape(x, self.domain_shape, "IdentityOperator.apply")
        return np.array(x, dtype=np.float64)

    apply_transpose = apply

    def abs_row_sums(self):
        return np.ones(self.range_shape)

    def abs_col_sums(self):
        return np.ones(self.domain_shape)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def gradient(u: np.ndarray) -> np.ndarray:
    """Forward differences with the ``-x`` closing tap at the far border.

    ``out[0]`` is the ``s`` difference (along columns, axis 1) and ``out[1]``
    the ``t`` difference (along rows, axis 0).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ShapeError(f"gradient expects an M x M image, got {u.shape}")
    out = np.empty((2,) + u.shape)
    out[0, :, :-1] = u[:, 1:] - u[:, :-1]
    out[0, :, -1] = -u[:, -1]
    out[1, :-1, :] = u[1:, :] - u[:-1, :]
    out[1, -1, :] = -u[-1, :]
    return out


def divergence(v: np.ndarray) -> np.ndarray:
    """Backward-difference divergence; ``-divergence`` is the transpose of
    :func:`gradient`. Entries outside the image border count as zero."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] != 2 or v.shape[1] != v.shape[2]:
        raise ShapeError(f"divergence expects a (2, M, M) field, got {v.shape}")
    vs, vt = v[0], v[1]
    out = vs.copy()
    out[:, 1:] -= vs[:, :-1]
    out += vt
    out[1:, :] -= vt[:-1, :]
    return out


def _check_lambda(lam):
    if not lam > 0:
        raise ValueError(f"scale must be positive, got {lam}")


def gradient_scaled(u, lam):
    _check_lambda(lam)
    return lam * gradient(u)


def divergence_scaled(v, lam):
    _check_lambda(lam)
    return lam * divergence(v)


class GradientOperator(LinearOperator):
    """``u -> scale * gradient(u)`` with transpose ``-scale * divergence``."""

    def __init__(self, M: int, scale: float = 1.0):
        _check_lambda(scale)
        self.M = int(M)
        self.scale = float(scale)
        self.domain_shape = (self.M, self.M)
        self.range_shape = (2, self.M, self.M)

    def apply(self, x):
        _check_shape(x, self.domain_shape, "GradientOperator.apply")
        g = gradient(x)
        return g if self.scale == 1.0 else self.scale * g

    def apply_transpose(self, y):
        _check_shape(y, self.range_shape, "GradientOperator.apply_transpose")
        d = divergence(y)
        return -d if self.scale == 1.0 else -self.scale * d

    def abs_row_sums(self):
        # Interior rows carry two unit taps, the closing border row one.
        rows = np.full(self.range_shape, 2.0)
        rows[0, :, -1] = 1.0
        rows[1, -1, :] = 1.0
        return self.scale * rows

    def abs_col_sums(self):
        M = self.M
        cols = np.full(self.domain_shape, 2.0)
        cols[:, 1:] += 1.0
        cols[1:, :] += 1.0
        return self.scale * cols


# ---------------------------------------------------------------------------
# Fan-beam projector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FanBeamGeometry:
    """Circular fan-beam scan with a flat detector.

    Lengths are in cm. The image is an ``M x M`` grid of side ``image_side``
    centred on the rotation axis; the source sits at
    ``source_radius * (cos a, sin a)`` and the detector centre on the opposite
    side at distance ``source_detector_distance`` from the source.
    """

    M: int
    n_views: int
    n_bins: int
    source_radius: float = 40.0
    source_detector_distance: float = 80.0
    bin_size: float = 0.02
    image_side: float | None = None
    angles: tuple | None = None

    def __post_init__(self):
        if self.M < 1 or self.n_views < 1 or self.n_bins < 1:
            raise ValueError("M, n_views and n_bins must be positive")
        if not (self.source_radius > 0 and self.source_detector_distance > 0):
            raise ValueError("source_radius and source_detector_distance must be positive")
        if not self.bin_size > 0:
            raise ValueError("bin_size must be positive")
        if self.image_side is None:
            object.__setattr__(self, "image_side", 2.0 * self.fov_radius)
        if not self.image_side > 0:
            raise ValueError("image_side must be positive")
        if self.angles is None:
            angles = tuple(2.0 * math.pi * k / self.n_views for k in range(self.n_views))
        else:
            angles = tuple(float(a) for a in self.angles)
        if len(angles) != self.n_views:
            raise ValueError(f"{len(angles)} angles given for {self.n_views} views")
        diffs = np.diff(angles)
        if np.any(diffs <= 0) or (len(angles) > 1 and angles[-1] - angles[0] >= 2 * math.pi):
            raise ValueError("angles must be strictly increasing within one turn")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def full_scale(cls, M=256):
        """60 views over 360 degrees, 512 bins of 200 microns, R=40, SDD=80."""
        return cls(M=M, n_views=60, n_bins=512, bin_size=0.02)

    @classmethod
    def desk(cls, M=64, n_views=60, n_bins=128):
        """Reduced scan with the full-scale detector width (10.24 cm)."""
        return cls(M=M, n_views=n_views, n_bins=n_bins, bin_size=10.24 / n_bins)

    @property
    def pixel_size(self) -> float:
        return self.image_side / self.M

    @property
    def fov_radius(self) -> float:
        """Radius of the circle covered by every view."""
        half = 0.5 * self.n_bins * self.bin_size
        return self.source_radius * math.sin(math.atan2(half, self.source_detector_distance))

    @property
    def image_shape(self):
        return (self.M, self.M)

    @property
    def sinogram_shape(self):
        return (self.n_views, self.n_bins)

    def bin_offsets(self) -> np.ndarray:
        return (np.arange(self.n_bins) - 0.5 * (self.n_bins - 1)) * self.bin_size

    def ray_endpoints(self, view: int):
        """Source point and bin-centre points ``(n_bins, 2)`` for one view."""
        a = self.angles[view]
        c, s = math.cos(a), math.sin(a)
        source = np.array([self.source_radius * c, self.source_radius * s])
        det_dist = self.source_detector_distance - self.source_radius
        centre = np.array([-det_dist * c, -det_dist * s])
        along = np.array([-s, c])
        bins = centre + self.bin_offsets()[:, None] * along
        return source, bins


def _view_chords(geom: FanBeamGeometry, view: int):
    """Line-intersection chords of all rays of one view.

    Returns ``(bin_index, pixel_index, length)`` arrays. Rays are traced
    parametrically from the source (alpha=0) to the bin centre (alpha=1);
    each segment between consecutive grid-plane crossings is assigned to the
    pixel containing its midpoint. A midpoint lying exactly on a grid line
    (ray running along a pixel edge) goes to the lower-index pixel.
    """
    M, d = geom.M, geom.pixel_size
    lo = -0.5 * geom.image_side
    source, ends = geom.ray_endpoints(view)
    direction = ends - source
    length = np.hypot(direction[:, 0], direction[:, 1])
    planes = lo + d * np.arange(M + 1)

    alphas = []
    for axis in (0, 1):
        comp = direction[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (planes[None, :] - source[axis]) / comp[:, None]
        a = np.where(comp[:, None] == 0.0, 0.0, a)
        alphas.append(a)
    n = direction.shape[0]
    alpha = np.concatenate(
        [np.zeros((n, 1)), np.ones((n, 1))] + alphas, axis=1
    )
    alpha = np.sort(np.clip(alpha, 0.0, 1.0), axis=1)
    seg = np.diff(alpha, axis=1)
    mid = 0.5 * (alpha[:, 1:] + alpha[:, :-1])

    x = source[0] + mid * direction[:, 0:1]
    y = source[1] + mid * direction[:, 1:2]
    ci = np.ceil((x - lo) / d).astype(np.int64) - 1
    rj = np.ceil((y - lo) / d).astype(np.int64) - 1
    keep = (seg > 0) & (ci >= 0) & (ci < M) & (rj >= 0) & (rj < M)
    bins = np.broadcast_to(np.arange(n)[:, None], seg.shape)[keep]
    pixels = (rj * M + ci)[keep]
    lengths = (seg * length[:, None])[keep]
    return bins, pixels, lengths


def system_matrix(geom: FanBeamGeometry) -> sp.csr_matrix:
    """Sparse line-intersection system matrix, shape ``(views*bins, M*M)``."""
    rows, cols, vals = [], [], []
    for view in range(geom.n_views):
        b, p, ell = _view_chords(geom, view)
        rows.append(view * geom.n_bins + b)
        cols.append(p)
        vals.append(ell)
    shape = (geom.n_views * geom.n_bins, geom.M * geom.M)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    ).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


class FanBeamProjector(LinearOperator):
    """Line-intersection projector ``A``; ``apply_transpose`` is ``A^T`` exactly.

    The system matrix is assembled once; the transpose is the same entries in
    CSC-to-CSR order, so the adjoint relation holds to rounding.
    """

    def __init__(self, geom: FanBeamGeometry):
        self.geom = geom
        self.domain_shape = geom.image_shape
        self.range_shape = geom.sinogram_shape

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return system_matrix(self.geom)

    @cached_property
    def _matrix_t(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def apply(self, x):
        _check_shape(x, self.domain_shape, "project")
        return (self.matrix @ np.ravel(x)).reshape(self.range_shape)

    def apply_transpose(self, y):
        _check_shape(y, self.range_shape, "backproject")
        return (self._matrix_t @ np.ravel(y)).reshape(self.domain_shape)

    def abs_row_sums(self):
        return np.asarray(abs(self.matrix).sum(axis=1)).reshape(self.range_shape)

    def abs_col_sums(self):
        return np.asarray(abs(self.matrix).sum(axis=0)).reshape(self.domain_shape)


_projector_cache: dict = {}


def get_projector(geom: FanBeamGeometry) -> FanBeamProjector:
    """Memoised :class:`FanBeamProjector` for ``geom``."""
    proj = _projector_cache.get(geom)
    if proj is None:
        proj = _projector_cache[geom] = FanBeamProjector(geom)
    return proj


def project(geom: FanBeamGeometry, u) -> np.ndarray:
    return get_projector(geom).apply(np.asarray(u, dtype=np.float64))


def backproject(geom: FanBeamGeometry, y) -> np.ndarray:
    return get_projector(geom).apply_transpose(np.asarray(y, dtype=np.float64))


class StackedOperator(LinearOperator):
    """``K = (A; grad)``: ``x -> (A x, grad x)``, ``(y, z) -> A^T y - div z``."""

    def __init__(self, projector: LinearOperator, grad: LinearOperator):
        if projector.domain_shape != grad.domain_shape:
            raise ShapeError("stacked operators must share a domain")
        self.projector = projector
        self.grad = grad
        self.domain_shape = projector.domain_shape
        self.range_shape = (projector.range_shape, grad.range_shape)

    def apply(self, x):
        return self.projector.apply(x), self.grad.apply(x)

    def apply_transpose(self, y):
        data, field_ = y
        return self.projector.apply_transpose(data) + self.grad.apply_transpose(field_)

    def abs_row_sums(self):
        return self.projector.abs_row_sums(), self.grad.abs_row_sums()

    def abs_col_sums(self):
        return self.projector.abs_col_sums() + self.grad.abs_col_sums()


def absolute_row_sums(K: LinearOperator):
    return K.abs_row_sums()


def absolute_col_sums(K: LinearOperator):
    return K.abs_col_sums()


def inverse_weights(sums):
    """``1 / sums`` with zero sums mapped to zero (the variable is frozen)."""
    if isinstance(sums, tuple):
        return tuple(inverse_weights(s) for s in sums)
    sums = np.asarray(sums, dtype=np.float64)
    out = np.zeros_like(sums)
    np.divide(1.0, sums, out=out, where=sums != 0)
    return out


# ---------------------------------------------------------------------------
# Power method
# ---------------------------------------------------------------------------


@dataclass
class PowerMethodResult:
    L: float
    iterations_used: int
    trace: list = field(default_factory=list)


def power_method(K: LinearOperator, x0=None, n_iter: int = 100, rtol: float = 1e-12,
                 seed: int = 0) -> PowerMethodResult:
    """Estimate ``||K||_2`` by power iteration on ``K^T K``.

    Each step computes ``x <- K^T K x``, normalises, and sets
    ``s = ||K x||``. For a stacked operator the norm of the tuple is
    ``sqrt(||A x||^2 + ||grad x||^2)``. Stops after ``n_iter`` steps or
    once the relative change in ``s`` drops below ``rtol``.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    if x0 is None:
        rng = np.random.Generator(np.random.Philox(seed))
        x = rng.standard_normal(K.domain_shape)
    else:
        x = np.array(x0, dtype=np.float64)
        _check_shape(x, K.domain_shape, "power_method start vector")
    if not np.any(x):
        raise ValueError("power method needs a nonzero start vector")

    trace = []
    s_prev = None
    for n in range(1, n_iter + 1):
        x = K.apply_transpose(K.apply(x))
        nx = norm2(x)
        if nx == 0.0 or not np.isfinite(nx):
            raise DegenerateOperatorError(f"K^T K x vanished at step {n}")
        x /= nx
        s = norm2(K.apply(x))
        trace.append(s)
        if s_prev is not None and abs(s - s_prev) <= rtol * s:
            break
        s_prev = s
    logger.debug("power method: L=%.12g after %d steps", s, n)
    return PowerMethodResult(L=s, iterations_used=n, trace=trace)
