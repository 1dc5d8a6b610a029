"""Proximal mappings and convex conjugates used by the solver instances.

The dual-side proxes all have the form ``prox_sigma[F*](y)`` and accept a
scalar ``sigma`` or an array of per-component steps (diagonal
preconditioning). Indicator functions never appear as infinities: they are
either projections inside a prox or feasibility residuals reported by
:mod:`cpct.diagnostics`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .spaces import magnitude

_EPS = np.finfo(np.float64).eps

# Floor applied to logarithm arguments when *reporting* KL values.
LOG_FLOOR = 1e-300


def _check_sigma(sigma):
    if not np.all(np.asarray(sigma) > 0):
        raise ValueError("step sizes must be positive")


def pos(x):
    """Component-wise ``max(x, 0)``."""
    return np.maximum(x, 0.0)


def prox_ls_dual(y, g, sigma):
    """Prox of ``F*(p) = ||p||^2/2 + <p, g>``: ``(y - sigma g) / (1 + sigma)``."""
    return (y - sigma * g) / (1.0 + sigma)


def prox_kl_dual(y, g, sigma):
    """Prox of the KL conjugate ``-sum g ln(1 - p)`` (+ indicator of ``p <= 1``).

    Closed form ``(1 + y - sqrt((y - 1)^2 + 4 sigma g)) / 2`` taking the root
    with ``1 - p >= 0``. The distance ``1 - p`` is evaluated in a
    cancellation-free way so the bound ``p <= 1`` holds exactly in floating
    point.
    """
    g = np.asarray(g, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("KL data must be non-negative")
    a = 1.0 - y
    c = 4.0 * sigma * g
    r = np.sqrt(a * a + c)
    # 1 - p = (a + r) / 2; for a < 0 rewrite as 2 sigma g / (r - a).
    with np.errstate(divide="ignore", invalid="ignore"):
        neg = 0.5 * c / (r - a)
    w = np.where(a >= 0, 0.5 * (a + r), neg)
    return 1.0 - w


def prox_l1_dual(y, g, sigma):
    """Prox of ``delta_Box(1)(p) + <p, g>``: clamp ``y - sigma g`` to [-1, 1]."""
    return np.clip(y - sigma * g, -1.0, 1.0)


def prox_ball_dual(y, g, epsilon, sigma):
    """Prox of ``epsilon ||p||_2 + <p, g>``.

    Block soft-thresholding ``(1 - sigma eps / ||w||)_+ w`` with
    ``w = y - sigma g``; the minimiser lies on the segment from 0 to ``w``.
    ``sigma`` must be a scalar here (the ball couples all components).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    _check_sigma(sigma)
    w = y - sigma * g
    nw = float(np.linalg.norm(np.ravel(w)))
    thresh = sigma * epsilon
    if nw <= thresh:
        return np.zeros_like(w)
    return (1.0 - thresh / nw) * w


def prox_tv_dual(z, lam):
    """Project every spatial vector of ``z`` onto the disc of radius ``lam``.

    Vectors with ``|z_i| <= lam`` are returned untouched; longer ones are
    rescaled to length ``lam``. Independent of the step size.
    """
    if not lam > 0:
        raise ValueError("TV threshold must be positive")
    z = np.asarray(z, dtype=np.float64)
    mag = magnitude(z)
    over = mag > lam
    if not over.any():
        return z.copy()
    factor = np.ones_like(mag)
    factor[over] = lam / mag[over]
    out = z * factor
    # Rescaling can overshoot by an ulp; pull those back inside.
    still = magnitude(out) > lam
    if still.any():
        out[:, still] *= 1.0 - 4 * _EPS
    return out


# ---------------------------------------------------------------------------
# Conjugates (finite parts)
# ---------------------------------------------------------------------------


class DataKind(str, enum.Enum):
    LEAST_SQUARES = "ls"
    KULLBACK_LEIBLER = "kl"
    L1 = "l1"
    BALL = "ball"


def conjugate_ls(p, g) -> float:
    p = np.ravel(p)
    return 0.5 * float(p @ p) + float(p @ np.ravel(g))


def conjugate_kl(p, g) -> float:
    """``sum(-g ln pos(1 - p))`` with the log argument floored at ``LOG_FLOOR``.

    The indicator ``1 - p >= 0`` is not included.
    """
    g = np.ravel(g)
    arg = np.maximum(1.0 - np.ravel(p), LOG_FLOOR)
    return -float(np.sum(np.where(g > 0, g * np.log(arg), 0.0)))


def conjugate_l1(p, g) -> float:
    return float(np.ravel(p) @ np.ravel(g))


def conjugate_ball(p, g, epsilon) -> float:
    p = np.ravel(p)
    return epsilon * float(np.linalg.norm(p)) + float(p @ np.ravel(g))


def conjugate_value(kind, p, g, epsilon=None) -> float:
    """Finite part of the data-term conjugate ``F1*(p)`` for ``kind``."""
    kind = DataKind(kind)
    if kind is DataKind.LEAST_SQUARES:
        return conjugate_ls(p, g)
    if kind is DataKind.KULLBACK_LEIBLER:
        return conjugate_kl(p, g)
    if kind is DataKind.L1:
        return conjugate_l1(p, g)
    if epsilon is None:
        raise ValueError("ball conjugate needs epsilon")
    return conjugate_ball(p, g, epsilon)


@dataclass(frozen=True)
class DataTerm:
    """Data fidelity ``F1`` together with its measured sinogram."""

    kind: DataKind
    g: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DataKind(self.kind))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=np.float64))
        if self.kind is DataKind.KULLBACK_LEIBLER and np.any(self.g < 0):
            raise ValueError("KL data must be non-negative")
        if self.kind is DataKind.BALL and not self.epsilon > 0:
            raise ValueError("ball constraint needs epsilon > 0")

    def prox_dual(self, y, sigma):
        if self.kind is DataKind.LEAST_SQUARES:
            return prox_ls_dual(y, self.g, sigma)
        if self.kind is DataKind.KULLBACK_LEIBLER:
            return prox_kl_dual(y, self.g, sigma)
        if self.kind is DataKind.L1:
            return prox_l1_dual(y, self.g, sigma)
        return prox_ball_dual(y, self.g, self.epsilon, sigma)

    def conjugate(self, p) -> float:
        return conjugate_value(self.kind, p, self.g, self.epsilon)


# ---------------------------------------------------------------------------
# Test oracle
# ---------------------------------------------------------------------------


def legendre_1d_oracle(f, grid, x):
    """Discrete Legendre transform ``max_k (x * grid[k] - f(grid[k]))``.

    ``f`` is a callable or an array of samples on ``grid``; samples may be
    ``+inf`` to encode an indicator. ``x`` may be a scalar or an array.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    fv = np.asarray(f(grid) if callable(f) else f, dtype=np.float64)
    if fv.shape != grid.shape:
        raise ValueError("samples of f must match the grid")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty(flat.size)
    step = max(1, 4_000_000 // grid.size)
    for i in range(0, flat.size, step):
        out[i:i + step] = (np.multiply.outer(flat[i:i + step], grid) - fv).max(axis=-1)
    return out.reshape(x.shape) if x.ndim else float(out[0])
