"""First-order primal-dual iteration and its CT instances.

Every instance is assembled the same way: pick ``K`` (the projector, or the
projector stacked on a gradient), the dual prox of ``F*`` and the primal
prox of ``G``, then hand them to :func:`run_generic_cp`. All iterates start
at zero and ``sigma = tau = step_safety / ||K||`` unless the instance is
preconditioned.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import diagnostics
from .convex import DataKind, DataTerm, pos, prox_tv_dual
from .operators import (
    FanBeamGeometry,
    GradientOperator,
    LinearOperator,
    StackedOperator,
    get_projector,
    inverse_weights,
    power_method,
)

logger = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """An iterate became non-finite."""


class Instance(str, enum.Enum):
    LS = "ls"
    LS_NONNEG = "ls_nonneg"
    L2TV = "l2tv"
    KLTV = "kltv"
    L1TV = "l1tv"
    CONSTRAINED_TV = "constrained_tv"
    PRECOND_KLTV = "precond_kltv"


@dataclass
class SolverConfig:
    instance: Instance = Instance.L2TV
    lam: float = 1e-4
    epsilon: Optional[float] = None
    max_iters: int = 1000
    gap_tol: float = 1e-5
    theta: float = 1.0
    step_safety: float = 1.0
    power_iters: int = 100
    nonneg_images: bool = False
    report_every: int = 10
    L: Optional[float] = None  # skip the power method when known

    def __post_init__(self):
        self.instance = Instance(self.instance)
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.gap_tol > 0:
            raise ValueError("gap_tol must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not 0.0 < self.step_safety <= 1.0:
            raise ValueError("step_safety must lie in (0, 1]")
        if self.report_every < 1:
            raise ValueError("report_every must be at least 1")
        if self.power_iters < 1:
            raise ValueError("power_iters must be at least 1")


@dataclass
class IterationReport:
    n: int
    primal: float
    dual: float
    gap: float
    residuals: dict = field(default_factory=dict)


@dataclass
class SolverState:
    u: np.ndarray
    u_bar: np.ndarray
    p: np.ndarray
    q: Optional[np.ndarray]
    n: int
    L: Optional[float]
    sigma: object
    tau: object


@dataclass
class CPResult:
    state: SolverState
    reports: list
    converged: bool
    gaps: np.ndarray
    dual_residuals: np.ndarray
    final: Optional[diagnostics.GapBreakdown]

    @property
    def image(self) -> np.ndarray:
        return self.state.u

    @property
    def n_iter(self) -> int:
        return self.state.n


# ---------------------------------------------------------------------------
# helpers for product-space (tuple) vectors
# ---------------------------------------------------------------------------


def _zeros(shape):
    if shape and isinstance(shape[0], tuple):
        return tuple(np.zeros(s) for s in shape)
    return np.zeros(shape)


def _step(y, sigma, v):
    """``y + sigma * v`` component-wise over tuples."""
    if isinstance(y, tuple):
        sig = sigma if isinstance(sigma, tuple) else (sigma,) * len(y)
        return tuple(a + s * b for a, s, b in zip(y, sig, v))
    return y + sigma * v


def _extrapolate(new, old, theta):
    if isinstance(new, tuple):
        return tuple(_extrapolate(a, b, theta) for a, b in zip(new, old))
    return new + theta * (new - old)


def _all_finite(*arrays) -> bool:
    for a in arrays:
        if isinstance(a, tuple):
            if not _all_finite(*a):
                return False
        elif a is not None and not np.isfinite(np.sum(a)):
            return False
    return True


def _dual_residual(gb: diagnostics.GapBreakdown) -> float:
    res = gb.residuals
    if "dual_feasibility" in res:
        return res["dual_feasibility"]
    return max(-res.get("dual_nonneg", 0.0), 0.0)


def run_generic_cp(
    K: LinearOperator,
    prox_dual: Callable,
    prox_primal: Callable,
    sigma,
    tau,
    *,
    theta: float = 1.0,
    max_iters: int = 1000,
    gap_fn: Optional[Callable] = None,
    gap_tol: float = 1e-5,
    report_every: int = 10,
    sink: Optional[Callable] = None,
) -> CPResult:
    """Run the basic primal-dual recursion from a zero start.

    ``prox_dual(y, sigma)`` and ``prox_primal(x, tau)`` are the resolvents of
    ``F*`` and ``G``. ``gap_fn(x, y, Kx, KTy)`` returns a
    :class:`~cpct.diagnostics.GapBreakdown`; when given, the run stops as
    soon as ``|gap| <= gap_tol``. Otherwise it runs ``max_iters`` steps.

    ``K x_bar`` is formed as ``K x_new + theta (K x_new - K x_old)`` so
    each step costs one forward and one transpose application.
    """
    x = _zeros(K.domain_shape)
    y = _zeros(K.range_shape)
    x_bar = x.copy()
    Kx = _zeros(K.range_shape)
    Kx_bar = Kx

    gaps, dres, reports = [], [], []
    gb = None
    converged = False

    def emit(n, gb):
        rep = IterationReport(n, gb.primal, gb.dual, gb.conditional_gap, dict(gb.residuals))
        reports.append(rep)
        if sink is not None:
            sink(rep)

    if gap_fn is not None:
        gb = gap_fn(x, y, Kx, K.apply_transpose(y))
        gaps.append(gb.conditional_gap)
        dres.append(_dual_residual(gb))
        emit(0, gb)

    n = 0
    while n < max_iters:
        y = prox_dual(_step(y, sigma, Kx_bar), sigma)
        KTy = K.apply_transpose(y)
        x_new = prox_primal(x - tau * KTy, tau)
        Kx_new = K.apply(x_new)
        Kx_bar = _extrapolate(Kx_new, Kx, theta)
        x_bar = x_new + theta * (x_new - x)
        x, Kx = x_new, Kx_new
        n += 1

        if not _all_finite(x, y):
            raise DivergenceError(f"non-finite iterate at iteration {n}")
        if gap_fn is None:
            continue
        gb = gap_fn(x, y, Kx, KTy)
        gap = gb.conditional_gap
        gaps.append(gap)
        dres.append(_dual_residual(gb))
        if not math.isfinite(gap):
            raise DivergenceError(f"non-finite gap at iteration {n}")
        converged = abs(gap) <= gap_tol
        if converged or n % report_every == 0 or n == max_iters:
            emit(n, gb)
        if converged:
            break

    if isinstance(y, tuple):
        p, q = y
    else:
        p, q = y, None
    state = SolverState(u=x, u_bar=x_bar, p=p, q=q, n=n, L=None, sigma=sigma, tau=tau)
    return CPResult(
        state=state,
        reports=reports,
        converged=converged,
        gaps=np.asarray(gaps),
        dual_residuals=np.asarray(dres),
        final=gb,
    )


# ---------------------------------------------------------------------------
# instance assembly
# ---------------------------------------------------------------------------


def _projector(geom) -> LinearOperator:
    if isinstance(geom, LinearOperator):
        return geom
    if isinstance(geom, FanBeamGeometry):
        return get_projector(geom)
    raise TypeError(f"expected a FanBeamGeometry or LinearOperator, got {type(geom)!r}")


def _make_config(config, **overrides) -> SolverConfig:
    if config is None:
        config = SolverConfig()
    return replace(config, **overrides) if overrides else config


def _primal_prox(nonneg):
    if nonneg:
        return lambda x, tau: pos(x)
    return lambda x, tau: x


def _scalar_steps(K, config):
    if config.L is not None:
        L = float(config.L)
    else:
        L = power_method(K, n_iter=config.power_iters).L
    step = config.step_safety / L
    return L, step, step


def _as_sinogram(g, A):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != tuple(A.range_shape):
        raise ValueError(f"data shape {g.shape} does not match operator range {A.range_shape}")
    return g


def _finish(result, L):
    result.state.L = L
    return result


def solve_ls(g, geom, config=None, *, sink=None, nonneg=None, **overrides) -> CPResult:
    """Least squares ``min ||A u - g||^2 / 2``.

    ``p <- (p + sigma (A u_bar - g)) / (1 + sigma)``, ``u <- u - tau A^T p``.
    """
    config = _make_config(config, **overrides)
    if nonneg is None:
        nonneg = config.instance is Instance.LS_NONNEG or config.nonneg_images
    A = _projector(geom)
    g = _as_sinogram(g, A)
    data = DataTerm(DataKind.LEAST_SQUARES, g)
    L, sigma, tau = _scalar_steps(A, config)

    def gap_fn(u, p, Au, ATp):
        return diagnostics.gap_ls(u, p, g, A, Au=Au, ATp=ATp, nonneg=nonneg)

    result = run_generic_cp(
        A, data.prox_dual, _primal_prox(nonneg), sigma, tau,
        theta=config.theta, max_iters=config.max_iters, gap_fn=gap_fn,
        gap_tol=config.gap_tol, report_every=config.report_every, sink=sink,
    )
    return _finish(result, L)


def solve_ls_nonneg(g, geom, config=None, *, sink=None, **overrides) -> CPResult:
    """Least squares with ``u >= 0``: the ``u`` update is wrapped in ``pos``."""
    return solve_ls(g, geom, config, sink=sink, nonneg=True, **overrides)


def _solve_tv(data: DataTerm, A, M, tv_weight, config, sink, gap_builder, absorb=False):
    """Shared driver for the ``K = (A; grad)`` instances.

    With ``absorb`` the TV weight is folded into the gradient and the dual
    threshold becomes 1; otherwise the threshold is ``tv_weight``.
    """
    if absorb:
        grad = GradientOperator(M, scale=tv_weight)
        bound = 1.0
    else:
        grad = GradientOperator(M)
        bound = tv_weight
    K = StackedOperator(A, grad)
    L, sigma, tau = _scalar_steps(K, config)

    def prox_dual(y, sig):
        p, q = y
        s1 = sig[0] if isinstance(sig, tuple) else sig
        return data.prox_dual(p, s1), prox_tv_dual(q, bound)

    def gap_fn(u, y, Ku, KTy):
        p, q = y
        Au, grad_u = Ku
        return gap_builder(u, p, q, Au, grad_u, KTy)

    result = run_generic_cp(
        K, prox_dual, _primal_prox(config.nonneg_images), sigma, tau,
        theta=config.theta, max_iters=config.max_iters, gap_fn=gap_fn,
        gap_tol=config.gap_tol, report_every=config.report_every, sink=sink,
    )
    return _finish(result, L)


def _tv_setup(g, geom, lam, config, overrides, need_lam=True):
    config = _make_config(config, **overrides)
    if lam is None:
        lam = config.lam
    if need_lam and not lam > 0:
        raise ValueError("lambda must be positive")
    A = _projector(geom)
    g = _as_sinogram(g, A)
    M = A.domain_shape[0]
    return config, lam, A, g, M


def solve_l2tv(g, geom, lam=None, config=None, *, sink=None, **overrides) -> CPResult:
    """``min ||A u - g||^2 / 2 + lam TV(u)``."""
    config, lam, A, g, M = _tv_setup(g, geom, lam, config, overrides)
    data = DataTerm(DataKind.LEAST_SQUARES, g)
    nonneg = config.nonneg_images

    def gaps(u, p, q, Au, grad_u, KTy):
        return diagnostics.gap_l2tv(u, p, q, g, A, lam, Au=Au, grad_u=grad_u, KTy=KTy,
                                    nonneg=nonneg)

    return _solve_tv(data, A, M, lam, config, sink, gaps)


def solve_kltv(g, geom, lam=None, config=None, *, sink=None, absorb_lambda=False,
               **overrides) -> CPResult:
    """``min KL(A u, g) + lam TV(u)``; ``g`` must be non-negative.

    With ``absorb_lambda`` the same problem is solved with ``lam`` folded
    into the gradient (dual bound ``|q| <= 1``), matching the operator
    layout of :func:`solve_precond_kltv`.
    """
    config, lam, A, g, M = _tv_setup(g, geom, lam, config, overrides)
    data = DataTerm(DataKind.KULLBACK_LEIBLER, g)
    nonneg = config.nonneg_images
    scale = lam if absorb_lambda else 1.0

    def gaps(u, p, q, Au, grad_u, KTy):
        return diagnostics.gap_kltv(u, p, q, g, A, lam, Au=Au, grad_u=grad_u, KTy=KTy,
                                    nonneg=nonneg, tv_scale=scale)

    return _solve_tv(data, A, M, lam, config, sink, gaps, absorb=absorb_lambda)


def solve_l1tv(g, geom, lam=None, config=None, *, sink=None, **overrides) -> CPResult:
    """``min ||A u - g||_1 + lam TV(u)``."""
    config, lam, A, g, M = _tv_setup(g, geom, lam, config, overrides)
    data = DataTerm(DataKind.L1, g)
    nonneg = config.nonneg_images

    def gaps(u, p, q, Au, grad_u, KTy):
        return diagnostics.gap_l1tv(u, p, q, g, A, lam, Au=Au, grad_u=grad_u, KTy=KTy,
                                    nonneg=nonneg)

    return _solve_tv(data, A, M, lam, config, sink, gaps)


def solve_constrained_tv(g, geom, epsilon=None, config=None, *, sink=None, **overrides) -> CPResult:
    """``min TV(u)`` subject to ``||A u - g||_2 <= epsilon``."""
    config, _, A, g, M = _tv_setup(g, geom, 1.0, config, overrides)
    if epsilon is None:
        epsilon = config.epsilon
    if epsilon is None or not epsilon > 0:
        raise ValueError("epsilon must be positive")
    data = DataTerm(DataKind.BALL, g, epsilon=epsilon)
    nonneg = config.nonneg_images

    def gaps(u, p, q, Au, grad_u, KTy):
        return diagnostics.gap_constrained_tv(u, p, q, g, A, epsilon, Au=Au, grad_u=grad_u,
                                              KTy=KTy, nonneg=nonneg)

    return _solve_tv(data, A, M, 1.0, config, sink, gaps)


def precond_weights(A: LinearOperator, grad: LinearOperator):
    """Diagonal steps from absolute row/column sums of ``K = (A; grad)``.

    Returns ``((Sigma_1, Sigma_2), T)``; rows or columns with zero sum get a
    zero step, freezing that variable.
    """
    K = StackedOperator(A, grad)
    return inverse_weights(K.abs_row_sums()), inverse_weights(K.abs_col_sums())


def solve_precond_kltv(g, geom, lam=None, config=None, *, sink=None, weights=None,
                       **overrides) -> CPResult:
    """KL + TV with diagonal preconditioning; no operator norm is needed.

    ``lam`` is absorbed into the gradient so the dual TV threshold is 1.
    ``weights`` may override ``((Sigma_1, Sigma_2), T)``.
    """
    config, lam, A, g, M = _tv_setup(g, geom, lam, config, overrides)
    data = DataTerm(DataKind.KULLBACK_LEIBLER, g)
    grad = GradientOperator(M, scale=lam)
    K = StackedOperator(A, grad)
    sigma, tau = weights if weights is not None else precond_weights(A, grad)
    nonneg = config.nonneg_images

    def prox_dual(y, sig):
        p, q = y
        return data.prox_dual(p, sig[0]), prox_tv_dual(q, 1.0)

    def gap_fn(u, y, Ku, KTy):
        p, q = y
        Au, grad_u = Ku
        return diagnostics.gap_kltv(u, p, q, g, A, lam, Au=Au, grad_u=grad_u, KTy=KTy,
                                    nonneg=nonneg, tv_scale=lam)

    result = run_generic_cp(
        K, prox_dual, _primal_prox(nonneg), sigma, tau,
        theta=config.theta, max_iters=config.max_iters, gap_fn=gap_fn,
        gap_tol=config.gap_tol, report_every=config.report_every, sink=sink,
    )
    return _finish(result, None)


_DISPATCH = {
    Instance.LS: lambda g, geom, c, sink: solve_ls(g, geom, c, sink=sink, nonneg=c.nonneg_images),
    Instance.LS_NONNEG: lambda g, geom, c, sink: solve_ls_nonneg(g, geom, c, sink=sink),
    Instance.L2TV: lambda g, geom, c, sink: solve_l2tv(g, geom, c.lam, c, sink=sink),
    Instance.KLTV: lambda g, geom, c, sink: solve_kltv(g, geom, c.lam, c, sink=sink),
    Instance.L1TV: lambda g, geom, c, sink: solve_l1tv(g, geom, c.lam, c, sink=sink),
    Instance.CONSTRAINED_TV: lambda g, geom, c, sink: solve_constrained_tv(g, geom, c.epsilon, c, sink=sink),
    Instance.PRECOND_KLTV: lambda g, geom, c, sink: solve_precond_kltv(g, geom, c.lam, c, sink=sink),
}


def solve(g, geom, config: SolverConfig, *, sink=None) -> CPResult:
    """Run the instance named by ``config.instance``."""
    return _DISPATCH[Instance(config.instance)](g, geom, config, sink)
