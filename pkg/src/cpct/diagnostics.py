"""Primal/dual objectives, conditional primal-dual gaps and residuals.

The conditional gap is the primal objective minus the dual objective with
every indicator term dropped. Each dropped indicator is reported as a signed
residual instead, so a run can be judged on the gap together with how close
the constraints are to holding.

Residual sign conventions (the target is in brackets):

* ``dual_feasibility``  ``||div q - A^T p||_inf``                    [-> 0]
* ``dual_nonneg``       ``min(A^T p - div q)``                        [>= 0]
* ``image_nonneg``      ``min(u)``                                    [>= 0]
* ``data_nonneg``       ``min(A u)``                                  [>= 0]
* ``p_upper``           ``max(p) - 1``                                [<= 0]
* ``p_box``             ``max|p| - 1``                                [<= 0]
* ``q_bound``           ``max|q| - bound``                            [<= 0]
* ``data_ball``         ``max(||A u - g||_2 - eps, 0)``               [-> 0]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convex import LOG_FLOOR, conjugate_ball, conjugate_kl, conjugate_l1, conjugate_ls
from .operators import divergence, gradient
from .spaces import magnitude


@dataclass
class GapBreakdown:
    primal_terms: dict = field(default_factory=dict)
    dual_terms: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)

    @property
    def primal(self) -> float:
        return float(sum(self.primal_terms.values()))

    @property
    def dual(self) -> float:
        return float(sum(self.dual_terms.values()))

    @property
    def conditional_gap(self) -> float:
        return self.primal - self.dual


def tv_seminorm(u=None, grad_u=None) -> float:
    """Isotropic TV, the l1 norm of the gradient-magnitude image."""
    if grad_u is None:
        grad_u = gradient(u)
    return float(magnitude(grad_u).sum())


def kl_divergence(Au, g) -> float:
    """``sum(Au - g + g ln g - g ln Au)`` with ``0 ln 0 = 0``.

    ``Au`` is floored at ``LOG_FLOOR`` inside the logarithm; use the
    ``data_nonneg`` residual to see whether that floor was hit.
    """
    Au = np.ravel(Au)
    g = np.ravel(g)
    safe = np.maximum(Au, LOG_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(g > 0, g * (np.log(np.where(g > 0, g, 1.0)) - np.log(safe)), 0.0)
    return float(np.sum(Au - g) + np.sum(log_term))


def _residual_terms(KTy, nonneg):
    if nonneg:
        return {"dual_nonneg": float(np.min(KTy))}
    return {"dual_feasibility": float(np.max(np.abs(KTy)))}


def gap_ls(u, p, g, A, *, Au=None, ATp=None, nonneg=False) -> GapBreakdown:
    """Least squares, optionally with ``u >= 0``.

    The primal term carries the factor 1/2 of the objective being minimised.
    """
    if Au is None:
        Au = A.apply(u)
    if ATp is None:
        ATp = A.apply_transpose(p)
    r = np.ravel(Au - g)
    gb = GapBreakdown(
        primal_terms={"data": 0.5 * float(r @ r)},
        dual_terms={"data": -conjugate_ls(p, g)},
        residuals=_residual_terms(ATp, nonneg),
    )
    if nonneg:
        gb.residuals["image_nonneg"] = float(np.min(u))
    return gb


def _tv_parts(u, p, q, A, lam, Au, grad_u, KTy, nonneg, tv_scale=1.0):
    """Shared bookkeeping for the TV instances.

    ``grad_u`` may come from a scaled gradient; ``tv_scale`` is the factor
    already absorbed into it, so the TV term is ``lam / tv_scale * |grad_u|``.
    """
    if Au is None:
        Au = A.apply(u)
    if grad_u is None:
        grad_u = tv_scale * gradient(u)
    if KTy is None:
        KTy = A.apply_transpose(p) - tv_scale * divergence(q)
    bound = lam / tv_scale
    tv = (lam / tv_scale) * tv_seminorm(grad_u=grad_u)
    res = _residual_terms(KTy, nonneg)
    res["q_bound"] = float(np.max(magnitude(q))) - bound
    if nonneg:
        res["image_nonneg"] = float(np.min(u))
    return Au, tv, res


def gap_l2tv(u, p, q, g, A, lam, *, Au=None, grad_u=None, KTy=None, nonneg=False) -> GapBreakdown:
    Au, tv, res = _tv_parts(u, p, q, A, lam, Au, grad_u, KTy, nonneg)
    r = np.ravel(Au - g)
    return GapBreakdown(
        primal_terms={"data": 0.5 * float(r @ r), "tv": tv},
        dual_terms={"data": -conjugate_ls(p, g)},
        residuals=res,
    )


def gap_kltv(u, p, q, g, A, lam, *, Au=None, grad_u=None, KTy=None, nonneg=False,
             tv_scale=1.0) -> GapBreakdown:
    """KL + TV. With ``tv_scale = lam`` the duals are those of the
    lambda-absorbed formulation (``|q| <= 1``)."""
    Au, tv, res = _tv_parts(u, p, q, A, lam, Au, grad_u, KTy, nonneg, tv_scale)
    res["data_nonneg"] = float(np.min(Au))
    res["p_upper"] = float(np.max(p)) - 1.0
    return GapBreakdown(
        primal_terms={"data": kl_divergence(Au, g), "tv": tv},
        dual_terms={"data": -conjugate_kl(p, g)},
        residuals=res,
    )


def gap_l1tv(u, p, q, g, A, lam, *, Au=None, grad_u=None, KTy=None, nonneg=False) -> GapBreakdown:
    Au, tv, res = _tv_parts(u, p, q, A, lam, Au, grad_u, KTy, nonneg)
    res["p_box"] = float(np.max(np.abs(p))) - 1.0
    return GapBreakdown(
        primal_terms={"data": float(np.abs(Au - g).sum()), "tv": tv},
        dual_terms={"data": -conjugate_l1(p, g)},
        residuals=res,
    )


def gap_constrained_tv(u, p, q, g, A, epsilon, *, Au=None, grad_u=None, KTy=None,
                       nonneg=False) -> GapBreakdown:
    Au, tv, res = _tv_parts(u, p, q, A, 1.0, Au, grad_u, KTy, nonneg)
    res["data_ball"] = max(float(np.linalg.norm(np.ravel(Au - g))) - epsilon, 0.0)
    return GapBreakdown(
        primal_terms={"tv": tv},
        dual_terms={"data": -conjugate_ball(p, g, epsilon)},
        residuals=res,
    )
