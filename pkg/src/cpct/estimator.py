"""scikit-learn style wrapper around the reconstruction solvers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .convex import pos
from .operators import FanBeamGeometry, StackedOperator, GradientOperator, get_projector, power_method
from .solvers import Instance, SolverConfig, solve

_TV_INSTANCES = {Instance.L2TV, Instance.KLTV, Instance.L1TV, Instance.CONSTRAINED_TV}
_KL_INSTANCES = {Instance.KLTV, Instance.PRECOND_KLTV}


class CPReconstructor(TransformerMixin, BaseEstimator):
    """Reconstruct images from fan-beam sinograms with the primal-dual (CP) solver.

    ``X`` is a single sinogram of shape ``(n_views, n_bins)``. :meth:`fit`
    runs the solver on it and stores the image in ``image_``;
    :meth:`transform` reconstructs a new sinogram with the same geometry,
    reusing the operator norm found during fitting.

    Parameters
    ----------
    geometry : FanBeamGeometry, optional
        Scan geometry. Defaults to ``FanBeamGeometry.desk()``.
    instance : str
        One of ``ls``, ``ls_nonneg``, ``l2tv``, ``kltv``, ``l1tv``,
        ``constrained_tv``, ``precond_kltv``.
    lam, epsilon : float
        TV weight and data-ball radius (constrained TV only).
    clip_negative_data : bool
        Replace negative sinogram entries with zero before a KL solve. Noisy
        log data can dip slightly below zero on rays that miss the object.
    """

    def __init__(self, geometry=None, instance="l2tv", lam=1e-4, epsilon=None, max_iters=1000,
                 gap_tol=1e-5, step_safety=1.0, nonneg_images=False, report_every=10,
                 clip_negative_data=True):
        self.geometry = geometry
        self.instance = instance
        self.lam = lam
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.gap_tol = gap_tol
        self.step_safety = step_safety
        self.nonneg_images = nonneg_images
        self.report_every = report_every
        self.clip_negative_data = clip_negative_data

    def _geometry(self):
        geom = self.geometry if self.geometry is not None else FanBeamGeometry.desk()
        if not isinstance(geom, FanBeamGeometry):
            raise TypeError("geometry must be a FanBeamGeometry")
        return geom

    def _validate(self, X, geom):
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape != geom.sinogram_shape:
            raise ValueError(f"sinogram shape {X.shape} does not match geometry "
                             f"{geom.sinogram_shape}")
        return X

    def _config(self, L):
        return SolverConfig(
            instance=self.instance, lam=self.lam, epsilon=self.epsilon,
            max_iters=self.max_iters, gap_tol=self.gap_tol, step_safety=self.step_safety,
            nonneg_images=self.nonneg_images, report_every=self.report_every, L=L,
        )

    def _norm(self, geom, instance):
        if instance is Instance.PRECOND_KLTV:
            return None
        A = get_projector(geom)
        K = StackedOperator(A, GradientOperator(geom.M)) if instance in _TV_INSTANCES else A
        return power_method(K).L

    def _run(self, X, geom, L):
        instance = Instance(self.instance)
        if instance in _KL_INSTANCES and self.clip_negative_data:
            X = pos(X)
        return solve(X, geom, self._config(L))

    def fit(self, X, y=None):
        """Reconstruct ``X`` and keep the result."""
        geom = self._geometry()
        X = self._validate(X, geom)
        instance = Instance(self.instance)
        self._config(None)  # validate hyper-parameters before any heavy work
        self.L_ = self._norm(geom, instance)
        result = self._run(X, geom, self.L_)
        self.result_ = result
        self.image_ = result.image
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        self.gap_ = float(result.gaps[-1]) if len(result.gaps) else float("nan")
        self.geometry_ = geom
        return self

    def transform(self, X):
        """Reconstruct another sinogram from the fitted geometry."""
        check_is_fitted(self, "image_")
        X = self._validate(X, self.geometry_)
        return self._run(X, self.geometry_, self.L_).image

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).image_
