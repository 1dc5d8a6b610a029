"""First-order primal-dual reconstruction for fan-beam CT."""

from .convex import DataKind, DataTerm, pos
from .estimator import CPReconstructor
from .operators import (
    FanBeamGeometry,
    FanBeamProjector,
    GradientOperator,
    IdentityOperator,
    MatrixOperator,
    StackedOperator,
    divergence,
    get_projector,
    gradient,
    power_method,
)
from .simulation import NoiseSpec, PhantomSpec, add_poisson_noise, make_phantom, simulate_sinogram
from .solvers import (
    CPResult,
    Instance,
    SolverConfig,
    run_generic_cp,
    solve,
    solve_constrained_tv,
    solve_kltv,
    solve_l1tv,
    solve_l2tv,
    solve_ls,
    solve_ls_nonneg,
    solve_precond_kltv,
)
from .spaces import FieldKind, inner_product, read_field, write_field

__version__ = "0.1.0"

__all__ = [
    "CPReconstructor", "CPResult", "DataKind", "DataTerm", "FanBeamGeometry", "FanBeamProjector",
    "FieldKind", "GradientOperator", "IdentityOperator", "Instance", "MatrixOperator",
    "NoiseSpec", "PhantomSpec", "SolverConfig", "StackedOperator", "add_poisson_noise",
    "divergence", "get_projector", "gradient", "inner_product", "make_phantom", "pos",
    "power_method", "read_field", "run_generic_cp", "simulate_sinogram", "solve",
    "solve_constrained_tv", "solve_kltv", "solve_l1tv", "solve_l2tv", "solve_ls",
    "solve_ls_nonneg", "solve_precond_kltv", "write_field",
]
