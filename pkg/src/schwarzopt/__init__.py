"""Additive Schwarz solvers for composite convex energies.

Overlapping-subspace correction methods for min F(u) + G(u): plain scaled
steps, a two-sided backtracking step-size search, and FISTA-style momentum
with adaptive restart.  Ships three discretized model problems (power-law
diffusion, the membrane obstacle problem, dual total-variation denoising)
and a CLI that records convergence traces.
"""

from .algorithms import (
    BacktrackResult,
    Correction,
    IterationRecord,
    SolverConfig,
    Trace,
    apply_step,
    backtracking_search,
    compute_local_corrections,
    momentum_update,
    restart_test,
    run_backtracking,
    run_momentum,
    run_plain,
    stop_criterion,
)
from .core import (
    EnergyModel,
    ProblemInstance,
    as_coefficients,
    bregman_distance,
    eval_energy,
    gradient_check,
    inner_product,
)
from .decomposition import Decomposition, Subspace
from .errors import (
    BacktrackDiverged,
    ConfigError,
    DimensionError,
    LocalSolveError,
    NumericalError,
    SchwarzError,
)
from .kernels import available_backends, backend_name, set_backend
from .problems import (
    DualTVModel,
    DualTVSpec,
    ObstacleSpec,
    QuadraticModel,
    SLaplaceModel,
    SLaplaceSpec,
    disk_datum,
    make_dualtv,
    make_obstacle,
    make_quadratic_toy,
    make_random_spd_problem,
    make_slap,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "EnergyModel",
    "ProblemInstance",
    "as_coefficients",
    "eval_energy",
    "bregman_distance",
    "inner_product",
    "gradient_check",
    "Decomposition",
    "Subspace",
    "SolverConfig",
    "Trace",
    "IterationRecord",
    "Correction",
    "BacktrackResult",
    "compute_local_corrections",
    "apply_step",
    "stop_criterion",
    "backtracking_search",
    "momentum_update",
    "restart_test",
    "run_plain",
    "run_backtracking",
    "run_momentum",
    "QuadraticModel",
    "make_quadratic_toy",
    "make_random_spd_problem",
    "ObstacleSpec",
    "make_obstacle",
    "SLaplaceSpec",
    "SLaplaceModel",
    "make_slap",
    "DualTVSpec",
    "DualTVModel",
    "disk_datum",
    "make_dualtv",
    "backend_name",
    "available_backends",
    "set_backend",
    "SchwarzError",
    "ConfigError",
    "DimensionError",
    "NumericalError",
    "LocalSolveError",
    "BacktrackDiverged",
]
