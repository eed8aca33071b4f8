"""The model energies: quadratic building blocks and the three benchmarks."""

from .dualtv import DualTVModel, DualTVSpec, disk_datum, make_dualtv
from .obstacle import ObstacleSpec, make_obstacle
from .quadratic import QuadraticModel, make_quadratic_toy, make_random_spd_problem
from .slaplace import SLaplaceModel, SLaplaceSpec, make_slap

__all__ = [
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
]
