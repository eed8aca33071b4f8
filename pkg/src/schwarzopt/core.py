"""Energy models and the operations every solver builds on.

An energy is E(u) = F(u) + G(u) with F convex and differentiable and G
convex, proper, and lower semicontinuous (typically an indicator of a
feasible set, possibly identically zero).  Iterates are dense float64
vectors ("coefficients"); G may evaluate to +inf, F never does.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError

__all__ = [
    "EnergyModel",
    "ProblemInstance",
    "as_coefficients",
    "eval_energy",
    "bregman_distance",
    "inner_product",
    "gradient_check",
]


def as_coefficients(values, n_dof: int | None = None) -> np.ndarray:
    """Coerce to a 1-D float64 array, checking finiteness and length."""
    u = np.ascontiguousarray(values, dtype=np.float64)
    if u.ndim != 1:
        raise DimensionError(f"coefficient vector must be 1-D, got shape {u.shape}")
    if n_dof is not None and u.shape[0] != n_dof:
        raise DimensionError(f"expected {n_dof} coefficients, got {u.shape[0]}")
    if not np.isfinite(u).all():
        raise NumericalError("coefficient vector contains non-finite entries")
    return u


class EnergyModel(ABC):
    """Composite energy F + G together with its subspace solvers.

    Concrete models own a Decomposition and expose one local solve per
    subspace.  `n_dof` is the length of the coefficient vectors; `free_mask`
    marks the degrees of freedom the energy actually depends on (boundary
    values pinned by the discretization are excluded from derivative checks).
    """

    n_dof: int

    @abstractmethod
    def eval_F(self, u: np.ndarray) -> float:
        """Smooth part; always finite on finite input."""

    @abstractmethod
    def grad_F(self, u: np.ndarray) -> np.ndarray:
        """Gradient of F; same length as u."""

    @abstractmethod
    def eval_G(self, u: np.ndarray) -> float:
        """Nonsmooth part; 0.0 or +inf for the models shipped here."""

    @abstractmethod
    def local_solve(self, k: int, v: np.ndarray, omega: float) -> np.ndarray:
        """Minimize the local surrogate on subspace k around the point v.

        Returns the correction w in subspace coordinates.  With omega = 1 and
        the exact solvers used throughout, this minimizes E(v + prolong(w)).
        """

    def clip_to_domain(self, u: np.ndarray) -> np.ndarray:
        """Nearest point of dom G; the identity when G is finite everywhere.

        Models whose G is an indicator override this with the Euclidean
        projection onto the feasible set.  The momentum driver clips its
        overrelaxed point through here, so entries already inside the set
        must come back bit for bit.
        """
        return u

    @property
    def free_mask(self) -> np.ndarray:
        """Boolean mask of dofs that participate in the energy."""
        return np.ones(self.n_dof, dtype=bool)


@dataclass
class ProblemInstance:
    """A model, its decomposition, and a starting point, bundled for drivers."""

    model: EnergyModel
    decomposition: "object"
    initial_iterate: np.ndarray
    label: str
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.initial_iterate = as_coefficients(self.initial_iterate, self.model.n_dof)
        if not math.isfinite(eval_energy(self.model, self.initial_iterate)):
            raise NumericalError(
                f"initial iterate of '{self.label}' has infinite energy (infeasible start)"
            )


def eval_energy(model: EnergyModel, u: np.ndarray) -> float:
    """E(u) = F(u) + G(u); +inf exactly when G(u) = +inf."""
    u = as_coefficients(u, model.n_dof)
    g = model.eval_G(u)
    if not g < math.inf:
        return math.inf
    value = model.eval_F(u) + g
    if math.isnan(value):
        raise NumericalError("energy evaluated to NaN")
    return float(value)


def bregman_distance(model: EnergyModel, u: np.ndarray, v: np.ndarray) -> float:
    """D_F(u, v) = F(u) - F(v) - <F'(v), u - v>; nonnegative by convexity."""
    u = as_coefficients(u, model.n_dof)
    v = as_coefficients(v, model.n_dof)
    return float(model.eval_F(u) - model.eval_F(v) - np.dot(model.grad_F(v), u - v))


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean inner product with a length check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch in inner product: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def gradient_check(model: EnergyModel, u: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between grad_F and central differences of eval_F.

    Probes a fixed, deterministic sample of up to 24 free coordinate
    directions (boundary dofs pinned by the discretization are skipped,
    since F is defined on the constrained space).
    """
    u = as_coefficients(u, model.n_dof)
    free = np.flatnonzero(model.free_mask)
    if free.size == 0:
        raise DimensionError("model has no free degrees of freedom")
    n_sample = min(free.size, 24)
    sample = free[np.unique(np.round(np.linspace(0, free.size - 1, n_sample)).astype(int))]
    grad = model.grad_F(u)
    worst = 0.0
    probe = u.copy()
    for i in sample:
        probe[i] = u[i] + h
        f_plus = model.eval_F(probe)
        probe[i] = u[i] - h
        f_minus = model.eval_F(probe)
        probe[i] = u[i]
        fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(fd - grad[i]) / (1.0 + abs(grad[i])))
    return worst
