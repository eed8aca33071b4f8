"""Quadratic energies F(u) = 1/2 u^T A u - b^T u with optional lower bounds.

G is identically zero without bounds, otherwise the indicator of
{u : u >= lower} (entries of `lower` may be -inf to leave dofs free).
Unbounded subspace problems are solved exactly by a dense factorization;
bounded ones go through the projected-gradient kernel.  This class backs
the small coupled toys used throughout the tests and, with a stiffness
matrix and an obstacle, the membrane contact problem.
"""

from __future__ import annotations

import hashlib

import numpy as np
import scipy.sparse as sp

from .. import kernels
from ..core import EnergyModel, ProblemInstance
from ..decomposition import Decomposition, Subspace, coupling_adjacency
from ..errors import ConfigError, LocalSolveError, NumericalError

__all__ = ["QuadraticModel", "make_quadratic_toy", "make_random_spd_problem"]

FEAS_TOL = 1e-10


class QuadraticModel(EnergyModel):
    def __init__(
        self,
        A,
        b,
        decomposition: Decomposition,
        lower: np.ndarray | None = None,
        qp_tol: float = 1e-8,
        qp_max_iter: int = 10000,
    ):
        self.A = sp.csr_matrix(A)
        self.A.sort_indices()
        self.b = np.asarray(b, dtype=np.float64)
        self.n_dof = self.b.shape[0]
        if self.A.shape != (self.n_dof, self.n_dof):
            raise ConfigError("A and b sizes do not match")
        self.decomposition = decomposition
        self.lower = None if lower is None else np.asarray(lower, dtype=np.float64)
        if self.lower is None:
            self._feas_threshold = None
        else:
            thr = self.lower.copy()
            finite = np.isfinite(thr)
            thr[finite] -= FEAS_TOL * (1.0 + np.abs(thr[finite]))
            self._feas_threshold = thr
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        self._locals = [self._build_local(sub) for sub in decomposition.subspaces]

    def _build_local(self, sub: Subspace) -> dict:
        if sub.kind == "injection":
            A_loc = self.A[sub.indices][:, sub.indices].tocsr()
        else:
            A_loc = (sub.matrix.T @ (self.A @ sub.matrix)).tocsr()
            if self.lower is not None and sub.matrix.data.size and sub.matrix.data.min() < 0:
                raise ConfigError(
                    "bounded problems need a nonnegative coarse prolongation "
                    "(monotone restriction of the bounds requires it)"
                )
        A_loc.sort_indices()
        cache = {"A": A_loc, "dense": None, "supports": None}
        if self.lower is None:
            cache["dense"] = A_loc.toarray()
        elif sub.kind == "matrix":
            csc = sub.matrix.tocsc()
            cache["supports"] = [
                csc.indices[csc.indptr[c] : csc.indptr[c + 1]] for c in range(sub.dim)
            ]
        return cache

    def eval_F(self, u):
        return 0.5 * float(u @ (self.A @ u)) - float(self.b @ u)

    def grad_F(self, u):
        return self.A @ u - self.b

    def eval_G(self, u):
        if self.lower is None:
            return 0.0
        if np.all(u >= self._feas_threshold):
            return 0.0
        return float("inf")

    def clip_to_domain(self, u):
        if self.lower is None:
            return u
        return np.maximum(u, self.lower)

    def local_solve(self, k, v, omega):
        sub = self.decomposition.subspaces[k]
        cache = self._locals[k]
        g0 = sub.restrict_grad(self.grad_F(v))
        if self.lower is None:
            if sub.dim == 1:
                return np.array([-g0[0] / (omega * cache["dense"][0, 0])])
            return np.linalg.solve(omega * cache["dense"], -g0)

        if sub.kind == "injection":
            lb = self.lower[sub.indices] - v[sub.indices]
        else:
            diff = self.lower - v
            lb = np.array(
                [diff[rows].max() if rows.size else -np.inf for rows in cache["supports"]]
            )
        w, iters, gm0, gm, converged = kernels.box_qp(
            cache["A"], g0, lb, omega, self.qp_tol, self.qp_max_iter
        )
        if not converged:
            raise LocalSolveError(k, f"projected gradient hit {iters} iterations (gm={gm:.2e})")
        if not np.isfinite(w).all():
            raise NumericalError(f"local QP on subspace {k} returned non-finite values")
        return w


def _fingerprint(*arrays, tag: str) -> str:
    digest = hashlib.sha256(tag.encode())
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return f"{tag}-{digest.hexdigest()[:16]}"


def _coordinate_decomposition(A: sp.csr_matrix) -> Decomposition:
    n = A.shape[0]
    subs = [Subspace(n, indices=[i]) for i in range(n)]
    return Decomposition.build(subs, n, adjacency=coupling_adjacency(subs, A))


def make_quadratic_toy() -> ProblemInstance:
    """Two coupled dofs, one coordinate subspace each.

    A = [[2, 1], [1, 2]], b = (1, 1): minimizer (1/3, 1/3) with energy -1/3.
    The coupling-aware coloring gives 2 colors, so tau0 = 0.5.
    """
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, 1.0])
    decomp = _coordinate_decomposition(sp.csr_matrix(A))
    model = QuadraticModel(A, b, decomp)
    return ProblemInstance(
        model=model,
        decomposition=decomp,
        initial_iterate=np.zeros(2),
        label="quad-toy",
        fingerprint=_fingerprint(A, b, tag="quad-toy"),
    )


def make_random_spd_problem(n: int, rng: np.random.Generator, lower=None) -> ProblemInstance:
    """Random well-conditioned SPD quadratic on coordinate subspaces."""
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.standard_normal(n)
    decomp = _coordinate_decomposition(sp.csr_matrix(A))
    model = QuadraticModel(A, b, decomp, lower=lower)
    start = np.zeros(n)
    if lower is not None:
        start = np.maximum(start, np.where(np.isfinite(lower), lower, 0.0))
    return ProblemInstance(
        model=model,
        decomposition=decomp,
        initial_iterate=start,
        label=f"quad-random-{n}",
        fingerprint=_fingerprint(A, b, tag=f"quad-random-{n}"),
    )
