"""Power-law diffusion with damped-Newton local solvers.

F(u) = (1/s) int |grad u|^s - int f u on P1 elements with zero boundary
values, G identically 0.  Around a point v, subspace k minimizes the
surrogate

    phi(w) = <F'(v), P w> + omega * D_F(v + P w, v),

which for omega = 1 is exactly E(v + P w) - E(v).  Since phi(0) = 0 and
the Armijo line search keeps phi nonincreasing, every returned correction
is an energy descent step, and for omega >= 1 the Bregman term makes
E(v + P w) <= E(v) as well.

Subdomain solves assemble dense Hessians over the triangles meeting the
patch; the coarse solve works through the interpolation operator against
a global sparse Hessian.  Triangles with a nearly flat gradient make the
Hessian singular (any s > 2), so |grad u|^{s-2} is evaluated with a 1e-12
shift inside the norm and the Newton solve falls back to an escalating
ridge when the factorization still fails, which turns the direction into
a scaled gradient step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..core import EnergyModel, ProblemInstance, as_coefficients
from ..decomposition import Decomposition, add_coarse_space, build_overlapping_subdomains
from ..errors import ConfigError, DimensionError, LocalSolveError, NumericalError
from ..grid import (
    _K_LOWER,
    _K_UPPER,
    _triangle_gradients,
    assemble_load,
    build_coarse_interpolation,
    build_mesh,
    slap_energy_grad,
)

__all__ = ["SLaplaceSpec", "SLaplaceModel", "make_slap"]

_ARMIJO_C = 1e-4
_ARMIJO_FACTOR = 0.5
_MAX_HALVINGS = 60
# Shift inside |grad u|^{s-2} when assembling Hessians (gradient stays exact).
_HESS_SHIFT = 1e-12
# Newton steps longer than this times (1 + |w|) are clipped; with a singular
# start (all-flat gradients, ridge-damped solve) the raw direction can be
# arbitrarily long while the useful step is O(1).
_STEP_CAP = 100.0


def _hessian_factors(s: float, norm2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle coefficients of K_elem and of the rank-one gradient term."""
    shifted = norm2 + _HESS_SHIFT
    f1 = shifted ** ((s - 2.0) / 2.0)
    f2 = (s - 2.0) * shifted ** ((s - 4.0) / 2.0)
    return f1, f2


def _element_hessians(
    lower: np.ndarray, gx: np.ndarray, gy: np.ndarray, kmats: np.ndarray, s: float
) -> np.ndarray:
    """Stack of 3x3 element Hessians of (area/s)|g|^s at the current gradients.

    Writing c for the per-vertex stencil applied to (gx, gy) (the same
    combinations that appear in the energy gradient), the element block is
    f1 * K_elem + (f2/2) * c c^T.
    """
    c0 = np.where(lower, -gx, -gy)
    c1 = np.where(lower, gx - gy, gx)
    c2 = np.where(lower, gy, gy - gx)
    c = np.stack([c0, c1, c2], axis=1)
    f1, f2 = _hessian_factors(s, gx * gx + gy * gy)
    return f1[:, None, None] * kmats + 0.5 * f2[:, None, None] * (c[:, :, None] * c[:, None, :])


def _global_hessian(mesh, s: float, u: np.ndarray) -> sp.csr_matrix:
    """Sparse Hessian of the power-law term over all triangles.

    Boundary rows are not cleared; the only consumer sandwiches the matrix
    with an interpolation operator whose boundary rows are zero.
    """
    gx, gy = _triangle_gradients(mesh, u)
    lower = mesh.tri_kind == 0
    kmats = np.where(lower[:, None, None], _K_LOWER, _K_UPPER)
    blocks = _element_hessians(lower, gx, gy, kmats, s)
    rows = np.repeat(mesh.tri_nodes, 3, axis=1).ravel()
    cols = np.tile(mesh.tri_nodes, (1, 3)).ravel()
    H = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    H.sum_duplicates()
    return H


def _ridge_solve(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve H d = rhs for symmetric positive semidefinite H.

    Tries a plain Cholesky first, then adds an escalating multiple of the
    identity.  Large ridges degrade gracefully into a scaled gradient step.
    """
    scale = float(np.max(np.abs(np.diag(H))))
    if scale == 0.0 or not math.isfinite(scale):
        scale = 1.0
    lam = 0.0
    eye = np.eye(H.shape[0])
    for _ in range(24):
        try:
            factor = cho_factor(H + lam * eye if lam else H, check_finite=False)
            d = cho_solve(factor, rhs, check_finite=False)
            if np.isfinite(d).all():
                return d
        except LinAlgError:
            pass
        lam = 1e-14 * scale if lam == 0.0 else 100.0 * lam
    raise NumericalError("ridge ladder exhausted while solving a local Newton system")


@dataclass
class SLaplaceSpec:
    m: int = 65
    coarse_m: int = 9
    delta_layers: int = 4
    s: float = 4.0
    f: float = 1.0
    newton_tol: float = 1e-8
    max_newton: int = 100

    def validate(self):
        if self.s <= 1.0:
            raise ConfigError(f"exponent must exceed 1, got s={self.s}")
        if self.coarse_m < 3:
            raise ConfigError(f"coarse mesh needs at least 3 nodes per side, got {self.coarse_m}")
        if self.newton_tol <= 0 or self.max_newton < 1:
            raise ConfigError("Newton tolerance and iteration cap must be positive")


class SLaplaceModel(EnergyModel):
    """E(u) = (1/s) int |grad u|^s - b.u with exact Newton local solvers."""

    def __init__(self, mesh, s: float, load: np.ndarray, decomposition: Decomposition,
                 newton_tol: float = 1e-8, max_newton: int = 100):
        if s <= 1.0:
            raise ConfigError(f"exponent must exceed 1, got s={s}")
        if decomposition.n_dof != mesh.n_nodes:
            raise DimensionError("decomposition does not match the mesh")
        self.mesh = mesh
        self.s = float(s)
        self.b = as_coefficients(load, mesh.n_nodes)
        self.decomposition = decomposition
        self.n_dof = mesh.n_nodes
        self.newton_tol = float(newton_tol)
        self.max_newton = int(max_newton)
        self._locals = [self._build_local(sub) for sub in decomposition.subspaces]

    @property
    def free_mask(self) -> np.ndarray:
        return self.mesh.interior_mask

    def eval_F(self, u: np.ndarray) -> float:
        energy, _ = slap_energy_grad(self.mesh, self.s, u)
        return energy - float(np.dot(self.b, u))

    def grad_F(self, u: np.ndarray) -> np.ndarray:
        _, grad = slap_energy_grad(self.mesh, self.s, u)
        return grad - self.b

    def eval_G(self, u: np.ndarray) -> float:
        # Boundary values are pinned by construction: no subspace touches
        # them and every starting point satisfies them, so nothing to check.
        return 0.0

    def _build_local(self, sub) -> dict:
        if sub.kind == "matrix":
            return {"kind": "matrix", "P": sub.matrix, "dim": sub.dim}
        mesh = self.mesh
        in_patch = np.zeros(mesh.n_nodes, dtype=bool)
        in_patch[sub.indices] = True
        touched = np.flatnonzero(in_patch[mesh.tri_nodes].any(axis=1))
        slot = np.full(mesh.n_nodes, sub.dim, dtype=np.int64)
        slot[sub.indices] = np.arange(sub.dim)
        tri_global = mesh.tri_nodes[touched]
        lower = mesh.tri_kind[touched] == 0
        return {
            "kind": "patch",
            "dim": sub.dim,
            "tri_global": tri_global,
            "slots": slot[tri_global],
            "lower": lower,
            "kmats": np.where(lower[:, None, None], _K_LOWER, _K_UPPER),
            "b_loc": self.b[sub.indices],
        }

    # Evaluation on the triangles meeting one patch.  Slot `dim` is a
    # scratch entry absorbing contributions to frozen out-of-patch vertices.
    def _patch_energy_grad(self, cache, u_tri: np.ndarray) -> tuple[float, np.ndarray]:
        h, s = self.mesh.h, self.s
        lower = cache["lower"]
        gx = np.where(lower, u_tri[:, 1] - u_tri[:, 0], u_tri[:, 1] - u_tri[:, 2]) / h
        gy = np.where(lower, u_tri[:, 2] - u_tri[:, 1], u_tri[:, 2] - u_tri[:, 0]) / h
        norm2 = gx * gx + gy * gy
        area = 0.5 * h * h
        energy = (area / s) * float(np.sum(norm2 ** (s / 2.0)))
        if not math.isfinite(energy):
            raise NumericalError("patch energy overflowed during a line search")

        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(norm2 > 0.0, norm2 ** ((s - 2.0) / 2.0), 0.0)
        fx = area * factor * gx / h
        fy = area * factor * gy / h
        c0 = np.where(lower, -fx, -fy)
        c1 = np.where(lower, fx - fy, fx)
        c2 = np.where(lower, fy, fy - fx)
        grad = np.zeros(cache["dim"] + 1)
        slots = cache["slots"]
        np.add.at(grad, slots[:, 0], c0)
        np.add.at(grad, slots[:, 1], c1)
        np.add.at(grad, slots[:, 2], c2)
        return energy, grad[: cache["dim"]]

    def _patch_hessian(self, cache, u_tri: np.ndarray) -> np.ndarray:
        h = self.mesh.h
        lower = cache["lower"]
        gx = np.where(lower, u_tri[:, 1] - u_tri[:, 0], u_tri[:, 1] - u_tri[:, 2]) / h
        gy = np.where(lower, u_tri[:, 2] - u_tri[:, 1], u_tri[:, 2] - u_tri[:, 0]) / h
        blocks = _element_hessians(lower, gx, gy, cache["kmats"], self.s)
        dim = cache["dim"]
        H = np.zeros((dim + 1, dim + 1))
        slots = cache["slots"]
        for i in range(3):
            for j in range(3):
                np.add.at(H, (slots[:, i], slots[:, j]), blocks[:, i, j])
        return H[:dim, :dim]

    def local_solve(self, k: int, v: np.ndarray, omega: float) -> np.ndarray:
        cache = self._locals[k]
        if cache["kind"] == "matrix":
            return self._solve_coarse(k, cache, v, omega)
        return self._solve_patch(k, cache, v, omega)

    def _solve_patch(self, k: int, cache, v: np.ndarray, omega: float) -> np.ndarray:
        u0_tri = v[cache["tri_global"]]
        s0, gs0 = self._patch_energy_grad(cache, u0_tri)
        const = (1.0 - omega) * gs0 - cache["b_loc"]

        def value_grad(w):
            u_tri = u0_tri + np.append(w, 0.0)[cache["slots"]]
            energy, grad = self._patch_energy_grad(cache, u_tri)
            return float(const @ w) + omega * (energy - s0), const + omega * grad

        def hessian(w):
            u_tri = u0_tri + np.append(w, 0.0)[cache["slots"]]
            return omega * self._patch_hessian(cache, u_tri)

        return self._newton(k, cache["dim"], value_grad, hessian)

    def _solve_coarse(self, k: int, cache, v: np.ndarray, omega: float) -> np.ndarray:
        P = cache["P"]
        s0, gs0 = slap_energy_grad(self.mesh, self.s, v)
        const = np.asarray(P.T @ ((1.0 - omega) * gs0 - self.b))

        def value_grad(w):
            u = v + P @ w
            energy, grad = slap_energy_grad(self.mesh, self.s, u)
            return float(const @ w) + omega * (energy - s0), const + omega * np.asarray(P.T @ grad)

        def hessian(w):
            H = _global_hessian(self.mesh, self.s, v + P @ w)
            return omega * np.asarray((P.T @ (H @ P)).todense())

        return self._newton(k, cache["dim"], value_grad, hessian)

    def _newton(self, k: int, dim: int, value_grad, hessian) -> np.ndarray:
        """Damped Newton on the local surrogate, started at w = 0.

        Stops when the gradient drops to newton_tol relative to its starting
        norm.  A stalled line search at an iterate whose gradient has at
        least reached sqrt(newton_tol) counts as converged to working
        precision; anything else raises.
        """
        w = np.zeros(dim)
        phi, g = value_grad(w)
        gn0 = float(np.linalg.norm(g))
        threshold = self.newton_tol * (1.0 + gn0)
        for _ in range(self.max_newton):
            gn = float(np.linalg.norm(g))
            if gn <= threshold:
                return w
            d = _ridge_solve(hessian(w), -g)
            cap = _STEP_CAP * (1.0 + float(np.linalg.norm(w)))
            dn = float(np.linalg.norm(d))
            if dn > cap:
                d *= cap / dn
            slope = float(g @ d)
            if slope >= 0.0:
                break
            t = 1.0
            accepted = False
            for _ in range(_MAX_HALVINGS):
                try:
                    phi_t, g_t = value_grad(w + t * d)
                except NumericalError:
                    t *= _ARMIJO_FACTOR
                    continue
                if phi_t <= phi + _ARMIJO_C * t * slope:
                    accepted = True
                    break
                t *= _ARMIJO_FACTOR
            if not accepted:
                break
            w = w + t * d
            phi, g = phi_t, g_t
        if float(np.linalg.norm(g)) <= math.sqrt(self.newton_tol) * (1.0 + gn0):
            return w
        raise LocalSolveError(k, "local Newton solve did not reach its gradient tolerance")


def make_slap(spec: SLaplaceSpec = SLaplaceSpec()) -> ProblemInstance:
    spec.validate()
    mesh = build_mesh(spec.m)
    coarse = build_mesh(spec.coarse_m)
    b = assemble_load(mesh, spec.f)

    H = 1.0 / (spec.coarse_m - 1)
    subs = build_overlapping_subdomains(mesh, H, spec.delta_layers)
    subs = add_coarse_space(subs, build_coarse_interpolation(mesh, coarse))
    decomp = Decomposition.build(
        subs, mesh.n_nodes, coverage_mask=mesh.interior_mask, has_coarse=True
    )

    model = SLaplaceModel(
        mesh, spec.s, b, decomp, newton_tol=spec.newton_tol, max_newton=spec.max_newton
    )
    digest = hashlib.sha256()
    digest.update(f"slap-m{spec.m}-H{spec.coarse_m}-d{spec.delta_layers}-s{spec.s}".encode())
    digest.update(b.tobytes())
    return ProblemInstance(
        model=model,
        decomposition=decomp,
        initial_iterate=np.zeros(mesh.n_nodes),
        label=f"slap-m{spec.m}",
        fingerprint=f"slap-{digest.hexdigest()[:16]}",
        meta={"mesh": mesh, "spec": spec},
    )
