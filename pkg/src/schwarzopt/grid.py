"""Structured meshes on the unit square and the discrete operators on them.

The mesh has m x m nodes, spacing h = 1/(m-1), and each cell is split into
two right triangles along the SW-NE diagonal.  Node (i, j) sits at
(x, y) = (j*h, i*h) and has flat index i*m + j.  Piecewise-linear elements
on this triangulation give the classic 5-point stiffness stencil
[4; -1, -1, -1, -1] (scaled so h drops out).

The total-variation operators act on pixel grids with forward differences
truncated at the far edges; tv_div is the negative adjoint of tv_grad.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, NumericalError

__all__ = [
    "StructuredMesh",
    "build_mesh",
    "assemble_p1_stiffness",
    "assemble_load",
    "slap_energy_grad",
    "tv_grad",
    "tv_div",
    "InterpolationOperator",
    "build_coarse_interpolation",
]

# Per-triangle basis gradients, scaled by h (the true gradient is B/h).
# Kind 0 covers (SW, SE, NE), kind 1 covers (SW, NE, NW).
_B_LOWER = np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]])
_B_UPPER = np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]])

# Element stiffness matrices (h-independent): (h^2/2) * (B/h)^T (B/h).
_K_LOWER = 0.5 * (_B_LOWER.T @ _B_LOWER)
_K_UPPER = 0.5 * (_B_UPPER.T @ _B_UPPER)


class StructuredMesh:
    """Uniform triangulated grid on [0, 1]^2.

    Attributes
    ----------
    m : nodes per side
    h : mesh size 1/(m-1)
    n_nodes : m*m
    boundary_mask : bool array over nodes, True on the Dirichlet boundary
    tri_nodes : (n_triangles, 3) int array of node indices
    tri_kind : (n_triangles,) int array, 0 = lower (SW,SE,NE), 1 = upper (SW,NE,NW)
    """

    def __init__(self, m: int):
        if m < 3:
            raise ConfigError(f"mesh needs at least 3 nodes per side, got m={m}")
        self.m = m
        self.h = 1.0 / (m - 1)
        self.n_nodes = m * m

        rows, cols = np.divmod(np.arange(self.n_nodes), m)
        self.boundary_mask = (rows == 0) | (rows == m - 1) | (cols == 0) | (cols == m - 1)

        ci, cj = np.meshgrid(np.arange(m - 1), np.arange(m - 1), indexing="ij")
        sw = (ci * m + cj).ravel()
        se = sw + 1
        nw = sw + m
        ne = nw + 1
        lower = np.stack([sw, se, ne], axis=1)
        upper = np.stack([sw, ne, nw], axis=1)
        self.tri_nodes = np.concatenate([lower, upper]).astype(np.int64)
        self.tri_kind = np.concatenate(
            [np.zeros(len(lower), dtype=np.int64), np.ones(len(upper), dtype=np.int64)]
        )

    @property
    def n_triangles(self) -> int:
        return self.tri_nodes.shape[0]

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) arrays over all nodes in flat order."""
        rows, cols = np.divmod(np.arange(self.n_nodes), self.m)
        return cols * self.h, rows * self.h

    def __repr__(self):
        return f"StructuredMesh(m={self.m})"


def build_mesh(m: int) -> StructuredMesh:
    return StructuredMesh(m)


def assemble_p1_stiffness(mesh: StructuredMesh) -> sp.csr_matrix:
    """Stiffness matrix for -Laplace with homogeneous Dirichlet rows.

    Boundary rows and columns are replaced by identity so that vectors
    vanishing on the boundary see exactly the interior operator.
    """
    tri = mesh.tri_nodes
    n = mesh.n_nodes
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    elem = np.where(mesh.tri_kind[:, None] == 0, _K_LOWER.ravel(), _K_UPPER.ravel())
    vals = elem.ravel()

    keep = mesh.interior_mask[rows] & mesh.interior_mask[cols]
    bdry = np.flatnonzero(mesh.boundary_mask)
    rows = np.concatenate([rows[keep], bdry])
    cols = np.concatenate([cols[keep], bdry])
    vals = np.concatenate([vals[keep], np.ones(bdry.size)])

    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K


def assemble_load(mesh: StructuredMesh, f) -> np.ndarray:
    """Lumped-mass load vector: h^2 * f(node) at interior nodes, 0 on the boundary.

    `f` is a constant or a callable f(x, y) accepting arrays.
    """
    x, y = mesh.node_coords()
    if callable(f):
        values = np.asarray(f(x, y), dtype=np.float64)
        if values.shape != (mesh.n_nodes,):
            raise DimensionError("forcing callable must return one value per node")
    else:
        values = np.full(mesh.n_nodes, float(f))
    b = mesh.h**2 * values
    b[mesh.boundary_mask] = 0.0
    return b


def _triangle_gradients(mesh: StructuredMesh, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle constant gradient components (gx, gy)."""
    ut = u[mesh.tri_nodes]
    lower = mesh.tri_kind == 0
    gx = np.where(lower, ut[:, 1] - ut[:, 0], ut[:, 1] - ut[:, 2]) / mesh.h
    gy = np.where(lower, ut[:, 2] - ut[:, 1], ut[:, 2] - ut[:, 0]) / mesh.h
    return gx, gy


def slap_energy_grad(mesh: StructuredMesh, s: float, u: np.ndarray) -> tuple[float, np.ndarray]:
    """(1/s) * integral of |grad u|^s and its nodal gradient, boundary rows zeroed.

    The gradient is piecewise constant, so the integral is an exact sum of
    (h^2/2) * |g_T|^s / s over triangles.  The load term is handled by the
    caller.
    """
    if s <= 1.0:
        raise ConfigError(f"exponent must exceed 1, got s={s}")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (mesh.n_nodes,):
        raise DimensionError(f"expected {mesh.n_nodes} nodal values, got shape {u.shape}")
    gx, gy = _triangle_gradients(mesh, u)
    norm2 = gx * gx + gy * gy
    area = 0.5 * mesh.h**2

    energy = (area / s) * np.sum(norm2 ** (s / 2.0))
    if not np.isfinite(energy):
        raise NumericalError("p-Laplace energy overflowed; iterate too large")

    # d/du_i of sum (area/s)|g|^s = sum area * |g|^{s-2} * g . dg/du_i
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norm2 > 0.0, norm2 ** ((s - 2.0) / 2.0), 0.0)
    fx = area * factor * gx / mesh.h
    fy = area * factor * gy / mesh.h

    lower = mesh.tri_kind == 0
    # Contributions follow the difference stencils in _triangle_gradients.
    c0 = np.where(lower, -fx, -fy)
    c1 = np.where(lower, fx - fy, fx)
    c2 = np.where(lower, fy, fy - fx)

    grad = np.zeros(mesh.n_nodes)
    np.add.at(grad, mesh.tri_nodes[:, 0], c0)
    np.add.at(grad, mesh.tri_nodes[:, 1], c1)
    np.add.at(grad, mesh.tri_nodes[:, 2], c2)
    grad[mesh.boundary_mask] = 0.0
    if not np.isfinite(grad).all():
        raise NumericalError("p-Laplace gradient overflowed")
    return float(energy), grad


def tv_grad(u: np.ndarray) -> np.ndarray:
    """Forward-difference gradient of an image; shape (2, H, W).

    Component 0 differences along columns (x), component 1 along rows (y);
    the last column/row of each component is structurally zero.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {u.shape}")
    g = np.zeros((2,) + u.shape)
    g[0, :, :-1] = u[:, 1:] - u[:, :-1]
    g[1, :-1, :] = u[1:, :] - u[:-1, :]
    return g


def tv_div(p: np.ndarray) -> np.ndarray:
    """Discrete divergence, the negative adjoint of tv_grad.

    <tv_grad(u), p> = -<u, tv_div(p)> for all u, p.  The last column of
    p[0] and last row of p[1] never enter (they pair with the truncated
    differences).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != 2:
        raise DimensionError(f"expected shape (2, H, W), got {p.shape}")
    d = np.zeros(p.shape[1:])
    d[:, :-1] += p[0, :, :-1]
    d[:, 1:] -= p[0, :, :-1]
    d[:-1, :] += p[1, :-1, :]
    d[1:, :] -= p[1, :-1, :]
    return d


class InterpolationOperator:
    """Sparse P1 interpolation from a coarse nodal grid to a fine one."""

    def __init__(self, matrix: sp.csr_matrix, fine_m: int, coarse_m: int):
        self.matrix = matrix
        self.fine_m = fine_m
        self.coarse_m = coarse_m
        self._interior = None

    def interior_matrix(self) -> sp.csr_matrix:
        """Columns restricted to coarse interior nodes (the coarse dofs)."""
        if self._interior is None:
            coarse = StructuredMesh(self.coarse_m)
            cols = np.flatnonzero(coarse.interior_mask)
            self._interior = self.matrix[:, cols].tocsr()
            self._interior.sort_indices()
        return self._interior


def build_coarse_interpolation(fine: StructuredMesh, coarse: StructuredMesh) -> InterpolationOperator:
    """Nodal interpolation matrix for nested meshes sharing the triangulation.

    Each fine node gets the P1 basis values of the coarse triangle containing
    it (same SW-NE split), so entries are nonnegative, interior rows sum to 1,
    and coarse-mesh linear functions are reproduced exactly.  Fine boundary
    rows are zero: prolonged corrections honor the Dirichlet condition.
    """
    if (fine.m - 1) % (coarse.m - 1) != 0:
        raise ConfigError(f"mesh sizes not nested: fine m={fine.m}, coarse m={coarse.m}")
    r = (fine.m - 1) // (coarse.m - 1)
    if r < 2:
        raise ConfigError("coarse mesh must be strictly coarser than the fine mesh")

    mc = coarse.m
    idx = np.flatnonzero(fine.interior_mask)
    fi, fj = np.divmod(idx, fine.m)
    ci = np.minimum(fi // r, mc - 2)
    cj = np.minimum(fj // r, mc - 2)
    eta = (fi - ci * r) / r
    xi = (fj - cj * r) / r

    sw = ci * mc + cj
    se = sw + 1
    nw = sw + mc
    ne = nw + 1

    lower = xi >= eta
    cols = np.where(lower[:, None], np.stack([sw, se, ne], 1), np.stack([sw, ne, nw], 1))
    w_lower = np.stack([1.0 - xi, xi - eta, eta], 1)
    w_upper = np.stack([1.0 - eta, xi, eta - xi], 1)
    weights = np.where(lower[:, None], w_lower, w_upper)

    rows = np.repeat(idx, 3)
    keep = weights.ravel() != 0.0
    P = sp.coo_matrix(
        (weights.ravel()[keep], (rows[keep], cols.ravel()[keep])),
        shape=(fine.n_nodes, coarse.n_nodes),
    ).tocsr()
    P.sum_duplicates()
    P.sort_indices()
    return InterpolationOperator(P, fine.m, coarse.m)
