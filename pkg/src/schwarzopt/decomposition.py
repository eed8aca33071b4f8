"""Overlapping space decompositions: V = sum of prolonged subspaces.

A subspace is either an injection (a set of global dof indices) or a sparse
prolongation matrix (the coarse space).  The damping floor tau0 comes from a
greedy coloring of the interaction graph: subspaces that interact must get
different colors, and tau0 = 1 / (number of colors).

By default two subspaces interact when their index sets intersect.  Energies
whose couplings reach across disjoint index sets (a coupled quadratic on
coordinate subspaces, for instance) should color by `coupling_adjacency`
instead; the adaptive step-size search is the safety net whenever the
intersection graph understates the true interaction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError
from .grid import InterpolationOperator, StructuredMesh

__all__ = [
    "Subspace",
    "Decomposition",
    "build_overlapping_subdomains",
    "build_pixel_subdomains",
    "add_coarse_space",
    "overlap_adjacency",
    "coupling_adjacency",
    "greedy_coloring",
    "tau0_from_coloring",
    "prolong",
    "restrict_grad",
]


class Subspace:
    """One summand of the decomposition.

    Injection subspaces store sorted global indices; matrix subspaces store a
    prolongation with one column per local dof (indices then hold the support
    rows, which drive the interaction graph and coverage checks).
    """

    def __init__(self, n_dof: int, indices=None, matrix: sp.csr_matrix | None = None, block=None):
        self.n_dof = int(n_dof)
        self.block = block  # optional (r0, r1, c0, c1) pixel rectangle
        if (indices is None) == (matrix is None):
            raise ConfigError("a subspace takes either indices or a matrix, not both")
        if matrix is None:
            idx = np.asarray(indices, dtype=np.int64)
            if idx.ndim != 1 or idx.size == 0:
                raise ConfigError("subspace index set must be a nonempty 1-D array")
            if np.any(np.diff(idx) <= 0):
                raise ConfigError("subspace indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= n_dof:
                raise ConfigError("subspace indices out of range")
            self.kind = "injection"
            self.indices = idx
            self.matrix = None
            self.dim = idx.size
        else:
            P = matrix.tocsr()
            if P.shape[0] != n_dof:
                raise DimensionError(f"prolongation has {P.shape[0]} rows, expected {n_dof}")
            P.sort_indices()
            self.kind = "matrix"
            self.matrix = P
            self.dim = P.shape[1]
            support = np.unique(P.tocoo().row)
            if support.size == 0:
                raise ConfigError("prolongation matrix is identically zero")
            self.indices = support.astype(np.int64)

    def prolong(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} local values, got shape {w.shape}")
        if self.kind == "injection":
            out = np.zeros(self.n_dof)
            out[self.indices] = w
            return out
        return np.asarray(self.matrix @ w)

    def restrict_grad(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.n_dof,):
            raise DimensionError(f"expected {self.n_dof} global values, got shape {g.shape}")
        if self.kind == "injection":
            return g[self.indices].copy()
        return np.asarray(self.matrix.T @ g)

    def __repr__(self):
        return f"Subspace(kind={self.kind}, dim={self.dim})"


def prolong(sub: Subspace, w: np.ndarray) -> np.ndarray:
    """Embed local coefficients into the global space (adjoint of restrict_grad)."""
    return sub.prolong(w)


def restrict_grad(sub: Subspace, g: np.ndarray) -> np.ndarray:
    """Pull a global gradient back to subspace coordinates."""
    return sub.restrict_grad(g)


def _owned_ranges(n_cells: int, blocks: int) -> list[tuple[int, int]]:
    """Half-open node-row ranges owned by each block row; disjoint, covering."""
    c = n_cells // blocks
    ranges = []
    for b in range(blocks):
        lo = b * c
        hi = (b + 1) * c if b < blocks - 1 else n_cells + 1
        ranges.append((lo, hi))
    return ranges


def build_overlapping_subdomains(mesh: StructuredMesh, H: float, delta_layers: int) -> list[Subspace]:
    """Square subdomain subspaces over the interior nodes of a mesh.

    The node grid is split into (1/H)^2 blocks of equal cell count; each
    block's owned nodes are grown by `delta_layers` node layers in every
    direction and clipped to the grid.  Dirichlet nodes are excluded.  With
    delta_layers = 0 the index sets partition the interior.
    """
    if not H > 0:
        raise ConfigError(f"H must be positive, got {H}")
    blocks = round(1.0 / H)
    if abs(blocks * H - 1.0) > 1e-9:
        raise ConfigError(f"1/H must be an integer, got H={H}")
    if delta_layers < 0:
        raise ConfigError("delta_layers must be nonnegative")
    n_cells = mesh.m - 1
    if n_cells % blocks != 0:
        raise ConfigError(f"subdomain grid {blocks} does not divide {n_cells} cells")
    if n_cells == blocks:
        raise ConfigError("H must exceed the mesh size h")

    ranges = _owned_ranges(n_cells, blocks)
    interior = mesh.interior_mask
    m = mesh.m
    subs = []
    for bi in range(blocks):
        for bj in range(blocks):
            r_lo = max(ranges[bi][0] - delta_layers, 0)
            r_hi = min(ranges[bi][1] + delta_layers, m)
            c_lo = max(ranges[bj][0] - delta_layers, 0)
            c_hi = min(ranges[bj][1] + delta_layers, m)
            rr, cc = np.meshgrid(np.arange(r_lo, r_hi), np.arange(c_lo, c_hi), indexing="ij")
            ids = (rr * m + cc).ravel()
            ids = np.sort(ids[interior[ids]])
            subs.append(Subspace(mesh.n_nodes, indices=ids))
    return subs


def build_pixel_subdomains(m: int, blocks: int, delta_layers: int) -> list[Subspace]:
    """Pixel-block subspaces for a two-component field on an m x m image.

    Both vector components of a pixel land in the same subspace (x-component
    at i*m + j, y-component at m*m + i*m + j).  A trailing remainder of
    pixels is absorbed into the last block row/column.
    """
    if blocks < 1 or m < 2 * blocks:
        raise ConfigError(f"cannot split {m} pixels into {blocks} blocks per side")
    if delta_layers < 0:
        raise ConfigError("delta_layers must be nonnegative")
    c = m // blocks
    ranges = []
    for b in range(blocks):
        lo = b * c
        hi = (b + 1) * c if b < blocks - 1 else m
        ranges.append((lo, hi))

    subs = []
    for bi in range(blocks):
        for bj in range(blocks):
            r0 = max(ranges[bi][0] - delta_layers, 0)
            r1 = min(ranges[bi][1] + delta_layers, m)
            c0 = max(ranges[bj][0] - delta_layers, 0)
            c1 = min(ranges[bj][1] + delta_layers, m)
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            pix = (rr * m + cc).ravel()
            pix.sort()
            ids = np.concatenate([pix, m * m + pix])
            subs.append(Subspace(2 * m * m, indices=ids, block=(r0, r1, c0, c1)))
    return subs


def add_coarse_space(subspaces: list[Subspace], interp: InterpolationOperator | None) -> list[Subspace]:
    """Prepend the coarse subspace built from a nodal interpolation operator.

    The prolongation keeps only coarse interior columns (the coarse dofs);
    passing None leaves the one-level list unchanged.
    """
    if interp is None:
        return list(subspaces)
    if not subspaces:
        raise ConfigError("cannot add a coarse space to an empty decomposition")
    P = interp.interior_matrix()
    coarse = Subspace(subspaces[0].n_dof, matrix=P)
    return [coarse] + list(subspaces)


def overlap_adjacency(subspaces: list[Subspace]) -> list[set[int]]:
    """Interaction graph with an edge wherever index sets intersect."""
    n = len(subspaces)
    adj = [set() for _ in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            if np.intersect1d(subspaces[a].indices, subspaces[b].indices, assume_unique=True).size:
                adj[a].add(b)
                adj[b].add(a)
    return adj


def coupling_adjacency(subspaces: list[Subspace], A: sp.spmatrix) -> list[set[int]]:
    """Interaction graph induced by a symmetric operator's sparsity.

    Subspaces a and b interact when A has a nonzero entry linking their index
    sets (so disjoint-but-coupled coordinate subspaces are still neighbors).
    """
    A = sp.csr_matrix(A)
    n = len(subspaces)
    reach = []
    for sub in subspaces:
        cols = np.unique(A[sub.indices].tocoo().col)
        reach.append(np.union1d(cols, sub.indices))
    adj = [set() for _ in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            if np.intersect1d(reach[a], subspaces[b].indices, assume_unique=True).size:
                adj[a].add(b)
                adj[b].add(a)
    return adj


def greedy_coloring(subspaces: list[Subspace], adjacency: list[set[int]] | None = None) -> np.ndarray:
    """First-fit coloring in list order; neighbors get distinct colors."""
    if not subspaces:
        raise ConfigError("cannot color an empty decomposition")
    if adjacency is None:
        adjacency = overlap_adjacency(subspaces)
    colors = np.full(len(subspaces), -1, dtype=np.int64)
    for k in range(len(subspaces)):
        used = {colors[j] for j in adjacency[k] if colors[j] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[k] = c
    return colors


def tau0_from_coloring(colors: np.ndarray) -> float:
    """Damping floor 1 / (number of distinct colors)."""
    colors = np.asarray(colors)
    if colors.size == 0:
        raise ConfigError("empty coloring")
    return 1.0 / float(np.unique(colors).size)


@dataclass
class Decomposition:
    """Ordered subspaces (coarse first, if any) plus coloring metadata."""

    subspaces: list[Subspace]
    colors: np.ndarray
    tau0: float
    n_dof: int
    has_coarse: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.subspaces)

    @classmethod
    def build(
        cls,
        subspaces: list[Subspace],
        n_dof: int,
        adjacency: list[set[int]] | None = None,
        coverage_mask: np.ndarray | None = None,
        has_coarse: bool = False,
    ) -> "Decomposition":
        if not subspaces:
            raise ConfigError("decomposition needs at least one subspace")
        for sub in subspaces:
            if sub.n_dof != n_dof:
                raise DimensionError("subspace dof count does not match the decomposition")
        if coverage_mask is not None:
            covered = np.zeros(n_dof, dtype=bool)
            for sub in subspaces:
                if has_coarse and sub is subspaces[0]:
                    continue  # coverage must come from the subdomains themselves
                covered[sub.indices] = True
            missing = np.flatnonzero(coverage_mask & ~covered)
            if missing.size:
                raise ConfigError(f"{missing.size} free dofs not covered by any subdomain")
        colors = greedy_coloring(subspaces, adjacency)
        return cls(
            subspaces=list(subspaces),
            colors=colors,
            tau0=tau0_from_coloring(colors),
            n_dof=n_dof,
            has_coarse=has_coarse,
        )
