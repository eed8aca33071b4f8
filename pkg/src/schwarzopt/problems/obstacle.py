"""Membrane obstacle problem on the unit square.

F(u) = 1/2 u^T K u - b^T u with the P1 stiffness matrix K, and G the
indicator of {u >= psi at every interior node}.  The defaults (f = -10,
psi = -0.2) press the membrane onto the obstacle over a sizable contact
set.  Two-level overlapping decomposition; the coarse bounds use the
monotone restriction max of (psi - v) over each coarse basis support.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..core import ProblemInstance
from ..decomposition import (
    Decomposition,
    add_coarse_space,
    build_overlapping_subdomains,
    coupling_adjacency,
)
from ..errors import ConfigError
from ..grid import assemble_load, assemble_p1_stiffness, build_coarse_interpolation, build_mesh
from .quadratic import QuadraticModel

__all__ = ["ObstacleSpec", "make_obstacle"]


@dataclass
class ObstacleSpec:
    m: int = 65
    coarse_m: int = 9
    delta_layers: int = 4
    f: float = -10.0
    psi: float = -0.2
    qp_tol: float = 1e-8
    qp_max_iter: int = 10000

    def validate(self):
        if self.coarse_m < 3:
            raise ConfigError(f"coarse mesh needs at least 3 nodes per side, got {self.coarse_m}")
        if self.qp_tol <= 0 or self.qp_max_iter < 1:
            raise ConfigError("local QP tolerance and iteration cap must be positive")


def make_obstacle(spec: ObstacleSpec = ObstacleSpec()) -> ProblemInstance:
    spec.validate()
    mesh = build_mesh(spec.m)
    coarse = build_mesh(spec.coarse_m)
    K = assemble_p1_stiffness(mesh)
    b = assemble_load(mesh, spec.f)

    x, y = mesh.node_coords()
    psi = np.asarray(spec.psi(x, y), dtype=np.float64) if callable(spec.psi) else np.full(
        mesh.n_nodes, float(spec.psi)
    )
    lower = np.where(mesh.interior_mask, psi, -np.inf)
    if np.any(lower > 0.0):
        raise ConfigError("obstacle must allow the zero start (psi <= 0 at interior nodes)")

    H = 1.0 / (spec.coarse_m - 1)
    subs = build_overlapping_subdomains(mesh, H, spec.delta_layers)
    subs = add_coarse_space(subs, build_coarse_interpolation(mesh, coarse))
    # Color by stiffness coupling, not index overlap: the tau >= tau0
    # acceptance guarantee needs same-color patches energy-orthogonal, and
    # at generous overlaps patches can touch through K without sharing a
    # dof.  Costs a few extra colors (a smaller tau0) at the largest
    # overlaps; the step-size floor then actually holds.
    decomp = Decomposition.build(
        subs,
        mesh.n_nodes,
        coverage_mask=mesh.interior_mask,
        has_coarse=True,
        adjacency=coupling_adjacency(subs, K),
    )

    model = QuadraticModel(
        K, b, decomp, lower=lower, qp_tol=spec.qp_tol, qp_max_iter=spec.qp_max_iter
    )
    digest = hashlib.sha256()
    digest.update(f"obstacle-m{spec.m}-H{spec.coarse_m}-d{spec.delta_layers}".encode())
    digest.update(b.tobytes())
    digest.update(psi.tobytes())
    return ProblemInstance(
        model=model,
        decomposition=decomp,
        initial_iterate=np.zeros(mesh.n_nodes),
        label=f"obstacle-m{spec.m}",
        fingerprint=f"obstacle-{digest.hexdigest()[:16]}",
        meta={"mesh": mesh, "spec": spec},
    )
