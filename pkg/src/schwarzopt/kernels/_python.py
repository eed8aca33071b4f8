"""Pure-numpy implementations of the local-solve inner loops.

Both kernels run an accelerated projected-gradient iteration with gradient
restart and best-iterate tracking.  The best iterate starts at the smallest
feasible correction: exactly w = 0 (objective 0, the objectives below are
shifted so it scores 0) whenever the base point already satisfies the
constraints, and the projection of the base point onto them otherwise.
The returned correction therefore never increases the energy it came from
and is feasible even when the base point is not (momentum overrelaxation
can hand the local solvers an infeasible base).

The compiled backend mirrors these loops statement for statement; keep the
two in sync.
"""

from __future__ import annotations

import math

import numpy as np

# Fraction of the diagonally-scaled unit step; 0.5 is safe because the local
# stiffness blocks are weakly diagonally dominant (Gershgorin bound 2).
STEP_SAFETY = 0.5


def box_qp(A, g0, lb, omega, tol, max_iter):
    """min_w  (omega/2) w^T A w + g0^T w   subject to  w >= lb.

    A is CSR, symmetric positive semidefinite with positive diagonal.
    Returns (w, iters, gm0, gm, converged); gm is the norm of the last
    projected step, gm0 the first, and the stop rule is
    gm <= tol * (1 + gm0).
    """
    n = g0.shape[0]
    diag = A.diagonal()
    step = STEP_SAFETY / (omega * diag)

    w = np.maximum(lb, 0.0)
    y = w.copy()
    w_best = w.copy()
    phi_best = 0.5 * omega * float(w @ (A @ w)) + float(g0 @ w)
    t = 1.0
    gm0 = 0.0
    gm = 0.0

    for it in range(1, max_iter + 1):
        grad = g0 + omega * (A @ y)
        w_new = np.maximum(lb, y - step * grad)
        gm = float(np.linalg.norm(y - w_new))
        if it == 1:
            gm0 = gm
            if gm0 == 0.0:
                return w_best, it, gm0, gm, True
        phi = 0.5 * omega * float(w_new @ (A @ w_new)) + float(g0 @ w_new)
        if phi < phi_best:
            phi_best = phi
            w_best = w_new.copy()
        if float((y - w_new) @ (w_new - w)) > 0.0:
            t = 1.0
            y = w_new.copy()
        else:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = w_new + ((t - 1.0) / t_next) * (w_new - w)
            t = t_next
        w = w_new
        if gm <= tol * (1.0 + gm0):
            return w_best, it, gm0, gm, True
    return w_best, max_iter, gm0, gm, False


def _block_div(wx, wy, wh, ww, nx, ny):
    """Divergence of a block-supported field on its (wh, ww) window.

    nx/ny are the owned columns/rows whose forward term stays inside the
    image (the far-edge components are structurally dead there).
    """
    bh, bw = wx.shape
    out = np.zeros((wh, ww))
    out[:bh, :nx] += wx[:, :nx]
    out[:bh, 1:ww] -= wx[:, : ww - 1]
    out[:ny, :bw] += wy[:ny, :]
    out[1:wh, :bw] -= wy[: wh - 1, :]
    return out


def tv_block_qp(r0w, vblock, omega, tol, max_iter):
    """Local dual-TV solve on one pixel block.

    min_w  <r0, div w> + (omega/2) ||div w||^2   s.t.  |v_ij + w_ij|_2 <= 1
    per owned pixel, where div is windowed onto r0w's shape.  Returns
    (w, iters, gm0, gm, converged) with w shaped (2, bh, bw).
    """
    wh, ww = r0w.shape
    bh, bw = vblock.shape[1], vblock.shape[2]
    nx = bw if ww > bw else bw - 1  # owned cols with a live forward x-term
    ny = bh if wh > bh else bh - 1
    alpha = 1.0 / (8.0 * omega)

    norm0 = np.sqrt(vblock[0] ** 2 + vblock[1] ** 2)
    scale0 = 1.0 / np.maximum(1.0, norm0)
    w = vblock * scale0 - vblock
    y = w.copy()
    w_best = w.copy()
    d0 = _block_div(w[0], w[1], wh, ww, nx, ny)
    phi_best = float(np.sum(r0w * d0)) + 0.5 * omega * float(np.sum(d0 * d0))
    t = 1.0
    gm0 = 0.0
    gm = 0.0

    for it in range(1, max_iter + 1):
        r = r0w + omega * _block_div(y[0], y[1], wh, ww, nx, ny)
        # gradient of the objective is minus the windowed tv_grad of r
        gx = np.zeros((bh, bw))
        gy = np.zeros((bh, bw))
        gx[:, :nx] = r[:bh, :nx] - r[:bh, 1 : nx + 1]
        gy[:ny, :] = r[:ny, :bw] - r[1 : ny + 1, :bw]

        cand = np.empty_like(y)
        cand[0] = vblock[0] + y[0] - alpha * gx
        cand[1] = vblock[1] + y[1] - alpha * gy
        norm = np.sqrt(cand[0] ** 2 + cand[1] ** 2)
        scale = 1.0 / np.maximum(1.0, norm)
        w_new = cand * scale - vblock

        gm = float(np.linalg.norm((y - w_new).ravel()))
        if it == 1:
            gm0 = gm
            if gm0 == 0.0:
                return w_best, it, gm0, gm, True
        d = _block_div(w_new[0], w_new[1], wh, ww, nx, ny)
        phi = float(np.sum(r0w * d)) + 0.5 * omega * float(np.sum(d * d))
        if phi < phi_best:
            phi_best = phi
            w_best = w_new.copy()
        if float(((y - w_new) * (w_new - w)).sum()) > 0.0:
            t = 1.0
            y = w_new.copy()
        else:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = w_new + ((t - 1.0) / t_next) * (w_new - w)
            t = t_next
        w = w_new
        if gm <= tol * (1.0 + gm0):
            return w_best, it, gm0, gm, True
    return w_best, max_iter, gm0, gm, False
