# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the local-solve inner loops.

Same iterations as `_python`, with the per-step array work lowered to C
loops.  Reduction order inside dot products differs from numpy's pairwise
summation, so results agree with the pure backend to roundoff, not bit for
bit; the cross-backend tests compare at 1e-10.  Keep any algorithmic
change here in lockstep with `_python`.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, fmax, sqrt

cnp.import_array()

STEP_SAFETY = 0.5  # keep in sync with _python.STEP_SAFETY


cdef void _csr_matvec(
    const double[::1] data,
    const long[::1] indices,
    const long[::1] indptr,
    const double[::1] x,
    double[::1] out,
) noexcept nogil:
    cdef Py_ssize_t i, p
    cdef double acc
    for i in range(out.shape[0]):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc += data[p] * x[indices[p]]
        out[i] = acc


def box_qp(A, g0, lb, omega, tol, max_iter):
    """min_w (omega/2) w^T A w + g0^T w subject to w >= lb; CSR A."""
    cdef double om = omega
    cdef double tl = tol
    cdef Py_ssize_t mx = max_iter

    data = np.asarray(A.data, dtype=np.float64)
    indices = np.asarray(A.indices, dtype=np.int64)
    indptr = np.asarray(A.indptr, dtype=np.int64)
    cdef const double[::1] dv = data
    cdef const long[::1] iv = indices
    cdef const long[::1] pv = indptr

    g0a = np.ascontiguousarray(g0, dtype=np.float64)
    lba = np.ascontiguousarray(lb, dtype=np.float64)
    cdef Py_ssize_t n = g0a.shape[0]
    step_arr = STEP_SAFETY / (om * np.asarray(A.diagonal(), dtype=np.float64))
    cdef const double[::1] g0v = g0a
    cdef const double[::1] lbv = lba
    cdef const double[::1] step = step_arr

    # Seed at the smallest feasible correction: bit-exactly zero whenever
    # the base point is feasible (lb <= 0), the minimal bound push else.
    w_arr = np.maximum(lba, 0.0)
    y_arr = w_arr.copy()
    best_arr = w_arr.copy()
    new_arr = np.empty(n)
    av_arr = np.empty(n)
    cdef double[::1] w = w_arr
    cdef double[::1] y = y_arr
    cdef double[::1] w_best = best_arr
    cdef double[::1] w_new = new_arr
    cdef double[::1] av = av_arr

    cdef double phi_best = 0.5 * om * float(w_arr @ (A @ w_arr)) + float(g0a @ w_arr)
    cdef double t = 1.0
    cdef double gm0 = 0.0
    cdef double gm = 0.0
    cdef double phi, quad, lin, dot, t_next, coef, cand, diff
    cdef Py_ssize_t it = 0, i
    cdef bint converged = False

    while it < mx:
        it += 1
        with nogil:
            _csr_matvec(dv, iv, pv, y, av)
            gm = 0.0
            for i in range(n):
                cand = y[i] - step[i] * (g0v[i] + om * av[i])
                w_new[i] = fmax(lbv[i], cand)
                diff = y[i] - w_new[i]
                gm += diff * diff
            gm = sqrt(gm)
        if it == 1:
            gm0 = gm
            if gm0 == 0.0:
                return best_arr, it, gm0, gm, True
        with nogil:
            _csr_matvec(dv, iv, pv, w_new, av)
            quad = 0.0
            lin = 0.0
            for i in range(n):
                quad += w_new[i] * av[i]
                lin += g0v[i] * w_new[i]
            phi = 0.5 * om * quad + lin
            dot = 0.0
            for i in range(n):
                dot += (y[i] - w_new[i]) * (w_new[i] - w[i])
        if phi < phi_best:
            phi_best = phi
            w_best[:] = w_new
        if dot > 0.0:
            t = 1.0
            y[:] = w_new
        else:
            t_next = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
            coef = (t - 1.0) / t_next
            with nogil:
                for i in range(n):
                    y[i] = w_new[i] + coef * (w_new[i] - w[i])
            t = t_next
        w[:] = w_new
        if gm <= tl * (1.0 + gm0):
            converged = True
            break
    return best_arr, it, gm0, gm, converged


cdef void _block_div(
    const double[:, ::1] wx,
    const double[:, ::1] wy,
    double[:, ::1] out,
    Py_ssize_t nx,
    Py_ssize_t ny,
) noexcept nogil:
    cdef Py_ssize_t wh = out.shape[0]
    cdef Py_ssize_t ww = out.shape[1]
    cdef Py_ssize_t bh = wx.shape[0]
    cdef Py_ssize_t bw = wx.shape[1]
    cdef Py_ssize_t i, j
    for i in range(wh):
        for j in range(ww):
            out[i, j] = 0.0
    for i in range(bh):
        for j in range(nx):
            out[i, j] += wx[i, j]
        for j in range(1, ww):
            out[i, j] -= wx[i, j - 1]
    for i in range(ny):
        for j in range(bw):
            out[i, j] += wy[i, j]
    for i in range(1, wh):
        for j in range(bw):
            out[i, j] -= wy[i - 1, j]


def tv_block_qp(r0w, vblock, omega, tol, max_iter):
    """Local dual-TV solve on one pixel block; see the numpy backend."""
    cdef double om = omega
    cdef double tl = tol
    cdef Py_ssize_t mx = max_iter

    r0a = np.ascontiguousarray(r0w, dtype=np.float64)
    va = np.ascontiguousarray(vblock, dtype=np.float64)
    cdef const double[:, ::1] r0 = r0a
    cdef const double[:, :, ::1] v = va
    cdef Py_ssize_t wh = r0a.shape[0]
    cdef Py_ssize_t ww = r0a.shape[1]
    cdef Py_ssize_t bh = va.shape[1]
    cdef Py_ssize_t bw = va.shape[2]
    cdef Py_ssize_t nx = bw if ww > bw else bw - 1
    cdef Py_ssize_t ny = bh if wh > bh else bh - 1
    cdef double alpha = 1.0 / (8.0 * om)

    # Seed at the smallest feasible correction: bit-exactly zero whenever
    # the base field is feasible, the disk projection of it else.
    norm0 = np.sqrt(va[0] ** 2 + va[1] ** 2)
    scale0 = 1.0 / np.maximum(1.0, norm0)
    w_arr = va * scale0 - va
    y_arr = w_arr.copy()
    best_arr = w_arr.copy()
    new_arr = np.empty((2, bh, bw))
    div_arr = np.empty((wh, ww))
    cdef double[:, :, ::1] w = w_arr
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, ::1] w_best = best_arr
    cdef double[:, :, ::1] w_new = new_arr
    cdef double[:, ::1] r = div_arr

    _block_div(w[0], w[1], r, nx, ny)
    cdef double phi_best = float(np.sum(r0a * div_arr)) + 0.5 * om * float(np.sum(div_arr * div_arr))
    cdef double t = 1.0
    cdef double gm0 = 0.0
    cdef double gm = 0.0
    cdef double phi, lin, quad, dot, t_next, coef, gx, gy, c0, c1, norm, scale, diff
    cdef Py_ssize_t it = 0, i, j, c
    cdef bint converged = False

    while it < mx:
        it += 1
        with nogil:
            # r <- r0 + omega * div(y), evaluated on the window
            _block_div(y[0], y[1], r, nx, ny)
            for i in range(wh):
                for j in range(ww):
                    r[i, j] = r0[i, j] + om * r[i, j]
            gm = 0.0
            for i in range(bh):
                for j in range(bw):
                    gx = r[i, j] - r[i, j + 1] if j < nx else 0.0
                    gy = r[i, j] - r[i + 1, j] if i < ny else 0.0
                    c0 = v[0, i, j] + y[0, i, j] - alpha * gx
                    c1 = v[1, i, j] + y[1, i, j] - alpha * gy
                    norm = sqrt(c0 * c0 + c1 * c1)
                    scale = 1.0 / fmax(1.0, norm)
                    w_new[0, i, j] = c0 * scale - v[0, i, j]
                    w_new[1, i, j] = c1 * scale - v[1, i, j]
                    diff = y[0, i, j] - w_new[0, i, j]
                    gm += diff * diff
                    diff = y[1, i, j] - w_new[1, i, j]
                    gm += diff * diff
            gm = sqrt(gm)
        if it == 1:
            gm0 = gm
            if gm0 == 0.0:
                return best_arr, it, gm0, gm, True
        with nogil:
            _block_div(w_new[0], w_new[1], r, nx, ny)
            lin = 0.0
            quad = 0.0
            for i in range(wh):
                for j in range(ww):
                    lin += r0[i, j] * r[i, j]
                    quad += r[i, j] * r[i, j]
            phi = lin + 0.5 * om * quad
            dot = 0.0
            for c in range(2):
                for i in range(bh):
                    for j in range(bw):
                        dot += (y[c, i, j] - w_new[c, i, j]) * (w_new[c, i, j] - w[c, i, j])
        if phi < phi_best:
            phi_best = phi
            w_best[:] = w_new
        if dot > 0.0:
            t = 1.0
            y[:] = w_new
        else:
            t_next = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
            coef = (t - 1.0) / t_next
            with nogil:
                for c in range(2):
                    for i in range(bh):
                        for j in range(bw):
                            y[c, i, j] = w_new[c, i, j] + coef * (w_new[c, i, j] - w[c, i, j])
            t = t_next
        w[:] = w_new
        if gm <= tl * (1.0 + gm0):
            converged = True
            break
    return best_arr, it, gm0, gm, converged
