# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled sweep kernels; same contract as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite

cnp.import_array()

cdef double VMIN_SQ = 0.01
cdef double VMAX_SQ = 4.0


cdef inline bint _sweep_row(const double[::1] z_re, const double[::1] z_im,
                            const double[:, ::1] lt_re, const double[:, ::1] lt_im,
                            const double[::1] p, const double[::1] q,
                            double[::1] vr, double[::1] vi,
                            double[::1] wr, double[::1] wi,
                            double[::1] nr, double[::1] ni) nogil:
    cdef Py_ssize_t n = p.shape[0], m, k
    cdef double d, a, b
    cdef bint bad = False
    for m in range(n):
        d = vr[m] * vr[m] + vi[m] * vi[m]
        wr[m] = (p[m] * vr[m] + q[m] * vi[m]) / d
        wi[m] = (q[m] * vr[m] - p[m] * vi[m]) / d
        nr[m] = 0.0
        ni[m] = 0.0
    for m in range(n):
        a = wr[m]
        b = wi[m]
        for k in range(n):
            nr[k] += a * lt_re[m, k] + b * lt_im[m, k]
            ni[k] += a * lt_im[m, k] - b * lt_re[m, k]
    for k in range(n):
        nr[k] = z_re[k] - nr[k]
        ni[k] = z_im[k] - ni[k]
        d = nr[k] * nr[k] + ni[k] * ni[k]
        if not (d >= VMIN_SQ and d < VMAX_SQ):
            bad = True
    return bad


def fixed_sweeps(z_re, z_im, lt_re, lt_im, p, q, int n_iters):
    p2 = np.ascontiguousarray(p, dtype=np.float64)
    q2 = np.ascontiguousarray(q, dtype=np.float64)
    squeeze = p2.ndim == 1
    if squeeze:
        p2 = p2[None, :]
        q2 = q2[None, :]
    cdef Py_ssize_t nb = p2.shape[0], n = p2.shape[1], r, k
    cdef int it
    out_r = np.ones((nb, n))
    out_i = np.zeros((nb, n))
    div = np.zeros(nb, dtype=bool)
    cdef const double[:, ::1] P = p2
    cdef const double[:, ::1] Q = q2
    cdef double[:, ::1] VR = out_r, VI = out_i
    cdef const double[::1] ZR = np.ascontiguousarray(z_re, dtype=np.float64)
    cdef const double[::1] ZI = np.ascontiguousarray(z_im, dtype=np.float64)
    cdef const double[:, ::1] LR = np.ascontiguousarray(lt_re, dtype=np.float64)
    cdef const double[:, ::1] LI = np.ascontiguousarray(lt_im, dtype=np.float64)
    cdef double[::1] wr = np.empty(n), wi = np.empty(n), nr = np.empty(n), ni = np.empty(n)
    cdef cnp.uint8_t[::1] D = div.view(np.uint8)
    cdef bint bad
    with nogil:
        for r in range(nb):
            bad = False
            for it in range(n_iters):
                if _sweep_row(ZR, ZI, LR, LI, P[r], Q[r], VR[r], VI[r], wr, wi, nr, ni):
                    bad = True
                for k in range(n):
                    VR[r, k] = nr[k]
                    VI[r, k] = ni[k]
            D[r] = bad
    if squeeze:
        return out_r[0], out_i[0], div[0]
    return out_r, out_i, div


def solve_tol(z_re, z_im, lt_re, lt_im, p, q, int max_iters, double tol):
    cdef const double[::1] P = np.ascontiguousarray(p, dtype=np.float64)
    cdef const double[::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], k
    vr_a = np.ones(n)
    vi_a = np.zeros(n)
    cdef double[::1] vr = vr_a, vi = vi_a
    cdef const double[::1] ZR = np.ascontiguousarray(z_re, dtype=np.float64)
    cdef const double[::1] ZI = np.ascontiguousarray(z_im, dtype=np.float64)
    cdef const double[:, ::1] LR = np.ascontiguousarray(lt_re, dtype=np.float64)
    cdef const double[:, ::1] LI = np.ascontiguousarray(lt_im, dtype=np.float64)
    cdef double[::1] wr = np.empty(n), wi = np.empty(n), nr = np.empty(n), ni = np.empty(n)
    cdef double step, dr, di, s
    cdef int it = 0
    steps = []
    while it < max_iters:
        it += 1
        if _sweep_row(ZR, ZI, LR, LI, P, Q, vr, vi, wr, wi, nr, ni):
            return np.asarray(nr).copy(), np.asarray(ni).copy(), it, steps, True
        step = 0.0
        for k in range(n):
            dr = nr[k] - vr[k]
            di = ni[k] - vi[k]
            s = sqrt(dr * dr + di * di)
            if s > step:
                step = s
            vr[k] = nr[k]
            vi[k] = ni[k]
        steps.append(step)
        if step < tol:
            break
    return vr_a, vi_a, it, steps, False
