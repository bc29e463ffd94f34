"""Pure numpy sweep kernels (fallback backend).

Both kernels iterate ``v <- Z - L conj(s / v)`` on real/imag pairs, with
``s = p + jq`` load-positive in per unit. ``lt_re``/``lt_im`` hold ``L``
transposed so that a batch of row vectors multiplies on the left.
"""
import numpy as np

VMIN_SQ = 0.1 * 0.1
VMAX_SQ = 2.0 * 2.0


def sweep(z_re, z_im, lt_re, lt_im, p, q, vr, vi):
    """One fixed-point sweep. Shapes broadcast over leading batch axes."""
    d = vr * vr + vi * vi
    wr = (p * vr + q * vi) / d
    wi = (q * vr - p * vi) / d
    nr = z_re - (wr @ lt_re + wi @ lt_im)
    ni = z_im - (wr @ lt_im - wi @ lt_re)
    return nr, ni


def _bad(vr, vi):
    d = vr * vr + vi * vi
    bad = ~((d >= VMIN_SQ) & (d < VMAX_SQ))
    return bad if bad.ndim == 1 else bad.any(axis=-1)


def fixed_sweeps(z_re, z_im, lt_re, lt_im, p, q, n_iters):
    """Run exactly ``n_iters`` sweeps from the flat start ``1 + 0j``.

    Returns ``(vr, vi, diverged)`` where ``diverged`` flags every batch row
    whose iterate left the band ``0.1 <= |v| < 2`` at any sweep.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    vr = np.ones_like(p)
    vi = np.zeros_like(p)
    diverged = np.zeros(p.shape[:-1], dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(n_iters):
            vr, vi = sweep(z_re, z_im, lt_re, lt_im, p, q, vr, vi)
            diverged |= _bad(vr, vi)
    return vr, vi, diverged


def solve_tol(z_re, z_im, lt_re, lt_im, p, q, max_iters, tol):
    """Iterate until ``max |dv| < tol``. Returns ``(vr, vi, iters, steps, diverged)``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    vr = np.ones_like(p)
    vi = np.zeros_like(p)
    steps = []
    with np.errstate(all="ignore"):
        for it in range(1, max_iters + 1):
            nr, ni = sweep(z_re, z_im, lt_re, lt_im, p, q, vr, vi)
            if np.any(_bad(nr, ni)):
                return nr, ni, it, steps, True
            dr, di = nr - vr, ni - vi
            step = float(np.sqrt(dr * dr + di * di).max()) if p.size else 0.0
            steps.append(step)
            vr, vi = nr, ni
            if step < tol:
                break
    return vr, vi, it, steps, False
