"""Fixed-point (Z-bus) power flow, its differentiable form, and a Newton oracle.

Injections are load-positive: loads and EV charging enter ``s = p + jq`` with
a positive sign, PV and V2G discharge with a negative sign. The iteration is

    v(0) = 1 + 0j
    v(k+1) = Z - L conj(s / v(k))

which is the generation-positive textbook form ``Z + L conj(s_gen / v)``
with ``s_gen = -s``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffmath as dm
from . import kernels
from ._pykernels import sweep as _np_sweep
from .grid import GridModel


class PowerFlowError(ArithmeticError):
    pass


class DivergenceError(PowerFlowError):
    """An iterate left the physical band 0.1 <= |v| < 2 p.u. (voltage collapse).

    ``rows`` lists the offending batch rows when the solve was batched.
    """

    def __init__(self, msg, rows=None):
        super().__init__(msg)
        self.rows = rows


class OracleFailure(PowerFlowError):
    """Newton iteration failed (singular Jacobian or no convergence)."""


@dataclass(frozen=True)
class BusInjection:
    """Per-unit injection at one bus, load-positive."""

    p: float
    q: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.p) and np.isfinite(self.q)):
            raise ValueError("injection must be finite")


@dataclass
class VoltageProfile:
    v: np.ndarray
    iterations_used: int
    converged: bool
    max_step: float
    step_history: list = field(default_factory=list)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.v)


def injection_arrays(inj, n_bus: int | None = None, limit: float = 10.0):
    """Normalise injections to ``(p, q)`` float arrays.

    Accepts a complex array ``p + jq``, a ``(p, q)`` pair, or a sequence of
    :class:`BusInjection`. Magnitudes above ``limit`` p.u. are rejected.
    """
    if isinstance(inj, tuple) and len(inj) == 2:
        p, q = (np.asarray(a, dtype=np.float64) for a in inj)
    elif len(inj) and isinstance(inj[0], BusInjection):
        p = np.array([b.p for b in inj], dtype=np.float64)
        q = np.array([b.q for b in inj], dtype=np.float64)
    else:
        s = np.asarray(inj, dtype=complex)
        p, q = np.ascontiguousarray(s.real), np.ascontiguousarray(s.imag)
    if n_bus is not None and p.shape[-1] != n_bus:
        raise ValueError(f"expected {n_bus} bus injections, got {p.shape[-1]}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("injections must be finite")
    if limit is not None and (np.abs(p).max(initial=0) > limit or np.abs(q).max(initial=0) > limit):
        raise ValueError(f"injection exceeds sanity bound of {limit} p.u.")
    return p, q


def solve_fixed_point(grid: GridModel, inj, max_iters: int = 50, tol: float = 1e-8,
                      backend: str | None = None, limit: float | None = 10.0) -> VoltageProfile:
    """Iterate the Z-bus map until ``max |dv| < tol`` or ``max_iters``.

    Raises :class:`DivergenceError` if any iterate leaves ``0.1 <= |v| < 2``.
    """
    if max_iters < 1 or tol <= 0:
        raise ValueError("need max_iters >= 1 and tol > 0")
    p, q = injection_arrays(inj, grid.n_bus, limit)
    k = kernels.get(backend)
    vr, vi, iters, steps, diverged = k.solve_tol(grid.z_re, grid.z_im, grid.lt_re, grid.lt_im,
                                                 p, q, max_iters, tol)
    if diverged:
        raise DivergenceError(f"voltage left the 0.1-2 p.u. band at sweep {iters}")
    last = steps[-1] if steps else 0.0
    return VoltageProfile(vr + 1j * vi, iters, last < tol, last, steps)


def sweep_fixed(grid: GridModel, p, q, n_iters: int, backend: str | None = None):
    """Batched fixed-count sweeps. Returns ``(vr, vi, diverged_rows)``."""
    if n_iters < 1:
        raise ValueError("need at least one sweep")
    k = kernels.get(backend)
    return k.fixed_sweeps(grid.z_re, grid.z_im, grid.lt_re, grid.lt_im, p, q, n_iters)


def voltage_magnitude(vr, vi):
    return np.sqrt(vr * vr + vi * vi)


# -- differentiable path ------------------------------------------------------------

def _fused_sweeps(grid: GridModel, p, q, n_iters: int):
    """Tape op for ``n_iters`` sweeps plus the modulus, with a hand-written adjoint.

    The forward pass runs the numpy fallback kernel step by step, so values are
    bit-identical to ``sweep_fixed(..., backend="python")``.
    """
    pv, qv = dm.value_of(p), dm.value_of(q)
    pv = np.asarray(pv, dtype=np.float64)
    qv = np.asarray(qv, dtype=np.float64)
    zr, zi, ltr, lti = grid.z_re, grid.z_im, grid.lt_re, grid.lt_im
    vr = np.ones_like(pv)
    vi = np.zeros_like(pv)
    hist = []
    diverged = np.zeros(pv.shape[:-1], dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(n_iters):
            hist.append((vr, vi))
            vr, vi = _np_sweep(zr, zi, ltr, lti, pv, qv, vr, vi)
            d = vr * vr + vi * vi
            bad = ~((d >= 0.01) & (d < 4.0))
            diverged |= bad.any(axis=-1)
    mag = np.sqrt(vr * vr + vi * vi)
    if np.any(diverged):
        rows = np.flatnonzero(diverged) if diverged.ndim else None
        raise DivergenceError("voltage left the 0.1-2 p.u. band in a differentiable sweep", rows)
    lr, li = ltr.T, lti.T
    final_r, final_i = vr, vi
    cache = {}

    def adjoints(g):
        if "pq" in cache:
            return cache["pq"]
        gr = g * final_r / mag
        gi = g * final_i / mag
        gp = np.zeros_like(pv)
        gq = np.zeros_like(qv)
        for ur, ui in reversed(hist):
            g_wr = -(gr @ lr + gi @ li)
            g_wi = -(gr @ li - gi @ lr)
            d = ur * ur + ui * ui
            wr = (pv * ur + qv * ui) / d
            wi = (qv * ur - pv * ui) / d
            gp += (g_wr * ur - g_wi * ui) / d
            gq += (g_wr * ui + g_wi * ur) / d
            gr = (g_wr * (pv - 2.0 * wr * ur) + g_wi * (qv - 2.0 * wi * ur)) / d
            gi = (g_wr * (qv - 2.0 * wr * ui) + g_wi * (-pv - 2.0 * wi * ui)) / d
        cache["pq"] = (gp, gq)
        return gp, gq

    parents = []
    if isinstance(p, dm.Node):
        parents.append((p, lambda g: _sum_to(adjoints(g)[0], p.value.shape)))
    if isinstance(q, dm.Node):
        parents.append((q, lambda g: _sum_to(adjoints(g)[1], q.value.shape)))
    if not parents:
        return mag
    tape = (p if isinstance(p, dm.Node) else q).tape
    return tape.custom(mag, parents)


def _sum_to(g, shape):
    return dm._unbroadcast(g, shape)


def _composed_sweeps(grid: GridModel, p, q, n_iters: int):
    """Same map built from primitive complex tape ops (slow; used as a cross-check)."""
    s = dm.DComplex(p, q)
    zero = np.zeros(np.shape(dm.value_of(p)))
    v = dm.DComplex(zero + 1.0, zero)
    z = dm.DComplex(grid.z_re, grid.z_im)
    for _ in range(n_iters):
        w = dm.c_conj(dm.c_div(s, v))
        lw = dm.c_matvec(grid.l_mat, w)
        v = dm.c_sub(z, lw)
        if np.any(np.abs(v.value) < 0.1) or np.any(np.abs(v.value) >= 2.0):
            raise DivergenceError("voltage left the 0.1-2 p.u. band in a differentiable sweep")
    return dm.c_abs(v)


def solve_fixed_point_diff(grid: GridModel, p, q, fixed_iters: int = 10, method: str = "fused"):
    """Voltage magnitudes after exactly ``fixed_iters`` sweeps, on the tape.

    ``p`` and ``q`` may be nodes or constants (per unit, load-positive, shape
    ``(..., n_bus)``). ``method="composed"`` builds the graph from primitive
    complex ops instead of the fused adjoint.
    """
    if fixed_iters < 1:
        raise ValueError("fixed_iters must be >= 1")
    if method == "fused":
        return _fused_sweeps(grid, p, q, fixed_iters)
    if method == "composed":
        return _composed_sweeps(grid, p, q, fixed_iters)
    raise ValueError(f"unknown method {method!r}")


# -- Newton-Raphson oracle ------------------------------------------------------------

def solve_newton(grid: GridModel, inj, tol: float = 1e-9, max_iters: int = 30) -> VoltageProfile:
    """Polar Newton-Raphson on the full bus admittance matrix.

    Independent of ``Z``/``L``: the slack is held at ``v_slack`` and every
    other bus is PQ with specified injection ``-s``.
    """
    p, q = injection_arrays(inj, grid.n_bus, limit=None)
    y = grid.y_bus
    n = grid.n_bus
    v = np.ones(n + 1, dtype=complex)
    v[0] = grid.v_slack
    s_spec = -(p + 1j * q)
    mism_hist = []
    for it in range(1, max_iters + 1):
        i_bus = y @ v
        s_calc = v * np.conj(i_bus)
        mis = s_calc[1:] - s_spec
        f = np.r_[mis.real, mis.imag]
        err = float(np.abs(f).max()) if n else 0.0
        mism_hist.append(err)
        if err < tol:
            return VoltageProfile(v[1:].copy(), it - 1, True, err, mism_hist)
        vm = np.abs(v)
        vn = v / vm
        diag_v = np.diag(v)
        ds_dva = 1j * diag_v @ np.conj(np.diag(i_bus) - y @ diag_v)
        ds_dvm = diag_v @ np.conj(y @ np.diag(vn)) + np.conj(np.diag(i_bus)) @ np.diag(vn)
        a, m = ds_dva[1:, 1:], ds_dvm[1:, 1:]
        jac = np.block([[a.real, m.real], [a.imag, m.imag]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise OracleFailure(f"singular Jacobian at iteration {it}") from exc
        if not np.all(np.isfinite(dx)):
            raise OracleFailure("non-finite Newton step")
        va = np.angle(v[1:]) + dx[:n]
        vmag = vm[1:] + dx[n:]
        if np.any(vmag <= 0.05) or np.any(vmag > 5):
            raise OracleFailure(f"Newton iterate left the physical range at iteration {it}")
        v[1:] = vmag * np.exp(1j * va)
    raise OracleFailure(f"no convergence in {max_iters} iterations (mismatch {mism_hist[-1]:.3g})")


# -- constraint terms ---------------------------------------------------------------

def violation_magnitude(vmag, v_lo: float = 0.95, v_hi: float = 1.05):
    """Per-bus distance outside ``[v_lo, v_hi]`` (0 inside, boundary inclusive).

    Works on arrays and tape nodes alike.
    """
    return dm.relu(v_lo - vmag) + dm.relu(vmag - v_hi)


def violation_terms(profile, v_lo: float = 0.95, v_hi: float = 1.05) -> np.ndarray:
    """The objective's voltage term per bus, ``min(0, 0.05 - |1 - |v||)``.

    0 inside the band, negative outside. Evaluated as minus the distance to
    the band, which equals the min-form for the symmetric default band and
    is exactly 0 on the boundary.
    """
    vmag = profile.magnitude if isinstance(profile, VoltageProfile) else np.asarray(profile)
    return -violation_magnitude(vmag, v_lo, v_hi)
