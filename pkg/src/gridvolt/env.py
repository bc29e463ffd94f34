"""The charging MDP: observation assembly, the coupled fleet/power-flow
transition, the reward, and its tape-valued K-step rollout.

All physics for one step lives in :func:`physics_step`, which is written
against the :mod:`gridvolt.diffmath` helpers and therefore evaluates the same
numpy expressions whether the SoC/actions are plain arrays or tape nodes.
The plain environment and the differentiable rollout both call it, which is
what makes their forward values bit-identical.

Observation layout (length ``3 + 2N + 3I``)::

    [sin h, cos h, price_ch, p_net[N], q_net[N], soc[I], t_left[I], bus[I]]

``p_net``/``q_net`` are the exogenous per-unit net injections (generation
positive); ``bus`` is the 1-based non-slack bus number of each charger.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .fleet import ChargerState, DepartedRecord, build_schedule
from .powerflow import (DivergenceError, GridModel, solve_fixed_point_diff, sweep_fixed,
                        voltage_magnitude, violation_magnitude)
from .scenario import EpisodeRecord, ExogenousTrajectory

log = logging.getLogger(__name__)


class EnvConfigError(ValueError):
    pass


@dataclass
class RewardConfig:
    """Reward weights. ``lambda1``/``lambda3`` are conventionally written
    negative; only their magnitudes are used, so violations, purchases and
    unmet SoC always reduce the reward."""

    lambda1: float = -5e4
    lambda2: float = 1.0
    lambda3: float = -10.0
    v_band: float = 0.05
    soc_target: float = 0.9
    eps_steps: float = 8.0

    def __post_init__(self):
        if self.v_band <= 0:
            raise EnvConfigError("v_band must be positive")
        if not 0 < self.soc_target <= 1:
            raise EnvConfigError("soc_target must lie in (0, 1]")
        if self.eps_steps < 1:
            raise EnvConfigError("eps_steps must be >= 1")

    @property
    def v_lo(self) -> float:
        return 1.0 - self.v_band

    @property
    def v_hi(self) -> float:
        return 1.0 + self.v_band


@dataclass
class EnvConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    pf_iters: int = 10
    divergence_penalty: float = -1e6
    backend: str | None = None

    def __post_init__(self):
        if isinstance(self.reward, dict):
            self.reward = RewardConfig(**self.reward)
        if self.pf_iters < 1:
            raise EnvConfigError("pf_iters must be >= 1")


# -- per-episode exogenous table ------------------------------------------------------

TABLE_KEYS = ("prefix", "tail", "price_ch", "price_dis", "p_base", "q_base", "occupied",
              "e_max", "p_ch_max", "p_dis_max", "soc_min", "t_left", "stay", "arrival_soc",
              "efficiency", "done")


def charger_incidence(grid: GridModel, charger_bus) -> np.ndarray:
    """``(I, N)`` map from per-charger kW to per-bus per-unit injection."""
    inc = np.zeros((len(charger_bus), grid.n_bus))
    inc[np.arange(len(charger_bus)), np.asarray(charger_bus, dtype=int)] = 1e3 / grid.s_base
    return inc


class EpisodeContext:
    """Everything action-independent about one episode, laid out per step.

    ``table`` maps names to arrays with ``T + 1`` leading rows (row ``T`` is
    the terminal observation). Segments sampled from the replay store slice
    the same table, so rollouts see exactly what the environment saw.
    """

    def __init__(self, grid: GridModel, traj: ExogenousTrajectory):
        if traj.n_buses != grid.n_bus:
            raise EnvConfigError(f"trajectory has {traj.n_buses} buses, grid {grid.name!r} has {grid.n_bus}")
        if traj.n_chargers and traj.charger_bus.max() >= grid.n_bus:
            raise EnvConfigError("charger mapped to a bus outside the grid")
        self.grid = grid
        self.traj = traj
        T, N, I = traj.n_steps, grid.n_bus, traj.n_chargers
        self.n_steps, self.n_bus, self.n_chargers, self.dt = T, N, I, traj.dt
        sched = build_schedule(traj.sessions, I, T, traj.efficiency)
        self.schedule = sched
        ext = np.r_[np.arange(T), T - 1]  # exogenous row used at each of the T+1 steps
        hours = np.r_[traj.hours, (traj.hours[-1] + traj.dt) % 24.0]
        ang = 2 * np.pi * hours / 24.0
        kw_to_pu = 1e3 / grid.s_base
        p_base = (traj.p_load + traj.p_pv)[ext] * kw_to_pu
        q_base = traj.q_load[ext] * kw_to_pu
        price_ch = traj.price_ch[ext][:, None]
        prefix = np.concatenate([np.sin(ang)[:, None], np.cos(ang)[:, None], price_ch,
                                 -p_base, -q_base], axis=1)
        bus = np.broadcast_to(traj.charger_bus + 1.0, (T + 1, I))
        tail = np.concatenate([sched.t_left, bus], axis=1)
        done = np.zeros(T + 1)
        done[T - 1:] = 1.0
        self.table = {
            "prefix": prefix, "tail": tail, "price_ch": price_ch,
            "price_dis": traj.price_dis[ext][:, None], "p_base": p_base, "q_base": q_base,
            "occupied": sched.occupied, "e_max": sched.e_max, "p_ch_max": sched.p_ch_max,
            "p_dis_max": sched.p_dis_max, "soc_min": sched.soc_min, "t_left": sched.t_left,
            "stay": sched.stay, "arrival_soc": sched.arrival_soc,
            "efficiency": np.broadcast_to(sched.efficiency, (T + 1, I)), "done": done,
        }
        self.incidence = charger_incidence(grid, traj.charger_bus)
        self.soc0 = np.zeros(I)
        session_at = -np.ones((T + 1, I), dtype=int)
        for k, s in enumerate(traj.sessions):
            if s.t_arrival == 0:
                self.soc0[s.charger_id] = s.soc_arrival
            if s.t_arrival <= T:
                session_at[s.t_arrival:min(s.t_depart, T + 1), s.charger_id] = k
        self.session_at = session_at

    @property
    def obs_dim(self) -> int:
        return 3 + 2 * self.n_bus + 3 * self.n_chargers

    def row(self, t: int) -> dict:
        """Table row ``t`` with a leading batch axis of 1."""
        return {k: v[t:t + 1] for k, v in self.table.items()}


def observation(exo: dict, soc):
    """Assemble ``[prefix, soc, tail]``; ``soc`` may be a node."""
    return dm.concat([exo["prefix"], soc, exo["tail"]], axis=-1)


# -- one step of physics -----------------------------------------------------------------

@dataclass
class StepPhysics:
    reward: object
    r_voltage: object
    r_cost: object
    r_user: object
    vmag: object
    viol: object
    p_ch: object
    p_dis: object
    soc_post: object
    soc_next: object
    spend: object
    psi: object
    diverged: np.ndarray


def reward(vmag, p_ch, p_dis, soc_post, near, price_ch, price_dis, dt, cfg: RewardConfig):
    """Step reward: voltage, trading and departure-SoC terms.

    ``near`` is the 0/1 mask ``occupied & t_left < eps``. Returns
    ``(total, r_voltage, r_cost, r_user, viol, spend, psi)`` batched over the
    leading axis; every input may be an array or a node.
    """
    viol = violation_magnitude(vmag, cfg.v_lo, cfg.v_hi)
    r_voltage = -abs(cfg.lambda1) * dm.sum_(viol, -1)
    spend = dt * dm.sum_(price_ch * p_ch - price_dis * p_dis, -1)
    r_cost = -cfg.lambda2 * spend
    psi = dm.relu(cfg.soc_target - soc_post) * near
    r_user = -abs(cfg.lambda3) * dm.sum_(psi, -1)
    return r_voltage + r_cost + r_user, r_voltage, r_cost, r_user, viol, spend, psi


def physics_step(grid: GridModel, incidence: np.ndarray, exo: dict, soc, action, dt: float,
                 cfg: EnvConfig, diff: bool = False) -> StepPhysics:
    """Apply actions, solve the network, score the step and advance the SoC.

    ``exo`` holds one table row per batch entry (arrays of shape ``(B, ...)``).
    With ``diff=True`` the power flow runs through the fused differentiable
    sweep and divergence raises :class:`DivergenceError` (with ``rows``).
    """
    from .fleet import soc_step

    a = action * exo["occupied"]
    soc_post, p_ch, p_dis = soc_step(soc, a, dt, exo["p_ch_max"], exo["p_dis_max"],
                                     exo["e_max"], exo["soc_min"], exo["efficiency"])
    p_ev = dm.matmul(p_ch - p_dis, incidence)
    p = exo["p_base"] + p_ev
    q = exo["q_base"]
    if diff:
        vmag = solve_fixed_point_diff(grid, p, q, cfg.pf_iters, method="fused")
        diverged = np.zeros(len(q), dtype=bool)
    else:
        vr, vi, diverged = sweep_fixed(grid, p, np.broadcast_to(q, np.shape(p)), cfg.pf_iters,
                                       backend=cfg.backend)
        vmag = voltage_magnitude(vr, vi)
    near = exo["occupied"] * (exo["t_left"] < cfg.reward.eps_steps)
    total, r_v, r_c, r_u, viol, spend, psi = reward(vmag, p_ch, p_dis, soc_post, near,
                                                    exo["price_ch"], exo["price_dis"], dt, cfg.reward)
    soc_next = soc_post * exo["stay"] + exo["arrival_soc"]
    return StepPhysics(total, r_v, r_c, r_u, vmag, viol, p_ch, p_dis, soc_post, soc_next,
                       spend, psi, np.atleast_1d(diverged))


# -- plain environment ---------------------------------------------------------------

@dataclass
class EnvState:
    t: int
    obs: np.ndarray
    soc: np.ndarray
    occupied: np.ndarray
    charger_bus: np.ndarray
    sessions: list = field(default_factory=list, repr=False)

    @property
    def chargers(self) -> list[ChargerState]:
        out = []
        for i, (occ, soc, b) in enumerate(zip(self.occupied, self.soc, self.charger_bus)):
            s = self.sessions[i] if self.sessions else None
            out.append(ChargerState(i, int(b), bool(occ), float(soc), s))
        return out


@dataclass
class StepOutcome:
    """Per-step audit record. ``violations`` is the per-bus voltage term
    (``<= 0``), ``cost_eur`` the money spent this step (negative when the
    fleet earns by discharging)."""

    reward: float
    r_voltage: float
    r_cost: float
    r_user: float
    voltages: np.ndarray
    violations: np.ndarray
    cost_eur: float
    p_ch: np.ndarray
    p_dis: np.ndarray
    done: bool
    diverged: bool = False
    departed: list = field(default_factory=list)


@dataclass
class EpisodeTrace:
    """Raw per-step record of an episode, enough to recount every metric."""

    dt: float
    voltages: list = field(default_factory=list)
    p_ch: list = field(default_factory=list)
    p_dis: list = field(default_factory=list)
    soc: list = field(default_factory=list)
    price_ch: list = field(default_factory=list)
    price_dis: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    r_voltage: list = field(default_factory=list)
    r_cost: list = field(default_factory=list)
    r_user: list = field(default_factory=list)
    departed: list = field(default_factory=list)
    diverged: bool = False

    def write_csv(self, path) -> None:
        """One row per step: reward components, prices, then per-bus voltages,
        per-charger powers and post-step SoC."""
        n_bus = len(self.voltages[0]) if self.voltages else 0
        n_ch = len(self.p_ch[0]) if self.p_ch else 0
        header = (["t", "reward", "r_voltage", "r_cost", "r_user", "price_ch", "price_dis"]
                  + [f"v_{n}" for n in range(n_bus)] + [f"pch_{i}" for i in range(n_ch)]
                  + [f"pdis_{i}" for i in range(n_ch)] + [f"soc_{i}" for i in range(n_ch)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t in range(len(self.rewards)):
                row = [t] + [repr(float(x)) for x in (self.rewards[t], self.r_voltage[t], self.r_cost[t],
                                                       self.r_user[t], self.price_ch[t], self.price_dis[t])]
                row += [repr(float(x)) for x in self.voltages[t]]
                row += [repr(float(x)) for x in self.p_ch[t]]
                row += [repr(float(x)) for x in self.p_dis[t]]
                row += [repr(float(x)) for x in self.soc[t + 1]]
                w.writerow(row)


def read_trace_csv(path):
    """Load a trace written by :meth:`EpisodeTrace.write_csv` into column arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))
    cols = {}
    for prefix in ("v_", "pch_", "pdis_", "soc_"):
        idx = [k for k, h in enumerate(header) if h.startswith(prefix)]
        cols[prefix.rstrip("_")] = body[:, idx]
    for k, h in enumerate(header):
        if not any(h.startswith(p) for p in ("v_", "pch_", "pdis_", "soc_")):
            cols[h] = body[:, k]
    return cols


class ChargingEnv:
    """Plain-valued environment over one exogenous trajectory."""

    def __init__(self, grid: GridModel, trajectory: ExogenousTrajectory,
                 config: EnvConfig | None = None, record: bool = False):
        self.grid = grid
        self.config = config or EnvConfig()
        self.ctx = EpisodeContext(grid, trajectory)
        self.record = record
        self.clip_count = 0
        self.t = None

    @property
    def n_chargers(self) -> int:
        return self.ctx.n_chargers

    @property
    def obs_dim(self) -> int:
        return self.ctx.obs_dim

    def _state(self) -> EnvState:
        ctx, t = self.ctx, self.t
        obs = observation(ctx.row(t), self.soc[None, :])[0]
        sessions = [ctx.traj.sessions[k] if k >= 0 else None for k in ctx.session_at[t]]
        return EnvState(t, obs, self.soc.copy(), ctx.table["occupied"][t].astype(bool),
                        ctx.traj.charger_bus, sessions)

    def reset(self) -> EnvState:
        ctx = self.ctx
        self.t = 0
        self.soc = ctx.soc0.copy()
        self.done = False
        self.clip_count = 0
        self.charged = np.zeros(ctx.n_chargers)
        self.discharged = np.zeros(ctx.n_chargers)
        self.trace = EpisodeTrace(ctx.dt)
        self.trace.soc.append(self.soc.copy())
        self.obs_log = [self._state().obs]
        self.soc_log = [self.soc.copy()]
        self.act_log, self.rew_log, self.done_log = [], [], []
        return self._state()

    def step(self, action) -> tuple[EnvState, StepOutcome]:
        if self.t is None or self.done:
            raise RuntimeError("call reset() before step()")
        ctx, cfg, t = self.ctx, self.config, self.t
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (ctx.n_chargers,):
            raise EnvConfigError(f"action length {a.size} != {ctx.n_chargers} chargers")
        if not np.all(np.isfinite(a)):
            raise ValueError("actions must be finite")
        clipped = np.clip(a, -1.0, 1.0)
        self.clip_count += int(np.count_nonzero(clipped != a))
        exo = ctx.row(t)
        ph = physics_step(self.grid, ctx.incidence, exo, self.soc[None, :], clipped[None, :],
                          ctx.dt, cfg)
        diverged = bool(ph.diverged[0])
        p_ch, p_dis = ph.p_ch[0], ph.p_dis[0]
        if diverged:
            log.warning("power flow diverged at step %d; terminating episode", t)
            r = (float(cfg.divergence_penalty), float(cfg.divergence_penalty), 0.0, 0.0)
        else:
            r = (float(ph.reward[0]), float(ph.r_voltage[0]), float(ph.r_cost[0]), float(ph.r_user[0]))
        self.charged += p_ch * ctx.dt
        self.discharged += p_dis * ctx.dt
        departed = self._departures(t, ph.soc_post[0], final=diverged or t + 1 == ctx.n_steps)
        self.soc = ph.soc_next[0]
        self.t = t + 1
        self.done = diverged or self.t == ctx.n_steps
        out = StepOutcome(r[0], r[1], r[2], r[3], ph.vmag[0], -ph.viol[0], float(ph.spend[0]),
                          p_ch, p_dis, self.done, diverged, departed)
        tr = self.trace
        tr.voltages.append(out.voltages)
        tr.p_ch.append(p_ch)
        tr.p_dis.append(p_dis)
        tr.soc.append(ph.soc_post[0])
        tr.price_ch.append(float(exo["price_ch"][0, 0]))
        tr.price_dis.append(float(exo["price_dis"][0, 0]))
        tr.rewards.append(out.reward)
        tr.r_voltage.append(out.r_voltage)
        tr.r_cost.append(out.r_cost)
        tr.r_user.append(out.r_user)
        tr.departed.extend(departed)
        tr.diverged = diverged
        state = self._state()
        self.soc_log.append(self.soc.copy())
        if self.record:
            self.obs_log.append(state.obs)
            self.act_log.append(clipped)
            self.rew_log.append(out.reward)
            self.done_log.append(self.done)
        return state, out

    def _departures(self, t, soc_post, final):
        ctx = self.ctx
        occ = ctx.table["occupied"][t] > 0
        leaving = occ & (ctx.table["stay"][t] == 0)
        still = occ & ~leaving
        records = []
        for i in np.flatnonzero(leaving | (still & final)):
            s = ctx.traj.sessions[ctx.session_at[t, i]]
            records.append(DepartedRecord(s, t + 1, float(soc_post[i]), float(self.charged[i]),
                                          float(self.discharged[i]), connected_at_end=bool(still[i])))
            self.charged[i] = self.discharged[i] = 0.0
        return records

    def episode_record(self) -> EpisodeRecord:
        """Transitions collected with ``record=True``, ready for the replay store."""
        n = len(self.act_log)
        return EpisodeRecord(exo=self.ctx.table, obs=np.array(self.obs_log), soc=np.array(self.soc_log),
                             actions=np.array(self.act_log).reshape(n, self.n_chargers),
                             rewards=np.array(self.rew_log), dones=np.array(self.done_log, dtype=bool))


# -- differentiable rollout ----------------------------------------------------------------

def rollout_diff(grid: GridModel, incidence: np.ndarray, exo: dict, soc0, policy, bootstrap,
                 k: int, gamma: float, dt: float, cfg: EnvConfig, done=None,
                 reward_scale: float = 1.0):
    """K-step tape-valued objective per batch row.

    ``sum_j gamma^j * scale * R_j + gamma^K * (1 - done) * bootstrap(s_K, pi(s_K))``

    ``exo`` arrays have shape ``(B, >= K + 1, ...)`` (a sampled segment);
    ``policy(obs) -> action`` and ``bootstrap(obs, action) -> (B,)`` work on
    tape values. Exogenous inputs stay constants. Returns ``(objective, rewards)``
    where ``rewards`` lists the per-step reward nodes.
    """
    if k < 1:
        raise ValueError("rollout horizon must be >= 1")
    soc = soc0
    total = None
    rewards = []
    for j in range(k):
        row = {name: v[:, j] for name, v in exo.items()}
        obs = observation(row, soc)
        a = policy(obs)
        ph = physics_step(grid, incidence, row, soc, a, dt, cfg, diff=True)
        rewards.append(ph.reward)
        term = ph.reward * (reward_scale * gamma ** j)
        total = term if total is None else total + term
        soc = ph.soc_next
    last = {name: v[:, k] for name, v in exo.items()}
    obs_k = observation(last, soc)
    boot = bootstrap(obs_k, policy(obs_k))
    keep = 1.0 if done is None else 1.0 - np.asarray(done, dtype=float)
    total = total + boot * (keep * gamma ** k)
    return total, rewards
