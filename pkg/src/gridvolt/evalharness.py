"""Episode evaluation, the benchmark metric suite, suite aggregation, the
exhaustive small-instance planner, and report export.

Report files (schema ``gridvolt-summary v1``):

* ``summary.csv`` -- ``algorithm,metric,mean,std`` (no timing fields)
* ``summary.json`` -- same numbers plus scenario count and config hash
* ``timing.csv`` -- ``algorithm,step_time_mean_sec,step_time_std_sec``
* ``episode_<algorithm>_<k>.csv`` -- per-step traces (see :class:`gridvolt.env.EpisodeTrace`)
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import ChargingEnv, EnvConfig, EpisodeContext, EpisodeTrace, physics_step, read_trace_csv
from .fleet import user_satisfaction
from .powerflow import GridModel

SUMMARY_SCHEMA = "gridvolt-summary v1"
METRICS = ("cost_eur", "satisfaction_pct", "vv_per_bus", "vv_per_step", "vv_pu",
           "energy_charged_mwh", "energy_discharged_mwh")
SUMMARY_HEADER = ("algorithm", "metric", "mean", "std")
MAX_PLANS = 10_000_000


class SearchSpaceError(ValueError):
    pass


@dataclass
class EpisodeMetrics:
    """Benchmark metrics for one episode.

    ``cost_eur`` is net revenue (negative when the fleet buys energy);
    ``vv_pu`` is the summed distance outside the voltage band (>= 0).
    """

    cost_eur: float
    satisfaction_pct: float
    vv_per_bus: int
    vv_per_step: int
    vv_pu: float
    energy_charged_mwh: float
    energy_discharged_mwh: float
    step_time_sec: float = 0.0
    partial: bool = False

    def values(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    total_reward: float
    trace: EpisodeTrace | None = None


def metrics_from_trace(trace: EpisodeTrace, v_lo: float = 0.95, v_hi: float = 1.05,
                       step_time: float = 0.0) -> EpisodeMetrics:
    """Vectorised metric computation from an in-memory trace."""
    v = np.asarray(trace.voltages)
    pch = np.asarray(trace.p_ch)
    pdis = np.asarray(trace.p_dis)
    out = (v < v_lo) | (v > v_hi)
    dist = np.maximum(v_lo - v, 0.0) + np.maximum(v - v_hi, 0.0)
    pc = np.asarray(trace.price_ch)[:, None]
    pd = np.asarray(trace.price_dis)[:, None]
    spend = trace.dt * (pc * pch - pd * pdis)
    sat = [user_satisfaction(r) for r in trace.departed]
    return EpisodeMetrics(
        cost_eur=-math.fsum(spend.ravel()) + 0.0,
        satisfaction_pct=100.0 * math.fsum(sat) / len(sat) if sat else 100.0,
        vv_per_bus=int(out.sum()),
        vv_per_step=int(out.any(axis=1).sum()) if out.size else 0,
        vv_pu=math.fsum(dist.ravel()),
        energy_charged_mwh=math.fsum((trace.dt * pch).ravel()) / 1e3,
        energy_discharged_mwh=math.fsum((trace.dt * pdis).ravel()) / 1e3,
        step_time_sec=step_time,
        partial=trace.diverged,
    )


def recount_metrics(trace_csv, trajectory, v_lo: float = 0.95, v_hi: float = 1.05) -> EpisodeMetrics:
    """Independent recount from an exported trace file and the scenario's sessions.

    Plain-Python loops over the parsed CSV; satisfaction is rebuilt from the
    SoC columns at each session's last connected step.
    """
    cols = read_trace_csv(trace_csv)
    n_steps = len(cols["reward"])
    dt = trajectory.dt
    viol_bus, viol_steps, dist, spend, e_ch, e_dis = 0, 0, [], [], [], []
    for t in range(n_steps):
        any_v = False
        for v in cols["v"][t]:
            if v < v_lo or v > v_hi:
                viol_bus += 1
                any_v = True
            dist.append(max(v_lo - v, 0.0) + max(v - v_hi, 0.0))
        viol_steps += any_v
        pc, pd = cols["price_ch"][t], cols["price_dis"][t]
        for a, b in zip(cols["pch"][t], cols["pdis"][t]):
            spend.append(dt * (pc * a - pd * b))
            e_ch.append(dt * a)
            e_dis.append(dt * b)
    sats = []
    for s in trajectory.sessions:
        if s.t_arrival >= n_steps:
            continue
        last = min(s.t_depart, n_steps) - 1
        e_dep = cols["soc"][last][s.charger_id] * s.e_max
        sats.append(1.0 if s.e_target <= 0 else min(1.0, e_dep / s.e_target))
    return EpisodeMetrics(
        cost_eur=-math.fsum(spend) + 0.0,
        satisfaction_pct=100.0 * math.fsum(sats) / len(sats) if sats else 100.0,
        vv_per_bus=viol_bus, vv_per_step=viol_steps, vv_pu=math.fsum(dist),
        energy_charged_mwh=math.fsum(e_ch) / 1e3, energy_discharged_mwh=math.fsum(e_dis) / 1e3,
    )


def run_episode(policy, trajectory, grid: GridModel, env_config: EnvConfig | None = None,
                keep_trace: bool = False) -> EpisodeResult:
    """Roll ``policy`` over one scenario; step time excludes trace I/O."""
    cfg = env_config or EnvConfig()
    env = ChargingEnv(grid, trajectory, cfg)
    state = env.reset()
    total = 0.0
    elapsed = 0.0
    n = 0
    done = False
    while not done:
        t0 = time.perf_counter()
        a = policy(state)
        state, out = env.step(a)
        elapsed += time.perf_counter() - t0
        total += out.reward
        n += 1
        done = out.done
    metrics = metrics_from_trace(env.trace, cfg.reward.v_lo, cfg.reward.v_hi, elapsed / max(n, 1))
    return EpisodeResult(metrics, total, env.trace if keep_trace else None)


@dataclass
class SummaryTable:
    """Per-algorithm mean and (population) std of every metric."""

    rows: dict
    n_scenarios: int
    config_hash: str
    timing: dict = field(default_factory=dict)

    def mean(self, algorithm: str, metric: str) -> float:
        return self.rows[algorithm][metric]["mean"]

    def std(self, algorithm: str, metric: str) -> float:
        return self.rows[algorithm][metric]["std"]

    def to_json(self) -> dict:
        return {"schema": SUMMARY_SCHEMA, "config_hash": self.config_hash,
                "n_scenarios": self.n_scenarios, "algorithms": self.rows}

    @classmethod
    def from_json(cls, d: dict) -> "SummaryTable":
        if d.get("schema") != SUMMARY_SCHEMA:
            raise ValueError(f"unsupported summary schema {d.get('schema')!r}")
        return cls(d["algorithms"], d["n_scenarios"], d["config_hash"])


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate_suite(policies, scenarios, grid: GridModel, env_config: EnvConfig | None = None,
                   keep_traces: bool = False, config: dict | None = None):
    """Evaluate each policy on every scenario; returns ``(SummaryTable, traces)``.

    ``traces`` maps algorithm name to the list of episode traces (empty
    unless ``keep_traces``). Algorithms appear in the order given.
    """
    if not scenarios:
        raise ValueError("need at least one scenario")
    cfg = env_config or EnvConfig()
    rows, timing, traces = {}, {}, {}
    for policy in policies:
        name = policy.name
        results = [run_episode(policy, s, grid, cfg, keep_traces) for s in scenarios]
        rows[name] = {}
        for m in METRICS:
            vals = np.array([getattr(r.metrics, m) for r in results], dtype=float)
            rows[name][m] = {"mean": float(vals.mean()), "std": float(vals.std())}
        rew = np.array([r.total_reward for r in results])
        rows[name]["reward"] = {"mean": float(rew.mean()), "std": float(rew.std())}
        rows[name]["partial_episodes"] = {"mean": float(np.mean([r.metrics.partial for r in results])),
                                          "std": 0.0}
        st = np.array([r.metrics.step_time_sec for r in results])
        timing[name] = (float(st.mean()), float(st.std()))
        traces[name] = [r.trace for r in results] if keep_traces else []
    payload = {"config": config or {}, "grid": grid.name,
               "scenarios": [[s.grid_id, s.seed, s.n_steps] for s in scenarios],
               "algorithms": [p.name for p in policies]}
    return SummaryTable(rows, len(scenarios), config_hash(payload), timing), traces


def export_report(table: SummaryTable, out_dir, traces: dict | None = None, curves: dict | None = None):
    """Write summary.csv/json, timing.csv, episode traces and curves. Returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "summary.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for alg, metrics in table.rows.items():
            for m, v in metrics.items():
                w.writerow([alg, m, repr(v["mean"]), repr(v["std"])])
    written.append(p)
    p = out / "summary.json"
    p.write_text(json.dumps(table.to_json(), indent=2, sort_keys=True) + "\n")
    written.append(p)
    if table.timing:
        p = out / "timing.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("algorithm", "step_time_mean_sec", "step_time_std_sec"))
            for alg, (m, s) in table.timing.items():
                w.writerow([alg, repr(m), repr(s)])
        written.append(p)
    for alg, items in (traces or {}).items():
        for k, tr in enumerate(items):
            p = out / f"episode_{alg}_{k}.csv"
            tr.write_csv(p)
            written.append(p)
    if curves:
        from .agents.trainer import write_curve
        for key, curve in curves.items():
            p = out / f"curves_{key}.csv"
            write_curve(curve, p)
            written.append(p)
    return written


def load_summary(path) -> SummaryTable:
    return SummaryTable.from_json(json.loads(Path(path).read_text()))


# -- exhaustive oracle -----------------------------------------------------------------

@dataclass
class PlanResult:
    actions: np.ndarray
    objective: float
    n_plans: int


def brute_force_plan(grid: GridModel, trajectory, levels=(-1.0, 0.0, 1.0), horizon: int | None = None,
                     env_config: EnvConfig | None = None, chunk: int = 1 << 16) -> PlanResult:
    """Exact maximiser of the undiscounted cumulative reward over a discrete action grid.

    Enumerates all ``len(levels) ** (I * horizon)`` plans breadth-first,
    batching the physics across plans. Ties go to the first plan in
    lexicographic order of level indices.
    """
    cfg = env_config or EnvConfig()
    ctx = EpisodeContext(grid, trajectory)
    horizon = ctx.n_steps if horizon is None else horizon
    if horizon < 0 or horizon > ctx.n_steps:
        raise ValueError(f"horizon must lie in [0, {ctx.n_steps}]")
    levels = np.asarray(levels, dtype=float)
    n_i = ctx.n_chargers
    n_plans = len(levels) ** (n_i * horizon)
    if n_plans > MAX_PLANS:
        raise SearchSpaceError(
            f"{len(levels)}^({n_i}*{horizon}) = {n_plans:.3g} plans exceeds {MAX_PLANS:.0e}; "
            f"reduce levels, chargers or horizon (e.g. horizon <= "
            f"{int(math.log(MAX_PLANS) / math.log(len(levels)) // max(n_i, 1))})")
    if horizon == 0:
        return PlanResult(np.zeros((0, n_i)), 0.0, 1)
    step_actions = np.array(np.meshgrid(*[levels] * n_i, indexing="ij")).reshape(n_i, -1).T
    n_a = len(step_actions)
    soc = ctx.soc0[None, :]
    total = np.zeros(1)
    alive = np.ones(1, dtype=bool)
    hist = np.zeros((1, 0), dtype=np.int32)
    for t in range(horizon):
        m = len(soc)
        soc_rep = np.repeat(soc, n_a, axis=0)
        act_rep = np.tile(step_actions, (m, 1))
        idx = np.tile(np.arange(n_a, dtype=np.int32), m)
        new_soc = np.empty_like(soc_rep)
        rew = np.empty(len(soc_rep))
        div = np.zeros(len(soc_rep), dtype=bool)
        row = ctx.row(t)
        for lo in range(0, len(soc_rep), chunk):
            hi = min(lo + chunk, len(soc_rep))
            exo = {k: np.repeat(v, hi - lo, axis=0) for k, v in row.items()}
            ph = physics_step(grid, ctx.incidence, exo, soc_rep[lo:hi], act_rep[lo:hi], ctx.dt, cfg)
            new_soc[lo:hi] = ph.soc_next
            rew[lo:hi] = ph.reward
            div[lo:hi] = ph.diverged
        alive_rep = np.repeat(alive, n_a)
        rew = np.where(div, cfg.divergence_penalty, rew)
        total = np.repeat(total, n_a) + np.where(alive_rep, rew, 0.0)
        alive = alive_rep & ~div
        hist = np.concatenate([np.repeat(hist, n_a, axis=0), idx[:, None]], axis=1)
        soc = new_soc
    best = int(np.argmax(total))
    return PlanResult(step_actions[hist[best]], float(total[best]), n_plans)
