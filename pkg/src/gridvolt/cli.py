"""``gridvolt`` command-line interface.

Commands: ``gen-scenarios``, ``train``, ``evaluate``, ``benchmark-k``, ``gridcheck``.
Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.

A run is described by one JSON file (every key optional)::

    {
      "grid": "ieee13",
      "scenario": {...ScenarioConfig fields...},
      "train_scenarios": {"n": 8, "seed0": 1000},
      "eval_scenarios": {"n": 4, "seed0": 5000},
      "agents": ["pi-td3", "cafap", "none"],
      "trainer": {...TrainerConfig fields...},
      "reward": {...RewardConfig fields...},
      "env": {"pf_iters": 10, "divergence_penalty": -1e6},
      "seeds": [0]
    }

Command-line flags override the file. Outputs go to ``--out``, else to
``$GRIDVOLT_OUT``, else to ``./gridvolt_out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalharness import config_hash

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_OUT = "gridvolt_out"
LEARNING_AGENTS = ("pi-td3", "td3")
ALL_AGENTS = LEARNING_AGENTS + ("cafap", "none")

log = logging.getLogger("gridvolt")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    grid: str = "ieee13"
    scenario: dict = field(default_factory=dict)
    train_scenarios: dict = field(default_factory=lambda: {"n": 4, "seed0": 1000})
    eval_scenarios: dict = field(default_factory=lambda: {"n": 2, "seed0": 5000})
    agents: list = field(default_factory=lambda: ["pi-td3"])
    trainer: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{p}: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def validate(self):
        for a in self.agents:
            if a not in ALL_AGENTS:
                raise ConfigError(f"unknown agent {a!r}; choose from {ALL_AGENTS}")
        self.scenario_config().validate()
        self.env_config()
        self.trainer_config()

    # builders ------------------------------------------------------------
    def scenario_config(self):
        from .scenario import ScenarioConfig
        d = dict(self.scenario)
        d.setdefault("grid", self.grid)
        return ScenarioConfig.from_dict(d)

    def env_config(self):
        from .env import EnvConfig, RewardConfig
        unknown = set(self.env) - {"pf_iters", "divergence_penalty", "backend"}
        if unknown:
            raise ConfigError(f"unknown env keys {sorted(unknown)}")
        return EnvConfig(reward=RewardConfig(**self.reward), **self.env)

    def trainer_config(self, **override):
        from .agents import TrainerConfig
        d = dict(self.trainer)
        d.update(override)
        d.setdefault("seeds", list(self.seeds))
        return TrainerConfig.from_dict(d)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("GRIDVOLT_OUT") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario_set(run: RunConfig, which: dict, grid):
    from .scenario import generate_scenario, load_trajectory
    if "paths" in which:
        files = []
        for p in which["paths"]:
            p = Path(p)
            files += sorted(p.glob("*.scn")) if p.is_dir() else [p]
        return [load_trajectory(f) for f in files]
    cfg = run.scenario_config()
    n, seed0 = int(which.get("n", 1)), int(which.get("seed0", 0))
    return [generate_scenario(cfg, seed0 + k, grid) for k in range(n)]


def _load_grid(name):
    from .powerflow import load_grid
    return load_grid(name)


# -- commands --------------------------------------------------------------------

def cmd_gen_scenarios(args) -> int:
    from .scenario import generate_scenario, save_trajectory
    run = RunConfig.load(args.config)
    if args.grid:
        run.grid = args.grid
    cfg = run.scenario_config()
    if args.load_multiplier is not None:
        cfg.load_multiplier = args.load_multiplier
    cfg.validate()
    if args.n < 0:
        raise ConfigError("n must be >= 0")
    out = _out_dir(args)
    grid = _load_grid(cfg.grid)
    for k in range(args.n):
        seed = args.seed0 + k
        save_trajectory(generate_scenario(cfg, seed, grid), out / f"scenario_{seed:05d}.scn")
    print(f"wrote {args.n} scenario(s) to {out}")
    return EXIT_OK


def _train_one(payload):
    """Worker: train one seed, write its checkpoint and curve. Returns a summary dict."""
    from .agents import load_checkpoint, save_checkpoint, train, write_curve
    run = RunConfig(**payload["run"])
    seed, out, tag = payload["seed"], Path(payload["out"]), payload["tag"]
    grid = _load_grid(run.grid)
    tcfg = run.trainer_config(**payload.get("override", {}))
    train_set = _scenario_set(run, run.train_scenarios, grid)
    eval_set = _scenario_set(run, run.eval_scenarios, grid)
    agent, start_epoch, rng_state, env_steps = None, 0, None, 0
    if payload.get("resume"):
        agent, header = load_checkpoint(payload["resume"])
        start_epoch = header["extra"].get("epoch", 0)
        rng_state = header["extra"].get("rng_state")
        env_steps = header["extra"].get("env_steps", 0)
        agent.cfg = tcfg
    res = train(grid, train_set, eval_set, tcfg, seed, run.env_config(), agent=agent,
                start_epoch=start_epoch, rng_state=rng_state, start_env_steps=env_steps)
    last_epoch = res.curve[-1].epoch
    extra = {"epoch": last_epoch, "seed": seed, "config_hash": payload["hash"],
             "env_steps": res.env_steps, "rng_state": res.rng_state}
    save_checkpoint(res.agent, out / f"ckpt_{tag}.npz", extra)
    save_checkpoint(res.best_agent, out / f"best_{tag}.npz", dict(extra, best_reward=res.best_reward))
    write_curve(res.curve, out / f"curves_{tag}.csv")
    return {"tag": tag, "best_reward": res.best_reward, "final": res.curve[-1].reward_mean,
            "aborted_epochs": res.aborted_epochs}


def _fan_out(payloads, workers):
    if workers <= 1 or len(payloads) <= 1:
        return [_train_one(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one, payloads))


def _workers(args):
    return args.workers if args.workers else (os.cpu_count() or 1)


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    if args.seeds:
        run.seeds = list(args.seeds)
    override = {}
    if args.epochs is not None:
        override["epochs"] = args.epochs
    if args.algo:
        override["algo"] = args.algo
    run.validate()
    run.trainer_config(**override)
    out = _out_dir(args)
    h = config_hash(run.to_dict())
    if args.resume and not Path(args.resume).is_file():
        raise ConfigError(f"checkpoint {args.resume} does not exist")
    payloads = [{"run": run.to_dict(), "seed": s, "out": str(out), "tag": f"seed{s}",
                 "override": override, "hash": h, "resume": args.resume} for s in run.seeds]
    for r in _fan_out(payloads, _workers(args)):
        print(f"{r['tag']}: best eval reward {r['best_reward']:.6g}, final {r['final']:.6g}")
    return EXIT_OK


def cmd_benchmark_k(args) -> int:
    run = RunConfig.load(args.config)
    if args.seeds:
        run.seeds = list(args.seeds)
    run.validate()
    if any(k < 1 for k in args.k):
        raise ConfigError("every K must be >= 1")
    out = _out_dir(args)
    h = config_hash(run.to_dict())
    payloads = []
    for k in args.k:
        override = {"algo": "pi-td3", "horizon": k}
        if args.epochs is not None:
            override["epochs"] = args.epochs
        run.trainer_config(**override)
        payloads += [{"run": run.to_dict(), "seed": s, "out": str(out), "tag": f"K{k}_seed{s}",
                      "override": override, "hash": h} for s in run.seeds]
    for r in _fan_out(payloads, _workers(args)):
        print(f"{r['tag']}: final eval reward {r['final']:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .agents import ActorPolicy, CafapPolicy, NoChargingPolicy, load_checkpoint
    from .evalharness import evaluate_suite, export_report
    run = RunConfig.load(args.config)
    if args.agents:
        run.agents = list(args.agents)
    if args.scenarios:
        run.eval_scenarios = {"paths": args.scenarios}
    run.validate()
    grid = _load_grid(run.grid)
    policies = []
    for name in run.agents:
        if name in LEARNING_AGENTS:
            if not args.checkpoint:
                raise ConfigError(f"agent {name!r} needs --checkpoint")
            agent, _ = load_checkpoint(args.checkpoint)
            policies.append(ActorPolicy(agent, name))
        elif name == "cafap":
            policies.append(CafapPolicy())
        else:
            policies.append(NoChargingPolicy())
    base = _scenario_set(run, run.eval_scenarios, grid)
    if not base:
        raise ConfigError("no evaluation scenarios")
    out = _out_dir(args)
    multipliers = args.load_multiplier or [None]
    for m in multipliers:
        scen = base if m is None else [s.with_load_multiplier(m) for s in base]
        target = out if m is None else out / f"load_x{m:g}"
        table, traces = evaluate_suite(policies, scen, grid, run.env_config(), keep_traces=args.traces,
                                       config=dict(run.to_dict(), load_multiplier=m))
        export_report(table, target, traces if args.traces else None)
        for alg, rows in table.rows.items():
            print(f"[{'x%g' % m if m is not None else 'base'}] {alg}: reward {rows['reward']['mean']:.6g}"
                  f"  vv_pu {rows['vv_pu']['mean']:.4g}  sat {rows['satisfaction_pct']['mean']:.1f}%")
    return EXIT_OK


def _closed_form_2bus(grid, p, q):
    """|v2| of a slack + one PQ bus network, from the biquadratic voltage equation."""
    z = grid.l_mat[0, 0]
    r, x = z.real, z.imag
    v0 = abs(grid.v_slack)
    b = v0 ** 2 - 2.0 * (r * p + x * q)
    disc = b * b - 4.0 * abs(z) ** 2 * (p * p + q * q)
    return np.sqrt((b + np.sqrt(disc)) / 2.0)


def cmd_gridcheck(args) -> int:
    from .powerflow import (DivergenceError, OracleFailure, solve_fixed_point, solve_newton)
    grid = _load_grid(args.grid)
    rng = np.random.default_rng(args.seed)
    failures = []

    def check(name, ok, detail):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        if not ok:
            failures.append(name)

    resid = grid.reduction_residual()
    check("reduction residual", resid < 1e-9, f"||L Y_red - I|| = {resid:.2e}")
    zero = np.zeros(grid.n_bus)
    prof = solve_fixed_point(grid, (zero, zero))
    dev = float(np.abs(prof.magnitude - abs(grid.v_slack)).max())
    check("no-load profile", dev < 1e-9, f"max ||v| - |v_slack|| = {dev:.2e}")
    kw = 1e3 / grid.s_base
    p_nom = grid.p_nominal_kw * kw
    q_nom = grid.q_nominal_kvar * kw
    if not np.any(p_nom):
        p_nom = np.full(grid.n_bus, 0.1)
        q_nom = np.full(grid.n_bus, 0.03)
    worst, n_ok = 0.0, 0
    for _ in range(args.n_random):
        m = rng.uniform(0.0, 1.2, size=grid.n_bus)
        p, q = p_nom * m, q_nom * m
        try:
            fp = solve_fixed_point(grid, (p, q), max_iters=200, tol=1e-8).magnitude
            nr = solve_newton(grid, (p, q)).magnitude
        except (DivergenceError, OracleFailure) as exc:
            check("oracle equivalence", False, f"solver failure: {exc}")
            break
        worst = max(worst, float(np.abs(fp - nr).max()))
        n_ok += 1
    check("oracle equivalence", worst < 1e-6, f"{n_ok} loadings, max |fp - newton| = {worst:.2e}")
    if grid.n_bus == 1:
        p, q = p_nom[0], q_nom[0]
        fp = solve_fixed_point(grid, (np.array([p]), np.array([q])), tol=1e-12, max_iters=200).magnitude[0]
        cf = _closed_form_2bus(grid, p, q)
        check("2-bus closed form", abs(fp - cf) < 1e-9, f"|v2| = {fp:.12f} vs {cf:.12f}")
    return EXIT_NUMERIC if failures else EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridvolt", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (default: $GRIDVOLT_OUT or ./gridvolt_out)")

    p = sub.add_parser("gen-scenarios", help="write synthetic scenario files")
    common(p)
    p.add_argument("--n", type=int, default=1, help="number of scenarios")
    p.add_argument("--seed0", type=int, default=0, help="first seed; files use seed0..seed0+n-1")
    p.add_argument("--grid", help="grid name or file (overrides config)")
    p.add_argument("--load-multiplier", type=float, help="scale all loads")
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("train", help="train TD3 / PI-TD3 agents, one per seed")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--algo", choices=LEARNING_AGENTS)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--workers", type=int, help="parallel seeds (default: CPU count)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate agents on a scenario set")
    common(p)
    p.add_argument("--agents", nargs="+", choices=ALL_AGENTS)
    p.add_argument("--checkpoint", help="checkpoint for learning agents")
    p.add_argument("--scenarios", nargs="+", help="scenario files or directories of *.scn")
    p.add_argument("--load-multiplier", type=float, nargs="+", help="evaluate at these load scales")
    p.add_argument("--traces", action="store_true", help="also write per-episode traces")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark-k", help="rollout-horizon ablation (one PI-TD3 per K per seed)")
    common(p)
    p.add_argument("--k", type=int, nargs="+", default=[5, 10, 20, 40])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_benchmark_k)

    p = sub.add_parser("gridcheck", help="verify a grid file against the Newton oracle")
    p.add_argument("grid", help="grid file or bundled name (2bus, ieee13, ieee34, ieee123)")
    p.add_argument("--n-random", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gridcheck)
    return ap


def main(argv=None) -> int:
    from .agents import CheckpointError, NonFiniteLossError
    from .powerflow import GridError, PowerFlowError
    from .scenario import ScenarioError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        out = Path(getattr(args, "out", None) or os.environ.get("GRIDVOLT_OUT") or DEFAULT_OUT)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=2, default=str))
        print(f"error: {exc} (diagnostics in {out / 'diagnostics.json'})", file=sys.stderr)
        return EXIT_NUMERIC
    except PowerFlowError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, GridError, ScenarioError, CheckpointError, FileNotFoundError,
            ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
