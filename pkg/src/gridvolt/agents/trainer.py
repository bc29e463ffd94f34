"""Training loop shared by TD3 and PI-TD3, plus training-curve I/O.

Each epoch collects ``episodes_per_epoch`` exploratory episodes on randomly
drawn training scenarios. After each episode is stored, the agent performs
``updates_per_episode`` iterations (default: one per environment step). The
deterministic policy is evaluated on held-out scenarios every ``eval_every``
epochs, and the best-scoring snapshot is kept.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..env import ChargingEnv, EnvConfig, charger_incidence
from ..powerflow import GridModel
from ..scenario import TrajectoryStore, sample_segment
from .baselines import ActorPolicy
from .td3 import (EpochAbort, PhysicsSpec, TD3Agent, TrainerConfig, act, observation_scale,
                  update_step)

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "env_steps", "updates", "reward_mean", "reward_std")


@dataclass
class CurvePoint:
    epoch: int
    env_steps: int
    updates: int
    reward_mean: float
    reward_std: float


@dataclass
class TrainResult:
    agent: TD3Agent
    best_agent: TD3Agent
    best_reward: float
    curve: list = field(default_factory=list)
    seed: int = 0
    env_steps: int = 0
    aborted_epochs: int = 0
    rng_state: dict = field(default_factory=dict)


def evaluate_policy(policy, grid: GridModel, scenarios, env_config: EnvConfig | None = None):
    """Total episode reward of a deterministic policy on each scenario."""
    from ..evalharness import run_episode

    return np.array([run_episode(policy, traj, grid, env_config).total_reward for traj in scenarios])


def make_agent(grid: GridModel, scenario, cfg: TrainerConfig, rng) -> TD3Agent:
    obs_dim = 3 + 2 * grid.n_bus + 3 * scenario.n_chargers
    return TD3Agent(obs_dim, scenario.n_chargers, cfg, rng,
                    observation_scale(grid.n_bus, scenario.n_chargers, cfg.t_left_scale))


def collect_episode(agent, grid, traj, env_config, rng, noise_std: float, random_actions: bool):
    env = ChargingEnv(grid, traj, env_config, record=True)
    state = env.reset()
    done = False
    while not done:
        if random_actions:
            a = rng.uniform(-1.0, 1.0, size=env.n_chargers)
        else:
            a = act(agent, state.obs[None, :], noise_std, rng)[0]
        state, out = env.step(a)
        done = out.done
    return env.episode_record()


def train(grid: GridModel, train_scenarios, eval_scenarios, cfg: TrainerConfig, seed: int,
          env_config: EnvConfig | None = None, agent: TD3Agent | None = None,
          start_epoch: int = 0, rng_state: dict | None = None, on_eval=None,
          start_env_steps: int = 0) -> TrainResult:
    """Train one agent. Pass ``agent``/``start_epoch``/``rng_state``/``start_env_steps``
    to resume; the replay store starts empty either way."""
    if not train_scenarios:
        raise ValueError("need at least one training scenario")
    env_config = env_config or EnvConfig()
    rng = np.random.default_rng(seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    first = train_scenarios[0]
    if any(not np.array_equal(t.charger_bus, first.charger_bus) for t in train_scenarios):
        raise ValueError("training scenarios must share one charger layout")
    if agent is None:
        agent = make_agent(grid, first, cfg, rng)
    spec = PhysicsSpec(grid, charger_incidence(grid, first.charger_bus), first.dt, env_config)
    store = TrajectoryStore(cfg.buffer_capacity)
    policy = ActorPolicy(agent)

    def evaluate(epoch, env_steps):
        scores = evaluate_policy(policy, grid, eval_scenarios or train_scenarios[:1], env_config)
        pt = CurvePoint(epoch, env_steps, agent.n_critic_updates, float(scores.mean()), float(scores.std()))
        if on_eval is not None:
            on_eval(pt, agent)
        return pt

    env_steps = start_env_steps
    aborted = 0
    curve = [evaluate(start_epoch, env_steps)]
    best_reward, best_agent = curve[0].reward_mean, copy.deepcopy(agent)
    episodes_seen = start_epoch * cfg.episodes_per_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        try:
            for _ in range(cfg.episodes_per_epoch):
                traj = train_scenarios[int(rng.integers(len(train_scenarios)))]
                record = collect_episode(agent, grid, traj, env_config, rng, cfg.sigma_explore,
                                         random_actions=episodes_seen < cfg.warmup_episodes)
                episodes_seen += 1
                env_steps += len(record)
                store.add(record)
                n_updates = cfg.updates_per_episode if cfg.updates_per_episode is not None else len(record)
                k = min(cfg.horizon, max(len(ep) for ep in store.episodes))
                for _ in range(n_updates):
                    seg = sample_segment(store, k, cfg.batch_size, rng)
                    if seg is None:
                        break
                    update_step(agent, seg, spec, rng)
        except EpochAbort as exc:
            aborted += 1
            log.warning("epoch %d aborted: %s", epoch, exc)
        if epoch % cfg.eval_every == 0 or epoch == start_epoch + cfg.epochs:
            pt = evaluate(epoch, env_steps)
            curve.append(pt)
            if pt.reward_mean > best_reward:
                best_reward, best_agent = pt.reward_mean, copy.deepcopy(agent)
    return TrainResult(agent, best_agent, best_reward, curve, seed, env_steps, aborted,
                       rng.bit_generator.state)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in curve:
            w.writerow([p.epoch, p.env_steps, p.updates, repr(p.reward_mean), repr(p.reward_std)])


def read_curve(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CURVE_HEADER:
        raise ValueError(f"{path}: unexpected curve header {rows[0]}")
    return [CurvePoint(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4])) for r in rows[1:]]
