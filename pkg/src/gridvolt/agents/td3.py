"""TD3 and physics-informed TD3 (PI-TD3).

Both algorithms share one agent and one update loop. Every iteration samples
a batch of length-``K`` segments from the replay store:

* the twin critics regress on 1-step TD targets built from the segment heads;
* every ``actor_delay`` critic steps the actor is updated. PI-TD3 maximises
  the K-step objective, backpropagated through the differentiable fleet and
  power-flow transition and bootstrapped with ``Q1``. TD3 (``physics=False``)
  maximises ``Q1(s, pi(s))`` at the segment head.

TD3 is therefore exactly PI-TD3 with ``horizon=1, physics=False``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffmath as dm
from ..env import EnvConfig, rollout_diff
from ..powerflow import DivergenceError, GridModel
from .nn import MLP, Adam, ShapeError, soft_update

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    """A loss became NaN/inf; ``diagnostics`` carries a dump for post-mortem."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class EpochAbort(TrainingError):
    """More than the allowed fraction of rollout rows diverged."""


@dataclass
class TrainerConfig:
    algo: str = "pi-td3"
    gamma: float = 0.99
    sigma_explore: float = 0.1
    sigma_smooth: float = 0.2
    noise_clip: float = 0.5
    tau: float = 0.005
    batch_size: int = 64
    horizon: int = 20
    actor_delay: int = 2
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    weight_decay: float = 0.0
    hidden: tuple = (256, 256)
    epochs: int = 10
    episodes_per_epoch: int = 1
    updates_per_episode: int | None = None
    warmup_episodes: int = 1
    eval_every: int = 1
    buffer_capacity: int = 100_000
    reward_scale: float = 1e-3
    t_left_scale: float = 32.0
    physics: bool = True
    max_drop_fraction: float = 0.5
    seeds: tuple = (0,)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.algo == "td3":
            self.horizon, self.physics = 1, False
        self.validate()

    def validate(self):
        if self.algo not in ("pi-td3", "td3"):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon K must be >= 1")
        if self.noise_clip <= 0:
            raise ValueError("noise_clip must be positive")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.actor_delay < 1:
            raise ValueError("batch_size and actor_delay must be >= 1")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.eval_every < 1:
            raise ValueError("bad epoch settings")
        if self.t_left_scale <= 0:
            raise ValueError("t_left_scale must be positive")
        if self.sigma_explore < 0 or self.sigma_smooth < 0:
            raise ValueError("noise std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"], d["seeds"] = list(self.hidden), list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


def observation_scale(n_bus: int, n_chargers: int, t_left_scale: float = 32.0) -> np.ndarray:
    """Fixed per-feature scaling applied before the networks."""
    return np.concatenate([[1.0, 1.0, 5.0], np.ones(2 * n_bus), np.ones(n_chargers),
                           np.full(n_chargers, 1.0 / t_left_scale),
                           np.full(n_chargers, 1.0 / max(n_bus, 1))])


class TD3Agent:
    """Actor, twin critics, their targets and optimisers."""

    def __init__(self, obs_dim: int, act_dim: int, cfg: TrainerConfig, rng: np.random.Generator,
                 obs_scale: np.ndarray | None = None):
        self.obs_dim, self.act_dim, self.cfg = obs_dim, act_dim, cfg
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=float)
        if self.obs_scale.shape != (obs_dim,):
            raise ShapeError("obs_scale does not match the observation width")
        h = cfg.hidden
        self.actor = MLP.init((obs_dim, *h, act_dim), rng, "tanh", out_scale=0.1)
        self.critic1 = MLP.init((obs_dim + act_dim, *h, 1), rng)
        self.critic2 = MLP.init((obs_dim + act_dim, *h, 1), rng)
        self.actor_t = self.actor.copy()
        self.critic1_t = self.critic1.copy()
        self.critic2_t = self.critic2.copy()
        self.opt_actor = Adam(self.actor.params, cfg.lr_actor, weight_decay=cfg.weight_decay)
        self.opt_critic = Adam(self.critic1.params + self.critic2.params, cfg.lr_critic,
                               weight_decay=cfg.weight_decay)
        self.n_critic_updates = 0
        self.n_actor_updates = 0
        self.dropped_rows = 0

    # -- forward helpers (arrays or nodes) --
    def policy(self, obs, params=None, target=False):
        net = self.actor_t if target else self.actor
        return net.forward(obs * self.obs_scale, params)

    def q(self, net: MLP, obs, action, params=None):
        x = dm.concat([obs * self.obs_scale, action], axis=-1)
        return net.forward(x, params)[..., 0]

    def __call__(self, obs):
        return self.policy(np.asarray(obs, dtype=float))

    def networks(self) -> dict:
        return {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
                "actor_t": self.actor_t, "critic1_t": self.critic1_t, "critic2_t": self.critic2_t}


def act(policy, obs, noise_std: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic policy output plus optional Gaussian exploration, clipped to [-1, 1]."""
    obs = np.asarray(obs, dtype=float)
    width = getattr(policy, "obs_dim", None)
    if width is not None and obs.shape[-1] != width:
        raise ShapeError(f"observation width {obs.shape[-1]} != policy input {width}")
    a = np.asarray(policy(obs), dtype=float)
    if noise_std > 0:
        if rng is None:
            raise ValueError("exploration noise needs an rng")
        a = a + noise_std * rng.standard_normal(a.shape)
    return np.clip(a, -1.0, 1.0)


def _check_finite(loss, name, agent, extra=None):
    if not np.isfinite(loss):
        diag = {"loss": name, "value": float(loss), "critic_updates": agent.n_critic_updates,
                "actor_updates": agent.n_actor_updates}
        diag.update(extra or {})
        raise NonFiniteLossError(f"non-finite {name} loss", diag)


def smoothing_noise(cfg: TrainerConfig, shape, rng) -> np.ndarray:
    return np.clip(cfg.sigma_smooth * rng.standard_normal(shape), -cfg.noise_clip, cfg.noise_clip)


def td3_target(agent: TD3Agent, reward, next_obs, done, noise) -> np.ndarray:
    """Clipped double-Q target ``scale * r + gamma * (1 - done) * min(Q1', Q2')(s', pi'(s') + noise)``."""
    cfg = agent.cfg
    a_next = np.clip(agent.policy(next_obs, target=True) + noise, -1.0, 1.0)
    q1_t = agent.q(agent.critic1_t, next_obs, a_next)
    q2_t = agent.q(agent.critic2_t, next_obs, a_next)
    return cfg.reward_scale * reward + cfg.gamma * (1.0 - done) * np.minimum(q1_t, q2_t)


def td3_critic_update(agent: TD3Agent, obs, action, reward, next_obs, done, rng) -> tuple[float, float]:
    """One twin-critic regression step on 1-step targets; returns both MSE losses."""
    noise = smoothing_noise(agent.cfg, action.shape, rng)
    y = td3_target(agent, reward, next_obs, done, noise)

    tape = dm.Tape()
    p1 = agent.critic1.on_tape(tape)
    p2 = agent.critic2.on_tape(tape)
    e1 = agent.q(agent.critic1, obs, action, p1) - y
    e2 = agent.q(agent.critic2, obs, action, p2) - y
    l1 = dm.mean(e1 * e1)
    l2 = dm.mean(e2 * e2)
    loss1, loss2 = float(l1.value), float(l2.value)
    _check_finite(loss1, "critic1", agent)
    _check_finite(loss2, "critic2", agent)
    grads = dm.backward(l1 + l2, p1 + p2)
    agent.opt_critic.step([grads[p] for p in p1 + p2])
    agent.n_critic_updates += 1
    return loss1, loss2


def td3_actor_update(agent: TD3Agent, obs) -> float:
    """Ascend ``Q1(s, pi(s))``; returns the loss ``-mean Q1``."""
    tape = dm.Tape()
    pa = agent.actor.on_tape(tape)
    loss = -dm.mean(agent.q(agent.critic1, obs, agent.policy(obs, pa)))
    val = float(loss.value)
    _check_finite(val, "actor", agent)
    grads = dm.backward(loss, pa)
    agent.opt_actor.step([grads[p] for p in pa])
    agent.n_actor_updates += 1
    return val


@dataclass
class PhysicsSpec:
    """What the actor needs to re-simulate segments on the tape."""

    grid: GridModel
    incidence: np.ndarray
    dt: float
    env_config: EnvConfig = field(default_factory=EnvConfig)


def rollout_objective(agent: TD3Agent, segment, spec: PhysicsSpec, actor_params=None, rows=None):
    """Per-row K-step objective (tape-valued if ``actor_params`` are nodes)."""
    cfg = agent.cfg
    sel = slice(None) if rows is None else rows
    exo = {k: v[sel] for k, v in segment.exo.items()}
    k = segment.horizon
    policy = lambda o: agent.policy(o, actor_params)
    boot = lambda o, a: agent.q(agent.critic1, o, a)
    obj, _ = rollout_diff(spec.grid, spec.incidence, exo, segment.soc0[sel], policy, boot, k,
                          cfg.gamma, spec.dt, spec.env_config, done=segment.done[sel],
                          reward_scale=cfg.reward_scale)
    return obj


def pi_actor_update(agent: TD3Agent, segment, spec: PhysicsSpec) -> float:
    """Maximise the K-step objective through the differentiable simulator.

    Rows whose rollout diverges are dropped and the rollout is repeated on
    the rest; if more than ``max_drop_fraction`` of the batch is lost the
    epoch is aborted.
    """
    cfg = agent.cfg
    rows = np.arange(segment.batch_size)
    while True:
        tape = dm.Tape()
        pa = agent.actor.on_tape(tape)
        try:
            obj = rollout_objective(agent, segment, spec, pa, rows)
            break
        except DivergenceError as exc:
            bad = exc.rows if exc.rows is not None and len(exc.rows) else np.arange(len(rows))
            agent.dropped_rows += len(bad)
            rows = np.delete(rows, bad)
            if len(rows) < (1.0 - cfg.max_drop_fraction) * segment.batch_size or len(rows) == 0:
                raise EpochAbort(f"{segment.batch_size - len(rows)} of {segment.batch_size} "
                                 "rollouts diverged") from exc
    loss = -dm.mean(obj)
    val = float(loss.value)
    _check_finite(val, "actor", agent)
    grads = dm.backward(loss, pa)
    agent.opt_actor.step([grads[p] for p in pa])
    agent.n_actor_updates += 1
    return val


def update_step(agent: TD3Agent, segment, spec: PhysicsSpec | None, rng) -> dict:
    """One iteration of the shared loop: critic step, delayed actor step, soft updates."""
    cfg = agent.cfg
    l1, l2 = td3_critic_update(agent, segment.obs, segment.action, segment.reward,
                               segment.next_obs, segment.head_done, rng)
    out = {"critic1": l1, "critic2": l2, "actor": None}
    if agent.n_critic_updates % cfg.actor_delay == 0:
        if cfg.physics:
            out["actor"] = pi_actor_update(agent, segment, spec)
        else:
            out["actor"] = td3_actor_update(agent, segment.obs)
        soft_update([agent.actor, agent.critic1, agent.critic2],
                    [agent.actor_t, agent.critic1_t, agent.critic2_t], cfg.tau)
    return out
