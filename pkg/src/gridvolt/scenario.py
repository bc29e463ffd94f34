"""Synthetic exogenous trajectories, the ``gridvolt-scenario v1`` format, and
the replay store that serves fixed-exogenous segments for K-step rollouts.

Everything action-independent about an episode lives here: per-bus loads and
PV, prices, and EV sessions. A scenario is a pure function of
``(ScenarioConfig, seed)``.

File layout::

    gridvolt-scenario v1
    grid_id = ieee13
    seed = 7
    dt = 0.25
    n_steps = 96
    n_buses = 13
    charger_bus = 0 0 1 1 ...
    efficiency = 1.0 1.0 ...

    [frames]
    # t, hour, price_ch, price_dis, p_load[N], q_load[N], p_pv[N]
    0, 0.0, 0.21, 0.21, ...

    [sessions]
    # charger, t_a, t_d, e_a, e_target, e_min, e_max, p_ch_max, p_dis_max, soc_min_v2g
    3, 4, 40, 20.0, 45.0, 0.0, 60.0, 11.0, 11.0, 0.2
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fleet import EVSession, ScenarioValidationError, validate_sessions
from .powerflow import GridModel, load_grid

SCENARIO_HEADER = "gridvolt-scenario v1"


class ScenarioError(ValueError):
    pass


class ScenarioParseError(ScenarioError):
    def __init__(self, msg, path=None, line=None):
        where = f"{path or '<scenario>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {msg}")
        self.line = line


@dataclass
class ScenarioConfig:
    """Shape parameters of the synthetic generator.

    Powers are kW, energies kWh, hours are hours of day. ``pv_fraction`` is
    PV peak per bus relative to that bus's nominal load; ``pv_bus_share`` is
    the fraction of buses that host PV.
    """

    grid: str = "ieee13"
    n_steps: int = 96
    dt: float = 0.25
    start_hour: float = 0.0
    chargers_per_bus: int = 2
    n_chargers: int | None = None
    load_multiplier: float = 1.0
    load_noise: float = 0.05
    pv_fraction: float = 0.4
    pv_bus_share: float = 0.5
    cloud_noise: float = 0.3
    price_base: float = 0.20
    price_peak: float = 0.15
    price_noise: float = 0.01
    price_dis_ratio: float = 1.0
    arrivals_per_day: float = 2.0
    arrival_peaks: tuple = (8.0, 18.0)
    arrival_spread: float = 1.5
    stay_hours: tuple = (2.0, 10.0)
    e_max_choices: tuple = (40.0, 60.0, 75.0)
    p_max_choices: tuple = (7.4, 11.0)
    soc_arrival_range: tuple = (0.2, 0.6)
    soc_target_range: tuple = (0.8, 1.0)
    soc_min_v2g: float = 0.2
    reachable_fraction: float = 0.98
    max_retries: int = 1000

    def validate(self):
        if self.n_steps < 1 or self.dt <= 0:
            raise ScenarioError("need n_steps >= 1 and dt > 0")
        if self.n_chargers is not None and self.n_chargers < 0:
            raise ScenarioError("n_chargers must be >= 0")
        if self.chargers_per_bus < 0 or self.load_multiplier < 0:
            raise ScenarioError("chargers_per_bus and load_multiplier must be >= 0")
        if self.arrivals_per_day < 0 or self.arrival_spread <= 0:
            raise ScenarioError("arrival rate must be >= 0 and spread > 0")
        lo, hi = self.stay_hours
        if not 0 < lo <= hi:
            raise ScenarioError("stay_hours must satisfy 0 < lo <= hi")
        for name in ("soc_arrival_range", "soc_target_range"):
            a, b = getattr(self, name)
            if not 0 <= a <= b <= 1:
                raise ScenarioError(f"{name} must lie in [0, 1] and be ordered")
        if not 0 <= self.soc_min_v2g <= self.soc_arrival_range[0]:
            raise ScenarioError("soc_min_v2g must not exceed the lowest arrival SoC")
        if min(self.e_max_choices) <= 0 or min(self.p_max_choices) < 0:
            raise ScenarioError("battery sizes must be > 0 and power limits >= 0")
        if self.price_base < 0 or self.price_dis_ratio < 0:
            raise ScenarioError("prices must be non-negative")
        if not 0 < self.reachable_fraction <= 1:
            raise ScenarioError("reachable_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ScenarioError(f"unknown scenario config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class ExogenousFrame:
    t: int
    hour: float
    p_load: np.ndarray
    q_load: np.ndarray
    p_pv: np.ndarray
    price_ch: float
    price_dis: float


@dataclass(eq=False)
class ExogenousTrajectory:
    """Action-independent episode data, stored column-wise.

    ``p_pv`` follows the load-positive power-flow convention, so generation
    is negative. Per-step views are available through :attr:`frames`.
    """

    grid_id: str
    seed: int
    dt: float
    hours: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    p_pv: np.ndarray
    price_ch: np.ndarray
    price_dis: np.ndarray
    sessions: list
    charger_bus: np.ndarray
    efficiency: np.ndarray = None

    def __post_init__(self):
        if self.efficiency is None:
            self.efficiency = np.ones(len(self.charger_bus))
        t = len(self.hours)
        for name in ("p_load", "q_load", "p_pv"):
            if getattr(self, name).shape != (t, self.n_buses):
                raise ScenarioError(f"{name} must have shape (T, N)")
        if np.any(self.price_ch < 0) or np.any(self.price_dis < 0):
            raise ScenarioError("prices must be non-negative")
        validate_sessions(self.sessions, self.n_chargers)

    @property
    def n_steps(self) -> int:
        return len(self.hours)

    @property
    def n_buses(self) -> int:
        return self.p_load.shape[1]

    @property
    def n_chargers(self) -> int:
        return len(self.charger_bus)

    @property
    def frames(self) -> list[ExogenousFrame]:
        return [ExogenousFrame(t, float(self.hours[t]), self.p_load[t], self.q_load[t],
                               self.p_pv[t], float(self.price_ch[t]), float(self.price_dis[t]))
                for t in range(self.n_steps)]

    def with_load_multiplier(self, m: float) -> "ExogenousTrajectory":
        """Copy with loads scaled by ``m`` (PV, prices and sessions untouched)."""
        return ExogenousTrajectory(self.grid_id, self.seed, self.dt, self.hours.copy(),
                                   self.p_load * m, self.q_load * m, self.p_pv.copy(),
                                   self.price_ch.copy(), self.price_dis.copy(), list(self.sessions),
                                   self.charger_bus.copy(), self.efficiency.copy())

    def __eq__(self, other):
        if not isinstance(other, ExogenousTrajectory):
            return NotImplemented
        arrays = ("hours", "p_load", "q_load", "p_pv", "price_ch", "price_dis",
                  "charger_bus", "efficiency")
        return (self.grid_id == other.grid_id and self.seed == other.seed and self.dt == other.dt
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.sessions == other.sessions)


# -- generator -------------------------------------------------------------------

def _bump(h, center, width):
    """Gaussian bump on the 24 h circle."""
    d = (h - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def load_profile(hours):
    """Double-peak residential shape, peak ~1.0, night trough ~0.45."""
    return 0.45 + 0.35 * _bump(hours, 8.0, 1.5) + 0.55 * _bump(hours, 19.0, 2.0)


def pv_profile(hours):
    """Daylight bell between 6 h and 20 h, peak 1 at 13 h."""
    x = (np.asarray(hours) - 6.0) / 14.0
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 2, 0.0)


def price_profile(hours, base, peak):
    """Day-ahead-like shape: evening peak, smaller morning peak, midday dip."""
    return (base + peak * _bump(hours, 19.0, 2.0) + 0.5 * peak * _bump(hours, 8.0, 1.5)
            - 0.3 * peak * _bump(hours, 13.0, 2.0))


def _arrival_intensity(hours, cfg: ScenarioConfig):
    shape = sum(_bump(hours, c, cfg.arrival_spread) for c in cfg.arrival_peaks)
    norm = len(cfg.arrival_peaks) * cfg.arrival_spread * np.sqrt(2 * np.pi)
    return cfg.arrivals_per_day * shape / norm  # arrivals per hour


def _sessions_for_charger(cid, rng, cfg: ScenarioConfig, hours):
    """Sequential thinning: candidate arrival steps while the charger is busy
    are rejected and redrawn, bounded by ``cfg.max_retries``."""
    T, dt = cfg.n_steps, cfg.dt
    p_arrive = 1.0 - np.exp(-_arrival_intensity(hours, cfg) * dt)
    draws = rng.random(T)
    sessions = []
    busy_until = 0
    rejected = 0
    for t in range(T - 1):
        if draws[t] >= p_arrive[t]:
            continue
        if t < busy_until:
            rejected += 1
            if rejected > cfg.max_retries:
                raise ScenarioError(f"charger {cid}: arrival process keeps colliding; lower the rate")
            continue
        stay = rng.uniform(*cfg.stay_hours)
        t_d = min(T, t + max(1, int(round(stay / dt))))
        e_max = float(rng.choice(cfg.e_max_choices))
        p_max = float(rng.choice(cfg.p_max_choices))
        soc_a = rng.uniform(*cfg.soc_arrival_range)
        soc_t = rng.uniform(*cfg.soc_target_range)
        e_a = soc_a * e_max
        reach = e_a + cfg.reachable_fraction * p_max * (t_d - t) * dt
        e_target = min(soc_t * e_max, reach, e_max)
        e_target = max(e_target, e_a)
        soc_min = min(cfg.soc_min_v2g, soc_a)
        sessions.append(EVSession(cid, t, t_d, e_a, e_target, 0.0, e_max, p_max, p_max, soc_min))
        busy_until = t_d
    return sessions


def generate_scenario(cfg: ScenarioConfig, seed: int, grid: GridModel | None = None) -> ExogenousTrajectory:
    """Deterministic synthetic scenario for ``(cfg, seed)``."""
    cfg.validate()
    grid = grid if grid is not None else load_grid(cfg.grid)
    rng = np.random.default_rng(seed)
    T, N = cfg.n_steps, grid.n_bus
    hours = (cfg.start_hour + np.arange(T) * cfg.dt) % 24.0

    shape = load_profile(hours)
    noise = np.exp(cfg.load_noise * rng.standard_normal((T, N)))
    scale = shape[:, None] * noise * cfg.load_multiplier
    p_load = grid.p_nominal_kw[None, :] * scale
    q_load = grid.q_nominal_kvar[None, :] * scale

    pv_cap = cfg.pv_fraction * grid.p_nominal_kw * (rng.random(N) < cfg.pv_bus_share)
    clouds = 1.0 - cfg.cloud_noise * rng.random((T, N))
    p_pv = -(pv_profile(hours)[:, None] * clouds * pv_cap[None, :])

    price = price_profile(hours, cfg.price_base, cfg.price_peak)
    price = np.maximum(price + cfg.price_noise * rng.standard_normal(T), 0.0)
    price_dis = cfg.price_dis_ratio * price

    if cfg.n_chargers is None:
        charger_bus = np.repeat(np.arange(N), cfg.chargers_per_bus)
    else:
        charger_bus = np.sort(np.arange(cfg.n_chargers) % N)
    sessions = []
    for cid in range(len(charger_bus)):
        sessions += _sessions_for_charger(cid, rng, cfg, hours)
    sessions.sort(key=lambda s: (s.t_arrival, s.charger_id))
    return ExogenousTrajectory(grid.name, int(seed), cfg.dt, hours, p_load, q_load, p_pv,
                               price, price_dis, sessions, charger_bus)


# -- file format -------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def format_trajectory(traj: ExogenousTrajectory) -> str:
    out = [SCENARIO_HEADER, f"grid_id = {traj.grid_id}", f"seed = {traj.seed}",
           f"dt = {_fmt(traj.dt)}", f"n_steps = {traj.n_steps}", f"n_buses = {traj.n_buses}",
           "charger_bus = " + " ".join(str(int(b)) for b in traj.charger_bus),
           "efficiency = " + " ".join(_fmt(e) for e in traj.efficiency), "", "[frames]",
           "# t, hour, price_ch, price_dis, p_load[N], q_load[N], p_pv[N]"]
    for t in range(traj.n_steps):
        row = [str(t), _fmt(traj.hours[t]), _fmt(traj.price_ch[t]), _fmt(traj.price_dis[t])]
        row += [_fmt(x) for x in traj.p_load[t]]
        row += [_fmt(x) for x in traj.q_load[t]]
        row += [_fmt(x) for x in traj.p_pv[t]]
        out.append(", ".join(row))
    out += ["", "[sessions]",
            "# charger, t_a, t_d, e_a, e_target, e_min, e_max, p_ch_max, p_dis_max, soc_min_v2g"]
    for s in traj.sessions:
        out.append(", ".join([str(s.charger_id), str(s.t_arrival), str(s.t_depart)]
                             + [_fmt(x) for x in (s.e_arrival, s.e_target, s.e_min, s.e_max,
                                                  s.p_ch_max, s.p_dis_max, s.soc_min_v2g)]))
    return "\n".join(out) + "\n"


def save_trajectory(traj: ExogenousTrajectory, path) -> None:
    Path(path).write_text(format_trajectory(traj))


_META_KEYS = ("grid_id", "seed", "dt", "n_steps", "n_buses", "charger_bus", "efficiency")


def parse_trajectory(text: str, path=None) -> ExogenousTrajectory:
    lines = text.splitlines()
    head = lines[0].strip() if lines else ""
    if head != SCENARIO_HEADER:
        if head.startswith("gridvolt-scenario"):
            raise ScenarioParseError(f"unsupported scenario version {head!r}", path, 1)
        raise ScenarioParseError(f"missing header {SCENARIO_HEADER!r}", path, 1)
    meta, frames, sessions = {}, [], []
    section = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]").strip()
            if section not in ("frames", "sessions"):
                raise ScenarioParseError(f"unknown section [{section}]", path, lineno)
            continue
        if section is None:
            if "=" not in line:
                raise ScenarioParseError("expected key = value", path, lineno)
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
            continue
        if "n_buses" not in meta:
            raise ScenarioParseError("header block incomplete before data", path, lineno)
        fields = [f.strip() for f in line.split(",")]
        n = int(meta["n_buses"])
        try:
            if section == "frames":
                if len(fields) != 4 + 3 * n:
                    raise ValueError(f"frame row needs {4 + 3 * n} fields, got {len(fields)}")
                if int(fields[0]) != len(frames):
                    raise ValueError(f"frame index {fields[0]} out of order")
                frames.append([float(f) for f in fields[1:]])
            else:
                if len(fields) != 10:
                    raise ValueError(f"session row needs 10 fields, got {len(fields)}")
                sessions.append(EVSession(int(fields[0]), int(fields[1]), int(fields[2]),
                                          *(float(f) for f in fields[3:])))
        except ValueError as exc:
            raise ScenarioParseError(f"[{section}] {exc}", path, lineno) from None
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise ScenarioParseError(f"missing header keys {missing}", path)
    n_steps, n = int(meta["n_steps"]), int(meta["n_buses"])
    if len(frames) != n_steps:
        raise ScenarioParseError(f"expected {n_steps} frames, found {len(frames)} (truncated?)", path)
    data = np.array(frames, dtype=float).reshape(n_steps, 3 + 3 * n)
    try:
        charger_bus = np.array([int(x) for x in meta["charger_bus"].split()], dtype=int)
        eff = np.array([float(x) for x in meta["efficiency"].split()], dtype=float)
        return ExogenousTrajectory(meta["grid_id"], int(meta["seed"]), float(meta["dt"]),
                                   data[:, 0].copy(), data[:, 3:3 + n].copy(),
                                   data[:, 3 + n:3 + 2 * n].copy(), data[:, 3 + 2 * n:].copy(),
                                   data[:, 1].copy(), data[:, 2].copy(), sessions, charger_bus, eff)
    except (ValueError, ScenarioValidationError) as exc:
        raise ScenarioParseError(str(exc), path) from None


def load_trajectory(path) -> ExogenousTrajectory:
    path = Path(path)
    return parse_trajectory(path.read_text(), path=path)


# -- replay store ------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    """Transitions of one episode plus its exogenous table.

    ``exo`` maps names to arrays with a leading time axis of length ``T + 1``
    (see :meth:`gridvolt.env.EpisodeContext.table`). ``obs`` has ``T + 1``
    rows, ``actions``/``rewards``/``dones`` have ``T`` rows.
    """

    exo: dict
    obs: np.ndarray
    soc: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)


@dataclass
class TrajectorySegment:
    """A batch of ``B`` length-``K`` segments (leading axis is the batch).

    ``exo`` arrays have shape ``(B, K + 1, ...)``; the head transition
    ``(obs, action, reward, next_obs, done)`` is the standard 1-step sample.
    ``done`` is true when the segment's last transition ends the episode.
    """

    starts: np.ndarray
    episodes: np.ndarray
    exo: dict
    soc0: np.ndarray
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    head_done: np.ndarray
    done: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.starts)

    @property
    def horizon(self) -> int:
        return next(iter(self.exo.values())).shape[1] - 1


class TrajectoryStore:
    """FIFO replay store over whole episodes; ``capacity`` counts transitions."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: deque[EpisodeRecord] = deque()
        self.n_transitions = 0
        self.n_added = 0

    def add(self, record: EpisodeRecord) -> None:
        if len(record) == 0:
            return
        self.episodes.append(record)
        self.n_transitions += len(record)
        self.n_added += 1
        while self.n_transitions > self.capacity and len(self.episodes) > 1:
            self.n_transitions -= len(self.episodes.popleft())

    def eligible_counts(self, k: int) -> np.ndarray:
        """Number of valid segment starts per stored episode (``start + K <= len``)."""
        return np.array([max(0, len(ep) - k + 1) for ep in self.episodes], dtype=np.int64)

    def __len__(self):
        return self.n_transitions


def sample_segment(store: TrajectoryStore, k: int, batch: int, rng: np.random.Generator):
    """Uniformly sample ``batch`` segments of length ``k``; ``None`` if not ready.

    A segment never crosses an episode boundary. Raises ``ValueError`` when
    ``k`` exceeds every stored episode length (K > T).
    """
    if k < 1 or batch < 1:
        raise ValueError("need k >= 1 and batch >= 1")
    if store.episodes and k > max(len(ep) for ep in store.episodes):
        raise ValueError(f"segment length {k} exceeds the episode length")
    counts = store.eligible_counts(k)
    total = int(counts.sum())
    if total < batch:
        return None
    flat = rng.integers(0, total, size=batch)
    bounds = np.cumsum(counts)
    ep_idx = np.searchsorted(bounds, flat, side="right")
    starts = flat - (bounds[ep_idx] - counts[ep_idx])
    eps = [store.episodes[i] for i in ep_idx]
    exo = {name: np.stack([ep.exo[name][s:s + k + 1] for ep, s in zip(eps, starts)])
           for name in eps[0].exo}
    pick = lambda attr: np.stack([getattr(ep, attr)[s] for ep, s in zip(eps, starts)])
    return TrajectorySegment(
        starts=starts, episodes=ep_idx, exo=exo,
        soc0=pick("soc"),
        obs=pick("obs"),
        action=pick("actions"),
        reward=pick("rewards"),
        next_obs=np.stack([ep.obs[s + 1] for ep, s in zip(eps, starts)]),
        head_done=pick("dones").astype(float),
        done=np.array([ep.dones[s + k - 1] for ep, s in zip(eps, starts)], dtype=float),
    )
