"""EV sessions, charger state and the clamped state-of-charge transition."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffmath as dm


class SessionError(ValueError):
    """A session violates its own invariants."""


class ScenarioValidationError(ValueError):
    """Sessions conflict with each other (e.g. overlap on one charger)."""


@dataclass(frozen=True)
class EVSession:
    """One vehicle visit. Times are step indices, energies kWh, powers kW.

    The charger is occupied for steps ``t_arrival <= t < t_depart``.
    """

    charger_id: int
    t_arrival: int
    t_depart: int
    e_arrival: float
    e_target: float
    e_min: float
    e_max: float
    p_ch_max: float
    p_dis_max: float
    soc_min_v2g: float

    def __post_init__(self):
        if not self.t_arrival < self.t_depart:
            raise SessionError(f"t_arrival {self.t_arrival} >= t_depart {self.t_depart}")
        if not 0 <= self.e_min <= self.e_arrival <= self.e_max:
            raise SessionError("need 0 <= e_min <= e_arrival <= e_max")
        if not self.e_min <= self.e_target <= self.e_max:
            raise SessionError("need e_min <= e_target <= e_max")
        if self.e_max <= 0:
            raise SessionError("e_max must be positive")
        if self.p_ch_max < 0 or self.p_dis_max < 0:
            raise SessionError("power limits must be non-negative")
        if not 0 <= self.soc_min_v2g <= self.e_arrival / self.e_max:
            raise SessionError("soc_min_v2g must lie in [0, e_arrival / e_max]")

    @property
    def soc_arrival(self) -> float:
        return self.e_arrival / self.e_max

    def overlaps(self, other: "EVSession") -> bool:
        return (self.charger_id == other.charger_id and self.t_arrival < other.t_depart
                and other.t_arrival < self.t_depart)


@dataclass
class ChargerState:
    charger_id: int
    bus_index: int
    occupied: bool = False
    soc: float = 0.0
    session: EVSession | None = None
    efficiency: float = 1.0
    charged_kwh: float = 0.0
    discharged_kwh: float = 0.0


@dataclass(frozen=True)
class DepartedRecord:
    session: EVSession
    t_depart: int
    soc_depart: float
    charged_kwh: float = 0.0
    discharged_kwh: float = 0.0
    connected_at_end: bool = False

    @property
    def e_depart(self) -> float:
        return self.soc_depart * self.session.e_max


def soc_step(soc, action, dt, p_ch_max, p_dis_max, e_max, soc_min, efficiency=1.0):
    """Piecewise SoC update; works on floats, arrays and tape nodes.

    ``x = soc + dt * a * p_max / e_max`` with ``p_max`` the charge limit for
    ``a > 0`` and the discharge limit for ``a < 0``, then
    ``soc' = clamp(x, soc_min, 1)``. Realized grid-side powers are
    recomputed from the clamped change so energy bookkeeping stays exact.
    Returns ``(soc', p_ch, p_dis)`` in (fraction, kW, kW).
    """
    push = efficiency * dm.relu(action) * p_ch_max - dm.relu(-action) * p_dis_max / efficiency
    x = soc + dt * push / e_max
    new = dm.clamp(x, soc_min, 1.0)
    delta = new - soc
    p_ch = dm.minimum(dm.relu(delta) * e_max / (efficiency * dt), p_ch_max)
    p_dis = dm.minimum(dm.relu(-delta) * e_max * efficiency / dt, p_dis_max)
    return new, p_ch, p_dis


def _check_charger(state: ChargerState, a):
    if not np.isfinite(dm.value_of(a)).all():
        raise ValueError("action must be finite")


def apply_action(state: ChargerState, a: float, dt: float):
    """Plain-number transition for one charger. Returns ``(soc, p_ch, p_dis)``.

    Unoccupied chargers are a no-op with zero power.
    """
    _check_charger(state, a)
    if not state.occupied:
        return state.soc, 0.0, 0.0
    s = state.session
    new, p_ch, p_dis = soc_step(np.float64(state.soc), np.float64(a), dt, s.p_ch_max,
                                s.p_dis_max, s.e_max, s.soc_min_v2g, state.efficiency)
    return float(new), float(p_ch), float(p_dis)


def apply_action_diff(state: ChargerState, a, dt: float):
    """Same transition with a tape-valued action; returns nodes."""
    _check_charger(state, a)
    if not state.occupied:
        zero = dm.d_mul(a, 0.0)
        return dm.d_add(zero, state.soc), zero, zero
    s = state.session
    return soc_step(np.float64(state.soc), a, dt, s.p_ch_max, s.p_dis_max, s.e_max,
                    s.soc_min_v2g, state.efficiency)


def commit_action(state: ChargerState, a: float, dt: float) -> tuple[float, float]:
    """Apply ``a`` in place, accumulating session energy. Returns realized powers."""
    soc, p_ch, p_dis = apply_action(state, a, dt)
    if state.occupied:
        state.soc = soc
        state.charged_kwh += p_ch * dt
        state.discharged_kwh += p_dis * dt
    return p_ch, p_dis


def validate_sessions(sessions, n_chargers: int | None = None):
    by_charger = {}
    for s in sessions:
        if n_chargers is not None and not 0 <= s.charger_id < n_chargers:
            raise ScenarioValidationError(f"session on unknown charger {s.charger_id}")
        by_charger.setdefault(s.charger_id, []).append(s)
    for cid, group in by_charger.items():
        group.sort(key=lambda s: s.t_arrival)
        for a, b in zip(group, group[1:]):
            if a.overlaps(b):
                raise ScenarioValidationError(
                    f"charger {cid}: sessions [{a.t_arrival},{a.t_depart}) and "
                    f"[{b.t_arrival},{b.t_depart}) overlap")


def process_arrivals_departures(fleet: list[ChargerState], t: int, sessions):
    """Retire sessions departing at ``t``, then connect sessions arriving at ``t``.

    Mutates ``fleet`` and returns the list of :class:`DepartedRecord`.
    """
    departed = []
    for c in fleet:
        if c.occupied and c.session.t_depart <= t:
            departed.append(DepartedRecord(c.session, t, c.soc, c.charged_kwh, c.discharged_kwh))
            c.occupied, c.session, c.soc = False, None, 0.0
            c.charged_kwh = c.discharged_kwh = 0.0
    for s in sessions:
        if s.t_arrival != t:
            continue
        c = fleet[s.charger_id]
        if c.occupied:
            raise ScenarioValidationError(
                f"charger {s.charger_id} is occupied at t={t} by an earlier session")
        c.occupied, c.session, c.soc = True, s, s.soc_arrival
        c.charged_kwh = c.discharged_kwh = 0.0
    return departed


def user_satisfaction(record: DepartedRecord) -> float:
    """``min(1, e_depart / e_target)``; 1.0 for a zero target."""
    target = record.session.e_target
    if target <= 0:
        return 1.0
    return min(1.0, record.e_depart / target)


@dataclass
class Schedule:
    """Session data laid out per step and charger, shape ``(T + 1, I)``.

    Unoccupied slots carry neutral values (``e_max=1``, zero power limits) so
    the vectorised transition leaves them at SoC 0 with zero power.
    ``stay[t]`` marks chargers whose session continues from ``t`` to ``t+1``
    and ``arrival_soc[t]`` holds the SoC of sessions connecting at ``t``.
    """

    occupied: np.ndarray
    e_max: np.ndarray
    p_ch_max: np.ndarray
    p_dis_max: np.ndarray
    soc_min: np.ndarray
    t_left: np.ndarray
    arrival_soc: np.ndarray
    arriving: np.ndarray
    stay: np.ndarray
    efficiency: np.ndarray = field(default=None)


def build_schedule(sessions, n_chargers: int, n_steps: int, efficiency=None) -> Schedule:
    validate_sessions(sessions, n_chargers)
    shape = (n_steps + 1, n_chargers)
    occ = np.zeros(shape)
    e_max = np.ones(shape)
    p_ch = np.zeros(shape)
    p_dis = np.zeros(shape)
    soc_min = np.zeros(shape)
    t_left = np.zeros(shape)
    arr_soc = np.zeros(shape)
    arriving = np.zeros(shape, dtype=bool)
    steps = np.arange(n_steps + 1)
    for s in sessions:
        lo, hi = s.t_arrival, min(s.t_depart, n_steps + 1)
        if lo > n_steps:
            continue
        i = s.charger_id
        occ[lo:hi, i] = 1.0
        e_max[lo:hi, i] = s.e_max
        p_ch[lo:hi, i] = s.p_ch_max
        p_dis[lo:hi, i] = s.p_dis_max
        soc_min[lo:hi, i] = s.soc_min_v2g
        t_left[lo:hi, i] = s.t_depart - steps[lo:hi]
        arr_soc[lo, i] = s.soc_arrival
        arriving[lo, i] = True
    stay = np.zeros(shape)
    stay[:-1] = occ[1:] * ~arriving[1:]
    arr_next = np.zeros(shape)
    arr_next[:-1] = arr_soc[1:]
    eff = np.ones(n_chargers) if efficiency is None else np.asarray(efficiency, dtype=float)
    return Schedule(occ, e_max, p_ch, p_dis, soc_min, t_left, arr_next, arriving, stay, eff)


def make_fleet(charger_bus, efficiency=None) -> list[ChargerState]:
    eff = np.ones(len(charger_bus)) if efficiency is None else efficiency
    return [ChargerState(i, int(b), efficiency=float(e)) for i, (b, e) in enumerate(zip(charger_bus, eff))]


def fleet_snapshot(fleet: list[ChargerState]) -> list[ChargerState]:
    return [replace(c) for c in fleet]
