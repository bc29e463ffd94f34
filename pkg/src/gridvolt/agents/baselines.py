"""Non-learning controllers and the policy wrappers used by the evaluation harness.

A *policy* here is any callable ``policy(state: EnvState) -> action`` with a
``name`` attribute.
"""
from __future__ import annotations

import numpy as np


def act_cafap(fleet) -> np.ndarray:
    """Charge as fast as possible: 1 for occupied chargers below full SoC, else 0.

    ``fleet`` is a list of :class:`~gridvolt.fleet.ChargerState` or an
    :class:`~gridvolt.env.EnvState`.
    """
    if hasattr(fleet, "occupied") and hasattr(fleet, "soc") and not isinstance(fleet, list):
        return (np.asarray(fleet.occupied, dtype=bool) & (np.asarray(fleet.soc) < 1.0)).astype(float)
    return np.array([1.0 if c.occupied and c.soc < 1.0 else 0.0 for c in fleet])


def act_none(n_chargers: int) -> np.ndarray:
    return np.zeros(n_chargers)


class CafapPolicy:
    name = "cafap"

    def __call__(self, state):
        return act_cafap(state)


class NoChargingPolicy:
    name = "none"

    def __call__(self, state):
        return act_none(len(state.soc))


class ActorPolicy:
    """Deterministic evaluation wrapper around a trained actor."""

    def __init__(self, agent, name: str = "pi-td3"):
        self.agent = agent
        self.name = name

    def __call__(self, state):
        return np.clip(self.agent.policy(state.obs[None, :])[0], -1.0, 1.0)


class FixedPlanPolicy:
    """Replays a precomputed ``(T, I)`` action plan (used with the brute-force oracle)."""

    def __init__(self, plan, name: str = "plan"):
        self.plan = np.asarray(plan, dtype=float)
        self.name = name

    def __call__(self, state):
        return self.plan[state.t]
