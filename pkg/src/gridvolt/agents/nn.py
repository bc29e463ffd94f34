"""Multilayer perceptrons and adaptive-moment optimisers on the numpy tape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffmath as dm


class ShapeError(ValueError):
    pass


@dataclass
class MLP:
    """Fully connected network ``x -> relu(...) -> out_act``.

    ``params`` alternates weight ``(fan_in, fan_out)`` and bias ``(fan_out,)``.
    """

    sizes: tuple
    out_act: str = "identity"
    params: list = field(default_factory=list)

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, out_act: str = "identity", out_scale: float = 1.0):
        """Uniform fan-in initialisation; the last layer is scaled by ``out_scale``."""
        if out_act not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {out_act!r}")
        params = []
        for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fi)
            if k == len(sizes) - 2:
                bound *= out_scale
            params.append(rng.uniform(-bound, bound, size=(fi, fo)))
            params.append(rng.uniform(-bound, bound, size=fo))
        return cls(tuple(int(s) for s in sizes), out_act, params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x, params=None):
        """Evaluate on arrays or nodes; ``params`` overrides (e.g. tape leaves)."""
        ps = self.params if params is None else params
        if np.shape(dm.value_of(x))[-1] != self.sizes[0]:
            raise ShapeError(f"input width {np.shape(dm.value_of(x))[-1]} != {self.sizes[0]}")
        h = x
        n_layers = len(ps) // 2
        for k in range(n_layers):
            h = dm.matmul(h, ps[2 * k]) + ps[2 * k + 1]
            if k < n_layers - 1:
                h = dm.relu(h)
        if self.out_act == "tanh":
            h = dm.tanh(h)
        return h

    __call__ = forward

    def on_tape(self, tape: dm.Tape) -> list:
        return [tape.var(p) for p in self.params]

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.out_act, [p.copy() for p in self.params])


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``weight_decay > 0``)."""

    def __init__(self, params: list, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        """In-place update of ``self.params`` (the arrays are modified, not rebound)."""
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameters")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def soft_update(nets, targets, tau: float) -> None:
    """``target <- tau * net + (1 - tau) * target`` for every parameter, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    nets = nets if isinstance(nets, (list, tuple)) else [nets]
    targets = targets if isinstance(targets, (list, tuple)) else [targets]
    if len(nets) != len(targets):
        raise ShapeError("net/target lists differ in length")
    for net, tgt in zip(nets, targets):
        if len(net.params) != len(tgt.params):
            raise ShapeError("networks have different layer counts")
        for p, t in zip(net.params, tgt.params):
            if p.shape != t.shape:
                raise ShapeError(f"parameter shape {p.shape} != target shape {t.shape}")
            if tau == 1.0:
                t[...] = p
            elif tau > 0.0:
                t *= 1.0 - tau
                t += tau * p
