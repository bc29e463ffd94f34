"""Versioned checkpoints: one ``.npz`` holding every array plus a JSON header.

Layout (keys inside the archive)::

    header                 JSON string: format, version, config, sizes, counters
    obs_scale              (obs_dim,)
    <net>/<k>              parameter k of net in {actor, critic1, critic2, actor_t, ...}
    opt_actor/m/<k>, opt_actor/v/<k>, opt_critic/m/<k>, opt_critic/v/<k>
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .td3 import TD3Agent, TrainerConfig

CKPT_FORMAT = "gridvolt-ckpt"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(agent: TD3Agent, path, extra: dict | None = None) -> None:
    arrays = {"obs_scale": agent.obs_scale}
    for name, net in agent.networks().items():
        for k, p in enumerate(net.params):
            arrays[f"{name}/{k}"] = p
    for name, opt in (("opt_actor", agent.opt_actor), ("opt_critic", agent.opt_critic)):
        for k, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"{name}/m/{k}"] = m
            arrays[f"{name}/v/{k}"] = v
    header = {
        "format": CKPT_FORMAT, "version": CKPT_VERSION, "config": agent.cfg.to_dict(),
        "obs_dim": agent.obs_dim, "act_dim": agent.act_dim,
        "counters": {"critic": agent.n_critic_updates, "actor": agent.n_actor_updates,
                     "opt_actor_t": agent.opt_actor.t, "opt_critic_t": agent.opt_critic.t,
                     "dropped_rows": agent.dropped_rows},
        "extra": extra or {},
    }
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[TD3Agent, dict]:
    """Rebuild the agent; returns ``(agent, header)``."""
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(str(data["header"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a gridvolt checkpoint")
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = TrainerConfig.from_dict(header["config"])
    agent = TD3Agent(header["obs_dim"], header["act_dim"], cfg, np.random.default_rng(0),
                     data["obs_scale"])
    for name, net in agent.networks().items():
        for k, p in enumerate(net.params):
            p[...] = data[f"{name}/{k}"]
    for name, opt in (("opt_actor", agent.opt_actor), ("opt_critic", agent.opt_critic)):
        for k in range(len(opt.m)):
            opt.m[k][...] = data[f"{name}/m/{k}"]
            opt.v[k][...] = data[f"{name}/v/{k}"]
    c = header["counters"]
    agent.n_critic_updates, agent.n_actor_updates = c["critic"], c["actor"]
    agent.opt_actor.t, agent.opt_critic.t = c["opt_actor_t"], c["opt_critic_t"]
    agent.dropped_rows = c["dropped_rows"]
    return agent, header
