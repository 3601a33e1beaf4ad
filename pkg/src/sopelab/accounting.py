"""Closed-form compute cost model and the per-run FLOP ledger.

Only dense layers are counted: a ``fan_in -> fan_out`` layer costs
``2 * fan_in * fan_out`` FLOPs per sample forward and twice that backward.
Activations, normalization, the optimizer and environment interaction are
free. Counted passes per unit of work:

critic update
    actor forward on next states, target forward for the ``|Z|`` sampled
    members, live ensemble forward and backward.
actor update
    actor forward, live ensemble forward and backward (for the action
    gradient), actor backward.
dm evaluation (per validation state and action sample)
    actor forward and live ensemble forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

KINDS = ("critic", "actor", "dm")


def network_flops(widths, batch=1, members=1):
    """Forward FLOPs of a dense stack with the given layer widths."""
    return 2 * sum(a * b for a, b in zip(widths[:-1], widths[1:])) * batch * members


def flops_per_update(kind, agent_config, batch):
    """``(forward, backward)`` FLOPs of one unit of ``kind`` at batch size ``batch``."""
    c = agent_config
    actor = network_flops(c.actor_widths, batch)
    critic = network_flops(c.critic_widths, batch)
    if kind == "critic":
        return actor + (c.target_subset + c.ensemble) * critic, 2 * c.ensemble * critic
    if kind == "actor":
        return actor + c.ensemble * critic, 2 * (c.ensemble * critic + actor)
    if kind == "dm":
        return actor + c.ensemble * critic, 0
    if kind == "sac":
        f1, b1 = flops_per_update("critic", c, batch)
        f2, b2 = flops_per_update("actor", c, batch)
        return f1 + f2, b1 + b2
    raise ValueError(f"unknown update kind {kind!r}")


def closed_form_total(update_log, agent_config, batch):
    """Exact FLOPs implied by a logged update sequence of ``(env_step, kind, count)`` rows."""
    fwd = bwd = 0
    for _, kind, count in update_log:
        if kind == "dm":
            f, b = flops_per_update("dm", agent_config, count)
        else:
            f, b = flops_per_update(kind, agent_config, batch)
            f, b = f * count, b * count
        fwd += f
        bwd += b
    return fwd, bwd


@dataclass
class FlopLedger:
    forward: int = 0
    backward: int = 0
    critic_updates: int = 0
    actor_updates: int = 0
    online_critic_updates: int = 0
    phase_critic_updates: int = 0
    dm_states: int = 0
    env_steps: int = 0
    per_phase: list = field(default_factory=list)

    @property
    def total(self):
        return self.forward + self.backward

    @property
    def grad_updates(self):
        """Critic gradient steps; each online SAC step counts once."""
        return self.critic_updates

    def sync(self, counter):
        if counter.forward < self.forward or counter.backward < self.backward:
            raise ValueError("FLOP counters must not decrease")
        self.forward, self.backward = counter.forward, counter.backward
