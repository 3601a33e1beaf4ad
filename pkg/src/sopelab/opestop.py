"""Actor-aligned direct-method value estimate and the patience stopping rule.

During a stabilization phase the actor is frozen and only critics are fit.
Every ``eval_interval`` critic updates the critics are scored on held-out
states under the actor's own action distribution; the phase ends once the
score has failed to beat its running best ``patience`` times in a row.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, UsageError

IMPROVED = "improved"
NO_IMPROVEMENT = "no-improvement"
PATIENCE_EXHAUSTED = "patience-exhausted"


@dataclass(frozen=True)
class DmEstimate:
    value: float
    n_states: int
    samples_per_state: int = 1
    aggregation: str = "min"


def estimate_j_dm(agent, states, rng=None, samples_per_state=1, aggregation="min",
                  deterministic=False, counter=None):
    """Mean over states and sampled actions of the aggregated critic value.

    Critics run in evaluation mode (no dropout). ``deterministic`` uses the
    squashed mean action instead of sampling.
    """
    states = np.asarray(states, agent.dtype)
    if len(states) == 0:
        raise UsageError("validation set is empty")
    if aggregation not in ("min", "mean"):
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    if samples_per_state < 1:
        raise ConfigError("samples_per_state must be >= 1")
    reps = 1 if deterministic else samples_per_state
    obs = np.repeat(states, reps, axis=0) if reps > 1 else states
    act = agent.sample_action(obs, deterministic=deterministic, rng=rng, counter=counter).action
    q, _ = agent.q_values(obs, act, counter=counter)
    agg = q.min(axis=0) if aggregation == "min" else q.mean(axis=0)
    value = float(agg.mean())
    return DmEstimate(value, len(states), reps, aggregation)


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str


@dataclass(frozen=True)
class OpeController:
    patience: int = 5
    eval_interval: int = 500
    best: float = -math.inf
    counter: int = 0
    history: tuple = ()

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be a positive integer")
        if self.eval_interval < 1:
            raise ConfigError("eval interval must be a positive integer")


def observe(controller, estimate, update_count):
    """One step of the patience rule. Returns ``(new_controller, decision)``."""
    value = estimate.value if isinstance(estimate, DmEstimate) else float(estimate)
    if controller.history and update_count <= controller.history[-1][0]:
        raise UsageError("update counts must be strictly increasing")
    history = controller.history + ((update_count, value),)
    if value > controller.best:
        return replace(controller, best=value, counter=0, history=history), StopDecision(False, IMPROVED)
    p = controller.counter + 1
    new = replace(controller, counter=p, history=history)
    if p >= controller.patience:
        return new, StopDecision(True, PATIENCE_EXHAUSTED)
    return new, StopDecision(False, NO_IMPROVEMENT)


def stopping_index(values, patience):
    """Index (0-based) of the observation at which the rule stops, or None."""
    ctl = OpeController(patience=patience)
    for i, v in enumerate(values):
        ctl, decision = observe(ctl, v, i + 1)
        if decision.stop:
            return i
    return None


@dataclass
class PhaseRecord:
    phase_index: int
    start_env_step: int
    updates: int = 0
    trace: list = field(default_factory=list)
    stop_reason: str = ""
    n_validation: int = 0

    @property
    def final_j_dm(self):
        return self.trace[-1][1] if self.trace else float("nan")


def run_stabilization(agent, buffer, split, patience, eval_interval, cap, rng, batch_size=256,
                      dm_seed=0, samples_per_state=1, aggregation="min", max_val_states=None,
                      phase_index=0, start_env_step=0, on_update=None, on_eval=None):
    """Critic-only training on the split's train half until the patience rule fires or ``cap``.

    The actor and temperature are never touched. Targets are soft-updated
    after every critic update. Every evaluation reuses one generator seeded
    with ``dm_seed`` so successive estimates differ only through the critics.
    ``on_update(batch)`` and ``on_eval(n_states)`` are accounting hooks.
    """
    if cap < eval_interval:
        raise ConfigError("cap must be at least one eval interval")
    val_idx = split.validation
    if max_val_states is not None and len(val_idx) > max_val_states:
        val_idx = np.sort(np.random.default_rng(dm_seed).choice(val_idx, max_val_states, replace=False))
    states = buffer.states(val_idx)
    controller = OpeController(patience=patience, eval_interval=eval_interval)
    record = PhaseRecord(phase_index, start_env_step, n_validation=len(states))
    while record.updates + eval_interval <= cap:
        for _ in range(eval_interval):
            batch = buffer.symmetric_sample(batch_size, rng, restrict=split)
            agent.critic_update(batch, rng)
            agent.target_soft_update()
            if on_update is not None:
                on_update(batch)
        record.updates += eval_interval
        est = estimate_j_dm(agent, states, np.random.default_rng(dm_seed), samples_per_state,
                            aggregation, counter=agent.flops)
        if on_eval is not None:
            on_eval(len(states) * est.samples_per_state)
        controller, decision = observe(controller, est, record.updates)
        record.trace.append((record.updates, est.value, decision.reason))
        if decision.stop:
            record.stop_reason = PATIENCE_EXHAUSTED
            return record
    record.stop_reason = "cap"
    return record


TRACE_COLUMNS = ["phase_index", "env_step_at_start", "eval_index", "update_count", "j_dm", "decision"]


def write_trace_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rec in records:
            for i, (count, value, reason) in enumerate(rec.trace):
                w.writerow([rec.phase_index, rec.start_env_step, i, count, repr(value), reason])
