"""Training schedules over one shared loop.

Every schedule steps the environment once per iteration and then runs
``updates_per_step`` critic updates (each followed by a target soft update)
and one actor/temperature update on the last batch. ``sope`` and
``speq_fixed`` additionally pause every ``online_steps`` environment steps
for a critic-only stabilization phase. Because the schedules share this
code path, ``speq_fixed`` with ``n_fix = 0``, ``sacfd`` and ``rlpd_lite``
with ``utd = 1`` on the same agent profile consume identical random
streams and produce identical runs.
"""
from __future__ import annotations

import csv
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envlab
from .accounting import FlopLedger
from .agent import SacAgent
from .errors import ConfigError, DependencyError
from .opestop import PhaseRecord, run_stabilization, write_trace_csv
from .replay import DualReplayBuffer


def stream(seed, name):
    """Named, independent random stream derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def eval_seeds(seed, episodes):
    return [int(s) for s in stream(seed, "eval").integers(2**31, size=episodes)]


def evaluate_policy(agent, spec, episodes, seed, anchors=None):
    """Mean deterministic-mode return over fixed seeds, and its normalized score."""
    if not isinstance(spec, envlab.EnvSpec):
        spec = envlab.make_spec(spec)
    policy = agent.policy(deterministic=True)
    returns = [envlab.rollout_return(spec, policy, s) for s in eval_seeds(seed, episodes)]
    mean = float(np.mean(returns))
    score = envlab.normalized_score(mean, anchors) if anchors is not None else float("nan")
    return mean, score


@dataclass
class RunHooks:
    """Optional observers; none of them may mutate the agent."""

    phase_start: object = None   # (agent, split_or_None, phase_index)
    phase_end: object = None     # (agent, PhaseRecord)
    stab_batch: object = None    # (batch, split_or_None)
    online_batch: object = None  # (batch,)


@dataclass
class RunResult:
    config: object
    evals: list = field(default_factory=list)       # (env_step, mean_return, score, grad_updates, flops)
    flops_trace: list = field(default_factory=list)  # (env_step, fwd, bwd)
    phases: list = field(default_factory=list)
    update_log: list = field(default_factory=list)   # (env_step, kind, count)
    ledger: FlopLedger = field(default_factory=FlopLedger)
    wall_clock: float = 0.0
    agent: object = None

    @property
    def final_score(self):
        return self.evals[-1][2]

    def window_score(self, fraction=0.2):
        """Mean score over the last ``fraction`` of evaluation points."""
        k = max(1, int(round(fraction * len(self.evals))))
        return float(np.mean([e[2] for e in self.evals[-k:]]))

    @property
    def grad_updates(self):
        return self.ledger.grad_updates


def load_prior(config):
    root = config.resolved_data_dir()
    env = envlab.make_spec(config.env).name
    path = root / env / f"{config.tier}.sopd"
    anchors_path = root / env / "anchors.json"
    if not path.exists():
        raise DependencyError(f"missing dataset {path}; run `sopelab bootstrap --env {config.env}` "
                              f"and `sopelab gen-data --env {config.env}` first")
    return envlab.load_dataset(path), envlab.ScoreAnchors.load(anchors_path)


class _Loop:
    def __init__(self, config, dataset, anchors, hooks):
        self.cfg = config
        self.spec = envlab.make_spec(config.env)
        self.anchors = anchors
        self.hooks = hooks or RunHooks()
        seed = config.seed
        agent_cfg = config.agent_config(self.spec.obs_dim, self.spec.act_dim)
        self.agent = SacAgent(agent_cfg, stream(seed, "agent-init"))
        self.buffer = DualReplayBuffer(self.spec.obs_dim, self.spec.act_dim, config.total_steps,
                                       dtype=agent_cfg.dtype)
        if dataset is not None:
            if config.offline_size is not None:
                dataset = _head(dataset, config.offline_size)
            if len(dataset):
                self.buffer.load_offline(dataset)
        self.rng_env = stream(seed, "env")
        self.rng_action = stream(seed, "action")
        self.rng_batch = stream(seed, "batch-sampling")
        self.rng_update = stream(seed, "update")
        self.rng_split = stream(seed, "split")
        self.rng_dm = stream(seed, "dm-eval")
        self.result = RunResult(config)
        self.pending = {"critic": 0, "actor": 0}

    def _flush_log(self, step):
        for kind in ("critic", "actor"):
            if self.pending[kind]:
                self.result.update_log.append((step, kind, self.pending[kind]))
                self.pending[kind] = 0

    def online_update(self):
        agent, cfg, ledger = self.agent, self.cfg, self.result.ledger
        for _ in range(cfg.updates_per_step):
            batch = self.buffer.symmetric_sample(cfg.batch_size, self.rng_batch)
            if self.hooks.online_batch is not None:
                self.hooks.online_batch(batch)
            agent.critic_update(batch, self.rng_update)
            agent.target_soft_update()
        agent.actor_and_temperature_update(batch, self.rng_update)
        ledger.critic_updates += cfg.updates_per_step
        ledger.online_critic_updates += cfg.updates_per_step
        ledger.actor_updates += 1
        self.pending["critic"] += cfg.updates_per_step
        self.pending["actor"] += 1

    def stabilize(self, step):
        cfg, agent, ledger = self.cfg, self.agent, self.result.ledger
        index = len(self.result.phases)
        if cfg.schedule == "sope" or cfg.n_fix:
            # keep the log a faithful sequence; an empty phase must not split rows
            self._flush_log(step)
        before = (agent.flops.forward, agent.flops.backward)
        if cfg.schedule == "speq_fixed":
            if self.hooks.phase_start is not None:
                self.hooks.phase_start(agent, None, index)
            record = PhaseRecord(index, step, stop_reason="fixed")
            for _ in range(cfg.n_fix):
                batch = self.buffer.symmetric_sample(cfg.batch_size, self.rng_batch)
                if self.hooks.stab_batch is not None:
                    self.hooks.stab_batch(batch, None)
                agent.critic_update(batch, self.rng_update)
                agent.target_soft_update()
            record.updates = cfg.n_fix
            if cfg.n_fix:
                self.result.update_log.append((step, "critic", cfg.n_fix))
        else:
            split = self.buffer.make_split(cfg.val_fraction, int(self.rng_split.integers(2**63)),
                                           created_at=step, source=cfg.val_source)
            if self.hooks.phase_start is not None:
                self.hooks.phase_start(agent, split, index)
            dm_seed = int(self.rng_dm.integers(2**63))
            dm_total = [0]

            def on_update(batch):
                if self.hooks.stab_batch is not None:
                    self.hooks.stab_batch(batch, split)

            def on_eval(n):
                dm_total[0] += n

            record = run_stabilization(agent, self.buffer, split, cfg.patience, cfg.eval_interval, cfg.cap,
                                       self.rng_batch, cfg.batch_size, dm_seed=dm_seed,
                                       samples_per_state=cfg.dm_samples, aggregation=cfg.aggregation,
                                       max_val_states=cfg.max_val_states, phase_index=index,
                                       start_env_step=step, on_update=on_update, on_eval=on_eval)
            self.result.update_log.append((step, "critic", record.updates))
            self.result.update_log.append((step, "dm", dm_total[0]))
            ledger.dm_states += dm_total[0]
        ledger.critic_updates += record.updates
        ledger.phase_critic_updates += record.updates
        ledger.per_phase.append((index, step, record.updates,
                                 agent.flops.forward - before[0], agent.flops.backward - before[1]))
        self.result.phases.append(record)
        if self.hooks.phase_end is not None:
            self.hooks.phase_end(agent, record)

    def evaluate(self, step):
        self._flush_log(step)
        ledger = self.result.ledger
        ledger.sync(self.agent.flops)
        mean, score = evaluate_policy(self.agent, self.spec, self.cfg.eval_episodes, self.cfg.seed, self.anchors)
        self.result.evals.append((step, mean, score, ledger.grad_updates, ledger.total))
        self.result.flops_trace.append((step, ledger.forward, ledger.backward))

    def run(self):
        cfg, spec = self.cfg, self.spec
        start = time.perf_counter()
        phased = cfg.schedule in ("sope", "speq_fixed")
        state, obs = envlab.reset(spec, int(self.rng_env.integers(2**31)))
        for step in range(1, cfg.total_steps + 1):
            action = self.agent.act(obs, self.rng_action)
            state, tr = envlab.step(state, action)
            self.buffer.push_online(tr)
            self.result.ledger.env_steps += 1
            obs = tr.next_obs
            if state.done:
                state, obs = envlab.reset(spec, int(self.rng_env.integers(2**31)))
            self.online_update()
            if phased and step % cfg.online_steps == 0:
                self.stabilize(step)
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                self.evaluate(step)
        self._flush_log(cfg.total_steps)
        self.result.ledger.sync(self.agent.flops)
        self.result.wall_clock = time.perf_counter() - start
        self.result.agent = self.agent
        return self.result


def _head(ds, n):
    return envlab.Dataset(ds.env, ds.tier, ds.obs[:n], ds.action[:n], ds.reward[:n], ds.next_obs[:n],
                          ds.terminal[:n], ds.truncated[:n])


def run(config, dataset=None, anchors=None, hooks=None, out_dir=None):
    """Run any schedule. Loads prior data and anchors from the data dir unless given."""
    if dataset is None and anchors is None:
        dataset, anchors = load_prior(config)
    result = _Loop(config, dataset, anchors, hooks).run()
    if out_dir is not None:
        write_run_dir(result, out_dir)
    return result


def _runner(kind):
    def fn(config, **kwargs):
        if config.schedule != kind:
            raise ConfigError(f"run_{kind} needs schedule={kind}, got {config.schedule}")
        return run(config, **kwargs)
    fn.__name__ = f"run_{kind}"
    fn.__doc__ = f"Run the ``{kind}`` schedule (see :func:`run`)."
    return fn


run_sope = _runner("sope")
run_sacfd = _runner("sacfd")
run_rlpd_lite = _runner("rlpd_lite")
run_speq_fixed = _runner("speq_fixed")


# -- run directory ----------------------------------------------------------

METRICS_COLUMNS = ["env_step", "mean_return", "normalized_score", "cum_grad_updates", "cum_flops"]
PHASES_COLUMNS = ["phase_index", "start_env_step", "updates_in_phase", "final_j_dm", "stop_reason"]
FLOPS_COLUMNS = ["env_step", "cum_forward_flops", "cum_backward_flops"]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_run_dir(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, result.evals)
    _write_csv(out / "phases.csv", PHASES_COLUMNS,
               [(p.phase_index, p.start_env_step, p.updates, float(p.final_j_dm), p.stop_reason)
                for p in result.phases])
    _write_csv(out / "flops.csv", FLOPS_COLUMNS, result.flops_trace)
    _write_csv(out / "updates.csv", ["env_step", "kind", "count"], result.update_log)
    write_trace_csv(result.phases, out / "trace.csv")
    (out / "config.txt").write_text(result.config.to_text())
    ledger = result.ledger
    summary = dict(final_score=result.final_score, window_score=result.window_score(),
                   grad_updates=ledger.grad_updates, actor_updates=ledger.actor_updates,
                   phase_updates=ledger.phase_critic_updates, total_flops=ledger.total,
                   wall_clock_s=result.wall_clock)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return out
