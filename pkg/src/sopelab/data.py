"""Source policies, score anchors and prior-data datasets under the data root.

Layout of ``$SOPE_DATA_DIR`` (default ``./data``)::

    <env>/policy_{simple,medium,expert}.ckpt   agent checkpoints
    <env>/anchors.json                         random / expert mean returns
    <env>/{simple,medium,expert}.sopd          datasets
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envlab
from .agent import AgentConfig, SacAgent
from .driver import stream
from .errors import DependencyError
from .replay import DualReplayBuffer

log = logging.getLogger(__name__)


@dataclass
class BootstrapConfig:
    env: str = "pendulum"
    steps: int = 30_000
    warmup: int = 1_000
    hidden: tuple = (64, 64)
    batch_size: int = 256
    dtype: str = "float32"
    seed: int = 0
    anchor_episodes: int = 100
    # None picks the per-task default below
    entropy_in_target: bool | None = None


# budgets that reach a converged expert on each task
DEFAULT_BOOTSTRAP_STEPS = {"pendulum-swingup": 150_000, "point-reacher": 30_000, "tabular-chain": 5_000}
DEFAULT_DATASET_SIZE = 50_000
# the soft bonus makes every extra step worth about alpha / (1 - gamma), so a
# max-entropy learner on the chain prefers wandering to the terminal goal
ENTROPY_IN_TARGET = {"tabular-chain": False}


def data_root(root=None):
    return Path(root or os.environ.get("SOPE_DATA_DIR", "data"))


def env_dir(env, root=None):
    return data_root(root) / envlab.make_spec(env).name


def train_source_policies(cfg, root=None):
    """Plain online SAC from scratch; checkpoints at each tier's budget fraction."""
    spec = envlab.make_spec(cfg.env)
    out = env_dir(cfg.env, root)
    out.mkdir(parents=True, exist_ok=True)
    entropy = cfg.entropy_in_target
    if entropy is None:
        entropy = ENTROPY_IN_TARGET.get(spec.name, True)
    agent = SacAgent(AgentConfig.profile("sope", spec.obs_dim, spec.act_dim, hidden=cfg.hidden, dtype=cfg.dtype,
                                         entropy_in_target=entropy),
                     stream(cfg.seed, "bootstrap-init"))
    buffer = DualReplayBuffer(spec.obs_dim, spec.act_dim, cfg.steps, dtype=cfg.dtype)
    rng_env, rng_act = stream(cfg.seed, "bootstrap-env"), stream(cfg.seed, "bootstrap-action")
    rng_upd = stream(cfg.seed, "bootstrap-update")
    marks = {int(round(frac * cfg.steps)): tier for tier, frac in envlab.TIER_FRACTIONS.items()}
    state, obs = envlab.reset(spec, int(rng_env.integers(2**31)))
    paths = {}
    episode_return, recent = 0.0, []
    for t in range(1, cfg.steps + 1):
        if t <= cfg.warmup:
            action = rng_act.uniform(-1, 1, size=spec.act_dim)
        else:
            action = agent.act(obs, rng_act)
        state, tr = envlab.step(state, action)
        buffer.push_online(tr)
        obs = tr.next_obs
        episode_return += tr.reward
        if state.done:
            recent.append(episode_return)
            episode_return = 0.0
            state, obs = envlab.reset(spec, int(rng_env.integers(2**31)))
        if t % max(1, cfg.steps // 20) == 0 and recent:
            log.info("step %d: mean training return %.2f over %d episodes", t, np.mean(recent), len(recent))
            recent = []
        if t > cfg.warmup:
            batch = buffer.symmetric_sample(cfg.batch_size, rng_upd)
            agent.critic_update(batch, rng_upd)
            agent.target_soft_update()
            agent.actor_and_temperature_update(batch, rng_upd)
        if t in marks:
            paths[marks[t]] = out / f"policy_{marks[t]}.ckpt"
            agent.save(paths[marks[t]])
            log.info("saved %s checkpoint at step %d", marks[t], t)
    return paths


def load_policy(env, tier, root=None):
    path = env_dir(env, root) / f"policy_{tier}.ckpt"
    if not path.exists():
        raise DependencyError(f"missing {tier} checkpoint {path}; run `sopelab bootstrap --env {env}` first")
    return SacAgent.load(path)


def bootstrap(cfg, root=None):
    """Train source policies, then compute and store score anchors."""
    train_source_policies(cfg, root)
    expert = load_policy(cfg.env, "expert", root)
    anchors = envlab.compute_anchors(envlab.make_spec(cfg.env), expert.policy(deterministic=True),
                                     episodes=cfg.anchor_episodes, seed=cfg.seed)
    anchors.save(env_dir(cfg.env, root) / "anchors.json")
    return anchors


def tier_dataset(env, tier, count=DEFAULT_DATASET_SIZE, seed=0, root=None):
    """Transitions collected by the tier's checkpoint with stochastic actions."""
    agent = load_policy(env, tier, root)
    policy = agent.policy(deterministic=False)
    return envlab.generate_dataset(envlab.make_spec(env), policy, count, seed=seed, tier=tier)


def generate_all(env, count=DEFAULT_DATASET_SIZE, seed=0, root=None, tiers=envlab.TIERS):
    paths = {}
    for tier in tiers:
        ds = tier_dataset(env, tier, count, seed, root)
        paths[tier] = env_dir(env, root) / f"{tier}.sopd"
        envlab.save_dataset(ds, paths[tier])
        returns = ds.episode_returns()
        log.info("%s/%s: %d transitions, mean episode return %.2f", env, tier, len(ds),
                 float(np.mean(returns)) if len(returns) else float("nan"))
    return paths


def anchors_for(env, root=None):
    return envlab.ScoreAnchors.load(env_dir(env, root) / "anchors.json")
