"""Deterministic desk-scale control tasks, prior-data datasets and score anchors.

Dynamics (all actions live in [-1, 1] and are clipped before use):

pendulum-swingup
    Angle ``th`` measured from upright, angular velocity ``w``.
    ``w += dt * (3 g / (2 l) * sin(th) + 3 / (m l^2) * u)`` with
    ``u = max_torque * a``, then ``w`` clipped to [-8, 8] and
    ``th += dt * w`` (semi-implicit Euler, dt = 0.05, g = 10, m = l = 1).
    Reward ``-(wrap(th)^2 + 0.1 w^2 + 0.001 u^2)``, so 0 at upright rest.
    Episodes start hanging down, ``th = pi + U(-0.1, 0.1)``,
    ``w = U(-0.1, 0.1)``, and are truncated after 200 steps.
    Observation ``[cos th, sin th, w / 8]``.

point-reacher
    Planar double integrator: ``v = 0.9 v + 0.2 a``, ``p = clip(p + 0.1 v, -1, 1)``.
    Goal drawn uniformly from the disc of radius 0.9, start position from
    [-0.5, 0.5]^2 at rest. Reward ``-|p - goal| - 0.05 |a|^2`` (0 at the
    goal with zero action). 50 steps. Observation ``[p, v, goal]``.

tabular-chain
    Cells 0..9, start at 0. ``a > 0`` moves right, otherwise left (cell 0
    stays put). Rewards come from ``CHAIN_REWARDS[cell, direction]``;
    stepping from cell 8 to 9 pays 1 and terminates. 30 steps.
    Observation is the one-hot cell index.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DependencyError, FormatError, UsageError

ENV_NAMES = ("pendulum-swingup", "point-reacher", "tabular-chain")
ALIASES = {"pendulum": "pendulum-swingup", "reacher": "point-reacher", "chain": "tabular-chain"}
TIERS = ("simple", "medium", "expert")
TIER_FRACTIONS = {"simple": 0.1, "medium": 0.4, "expert": 1.0}

PENDULUM_DT = 0.05
PENDULUM_G = 10.0
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 0.7

CHAIN_CELLS = 10
# rows: cell, columns: (left, right)
CHAIN_REWARDS = np.full((CHAIN_CELLS, 2), -0.05)
CHAIN_REWARDS[CHAIN_CELLS - 2, 1] = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    max_steps: int
    reward_range: str = ""
    max_torque: float = 2.0
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ConfigError(f"unknown environment {self.name!r}; choose from {ENV_NAMES}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.action_low != -self.action_high:
            raise ConfigError("action bounds must be symmetric")


def make_spec(name, **overrides):
    name = ALIASES.get(name, name)
    if name == "pendulum-swingup":
        spec = dict(obs_dim=3, act_dim=1, max_steps=200, reward_range="[-16.3, 0]",
                    max_torque=PENDULUM_MAX_TORQUE)
    elif name == "point-reacher":
        spec = dict(obs_dim=6, act_dim=2, max_steps=50, reward_range="[-2.9, 0]")
    elif name == "tabular-chain":
        spec = dict(obs_dim=CHAIN_CELLS, act_dim=1, max_steps=30, reward_range="[-0.05, 1]")
    else:
        raise ConfigError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    spec.update(overrides)
    return EnvSpec(name=name, **spec)


@dataclass
class EnvState:
    spec: EnvSpec
    physical: np.ndarray
    elapsed: int = 0
    done: bool = False


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool
    truncated: bool


def _wrap(th):
    return ((th + math.pi) % (2 * math.pi)) - math.pi


def observe(state):
    spec, x = state.spec, state.physical
    if spec.name == "pendulum-swingup":
        return np.array([math.cos(x[0]), math.sin(x[0]), x[1] / PENDULUM_MAX_SPEED])
    if spec.name == "point-reacher":
        return x.copy()
    obs = np.zeros(CHAIN_CELLS)
    obs[int(x[0])] = 1.0
    return obs


def reset(spec, seed):
    """Initial state and observation; a pure function of ``(spec, seed)``."""
    if not isinstance(spec, EnvSpec):
        spec = make_spec(spec)
    rng = np.random.default_rng(seed)
    if spec.name == "pendulum-swingup":
        physical = np.array([math.pi + rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)])
    elif spec.name == "point-reacher":
        radius = 0.9 * math.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2 * math.pi)
        pos = rng.uniform(-0.5, 0.5, size=2)
        goal = np.array([radius * math.cos(angle), radius * math.sin(angle)])
        physical = np.concatenate([pos, np.zeros(2), goal])
    else:
        physical = np.array([0.0])
    state = EnvState(spec, physical)
    return state, observe(state)


def step(state, action):
    """Advance one step. Returns the successor state and the transition record."""
    if state.done:
        raise UsageError("cannot step a finished episode; call reset()")
    spec = state.spec
    a = np.clip(np.asarray(action, dtype=float).reshape(spec.act_dim), spec.action_low, spec.action_high)
    obs = observe(state)
    x = state.physical
    terminal = False
    if spec.name == "pendulum-swingup":
        th, w = x
        u = spec.max_torque * a[0]
        reward = -(_wrap(th) ** 2 + 0.1 * w * w + 0.001 * u * u)
        w = w + PENDULUM_DT * (1.5 * PENDULUM_G * math.sin(th) + 3.0 * u)
        w = min(max(w, -PENDULUM_MAX_SPEED), PENDULUM_MAX_SPEED)
        th = th + PENDULUM_DT * w
        nxt = np.array([th, w])
    elif spec.name == "point-reacher":
        pos, vel, goal = x[:2], x[2:4], x[4:]
        reward = -float(np.linalg.norm(pos - goal)) - 0.05 * float(a @ a)
        vel = 0.9 * vel + 0.2 * a
        pos = np.clip(pos + 0.1 * vel, -1.0, 1.0)
        nxt = np.concatenate([pos, vel, goal])
    else:
        cell = int(x[0])
        right = int(a[0] > 0)
        reward = float(CHAIN_REWARDS[cell, right])
        cell = min(cell + 1, CHAIN_CELLS - 1) if right else max(cell - 1, 0)
        terminal = cell == CHAIN_CELLS - 1
        nxt = np.array([float(cell)])
    elapsed = state.elapsed + 1
    truncated = (not terminal) and elapsed >= spec.max_steps
    new = EnvState(spec, nxt, elapsed, terminal or truncated)
    return new, Transition(obs, a, float(reward), observe(new), terminal, truncated)


class Env:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, spec):
        self.spec = spec if isinstance(spec, EnvSpec) else make_spec(spec)
        self.state = None

    def reset(self, seed):
        self.state, obs = reset(self.spec, seed)
        return obs

    def step(self, action):
        if self.state is None:
            raise UsageError("reset() before step()")
        self.state, tr = step(self.state, action)
        return tr


def rollout_return(spec, policy, seed, rng=None):
    """Undiscounted return of one episode. ``policy(obs, rng) -> action``."""
    state, obs = reset(spec, seed)
    total = 0.0
    while not state.done:
        state, tr = step(state, policy(obs, rng))
        total += tr.reward
        obs = tr.next_obs
    return total


def uniform_policy(act_dim):
    def policy(obs, rng):
        return rng.uniform(-1.0, 1.0, size=act_dim)
    return policy


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    env: str
    tier: str
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.reward)

    @classmethod
    def empty(cls, env, tier, obs_dim, act_dim):
        return cls(env, tier, np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros(0),
                   np.zeros((0, obs_dim)), np.zeros(0, bool), np.zeros(0, bool))

    @classmethod
    def from_transitions(cls, env, tier, transitions, obs_dim, act_dim):
        if not transitions:
            return cls.empty(env, tier, obs_dim, act_dim)
        return cls(env, tier,
                   np.array([t.obs for t in transitions], dtype=float),
                   np.array([t.action for t in transitions], dtype=float),
                   np.array([t.reward for t in transitions], dtype=float),
                   np.array([t.next_obs for t in transitions], dtype=float),
                   np.array([t.terminal for t in transitions], dtype=bool),
                   np.array([t.truncated for t in transitions], dtype=bool))

    def episode_returns(self):
        """Returns of every complete episode in the dataset."""
        out, acc = [], 0.0
        for r, end in zip(self.reward, self.terminal | self.truncated):
            acc += r
            if end:
                out.append(acc)
                acc = 0.0
        return np.array(out)


def generate_dataset(spec, policy, count, seed, tier="custom"):
    """Roll ``policy`` (stochastic) until exactly ``count`` transitions exist."""
    if not isinstance(spec, EnvSpec):
        spec = make_spec(spec)
    if count < 0:
        raise ConfigError("count must be non-negative")
    rng = np.random.default_rng(seed)
    transitions = []
    while len(transitions) < count:
        state, obs = reset(spec, int(rng.integers(2**31)))
        while not state.done and len(transitions) < count:
            state, tr = step(state, policy(obs, rng))
            transitions.append(tr)
            obs = tr.next_obs
    return Dataset.from_transitions(spec.name, tier, transitions, spec.obs_dim, spec.act_dim)


# Columnar file layout (all integers little-endian):
#   magic "SOPD1"
#   uint16 len + utf-8 environment name
#   uint16 len + utf-8 tier
#   uint64 count, uint32 obs width, uint32 action width
#   float64 columns, each contiguous: obs[count, obs_w], action[count, act_w],
#   reward[count], next_obs[count, obs_w], terminal[count], truncated[count]

DATA_MAGIC = b"SOPD1"


def save_dataset(ds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, obs_w = ds.obs.shape if len(ds) else (0, ds.obs.shape[1])
    act_w = ds.action.shape[1]
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        for text in (ds.env, ds.tier):
            raw = text.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<QII", n, obs_w, act_w))
        for col in (ds.obs, ds.action, ds.reward, ds.next_obs, ds.terminal, ds.truncated):
            fh.write(np.ascontiguousarray(col, dtype="<f8").tobytes())


def load_dataset(path):
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated dataset while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(5, "magic") != DATA_MAGIC:
        raise FormatError("bad magic, not a dataset file", 0)
    texts = []
    for what in ("environment name", "tier"):
        (length,) = struct.unpack("<H", take(2, what))
        start = pos
        try:
            texts.append(take(length, what).decode())
        except UnicodeDecodeError:
            raise FormatError(f"undecodable {what}", start) from None
    n, obs_w, act_w = struct.unpack("<QII", take(16, "shape header"))
    expected = 8 * n * (2 * obs_w + act_w + 3)
    if len(data) - pos != expected:
        raise FormatError(f"payload holds {len(data) - pos} bytes, header implies {expected}", pos)
    cols = []
    for width, what in ((obs_w, "obs"), (act_w, "action"), (None, "reward"), (obs_w, "next_obs"),
                        (None, "terminal"), (None, "truncated")):
        size = n * (width or 1)
        arr = np.frombuffer(take(8 * size, what), dtype="<f8").astype(float)
        cols.append(arr.reshape(n, width) if width is not None else arr)
    for name, col in (("terminal", cols[4]), ("truncated", cols[5])):
        if not np.all((col == 0) | (col == 1)):
            raise FormatError(f"{name} column holds non-boolean values", pos)
    return Dataset(texts[0], texts[1], cols[0], cols[1], cols[2], cols[3],
                   cols[4].astype(bool), cols[5].astype(bool))


def dataset_to_csv(ds, path):
    obs_w, act_w = ds.obs.shape[1], ds.action.shape[1]
    header = ([f"s{i}" for i in range(obs_w)] + [f"a{i}" for i in range(act_w)] + ["r"]
              + [f"s2_{i}" for i in range(obs_w)] + ["terminal", "truncated"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.obs[i]] + [repr(float(v)) for v in ds.action[i]]
                       + [repr(float(ds.reward[i]))] + [repr(float(v)) for v in ds.next_obs[i]]
                       + [int(ds.terminal[i]), int(ds.truncated[i])])


# -- score anchors ----------------------------------------------------------

@dataclass(frozen=True)
class ScoreAnchors:
    env: str
    random_return: float
    expert_return: float
    episodes: int = 0
    seed: int = 0

    def save(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"missing score anchors {path}; run `sopelab bootstrap` first")
        return cls(**json.loads(path.read_text()))


def anchor_seeds(seed, episodes):
    return [int(s) for s in np.random.default_rng(seed).integers(2**31, size=episodes)]


def compute_anchors(spec, expert_policy, episodes=100, seed=0):
    """Mean returns of the uniform policy and the (deterministic) expert on a fixed seed set."""
    if not isinstance(spec, EnvSpec):
        spec = make_spec(spec)
    if episodes < 100:
        raise ConfigError("anchors need at least 100 episodes")
    seeds = anchor_seeds(seed, episodes)
    rng = np.random.default_rng(seed + 1)
    rand = uniform_policy(spec.act_dim)
    random_return = float(np.mean([rollout_return(spec, rand, s, rng) for s in seeds]))
    expert_return = float(np.mean([rollout_return(spec, expert_policy, s, None) for s in seeds]))
    return ScoreAnchors(spec.name, random_return, expert_return, episodes, seed)


def normalized_score(ret, anchors):
    span = anchors.expert_return - anchors.random_return
    if span == 0:
        raise ConfigError("expert and random anchors coincide")
    return 100.0 * (ret - anchors.random_return) / span


# -- exact quantities on the chain ------------------------------------------

def chain_next(cell, right):
    if right:
        return min(cell + 1, CHAIN_CELLS - 1)
    return max(cell - 1, 0)


def chain_expected_return(p_right, max_steps=30):
    """Exact expected undiscounted return of the i.i.d. policy moving right with probability ``p_right``.

    Propagates the occupancy distribution over cells step by step.
    """
    occ = np.zeros(CHAIN_CELLS)
    occ[0] = 1.0
    total = 0.0
    for _ in range(max_steps):
        nxt = np.zeros(CHAIN_CELLS)
        for cell in range(CHAIN_CELLS - 1):
            if occ[cell] == 0.0:
                continue
            for right, p in ((0, 1.0 - p_right), (1, p_right)):
                total += occ[cell] * p * CHAIN_REWARDS[cell, right]
                n = chain_next(cell, right)
                if n != CHAIN_CELLS - 1:
                    nxt[n] += occ[cell] * p
        occ = nxt
    return total


def chain_enumerate_return(p_right, max_steps):
    """Brute force over every action sequence of length ``max_steps``; exponential cost."""
    total = 0.0
    for seq in itertools.product((0, 1), repeat=max_steps):
        k = sum(seq)
        prob = p_right**k * (1.0 - p_right) ** (max_steps - k)
        cell, ret = 0, 0.0
        for right in seq:
            ret += CHAIN_REWARDS[cell, right]
            cell = chain_next(cell, right)
            if cell == CHAIN_CELLS - 1:
                break
        total += prob * ret
    return total


def chain_q_values(p_right, gamma):
    """Exact discounted Q(cell, direction) of the i.i.d. policy with truncation ignored.

    Solves the linear Bellman system; the goal cell is absorbing with value 0.
    """
    n = CHAIN_CELLS - 1
    # V = R_pi + gamma * P_pi V over non-goal cells
    A = np.eye(n)
    b = np.zeros(n)
    for cell in range(n):
        for right, p in ((0, 1.0 - p_right), (1, p_right)):
            b[cell] += p * CHAIN_REWARDS[cell, right]
            nxt = chain_next(cell, right)
            if nxt != n:
                A[cell, nxt] -= gamma * p
    v = np.linalg.solve(A, b)
    q = np.zeros((CHAIN_CELLS, 2))
    for cell in range(n):
        for right in (0, 1):
            nxt = chain_next(cell, right)
            q[cell, right] = CHAIN_REWARDS[cell, right] + (gamma * v[nxt] if nxt != n else 0.0)
    return q
