"""Offline + online transition storage with symmetric mini-batches.

Transitions are addressed by a union index: offline rows occupy
``[0, n_offline)`` and online ring slot ``j`` is ``n_offline + j``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .envlab import Dataset, load_dataset
from .errors import ConfigError, UsageError

OFFLINE, ONLINE = 0, 1


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    origin: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.reward)


@dataclass(frozen=True)
class BatchSpec:
    size: int = 256

    def __post_init__(self):
        if self.size <= 0 or self.size % 2:
            raise ConfigError(f"batch size must be a positive even integer, got {self.size}")

    @property
    def half(self):
        return self.size // 2


@dataclass(frozen=True)
class ValidationSplit:
    validation: np.ndarray
    train_offline: np.ndarray
    train_online: np.ndarray
    fraction: float
    created_at: int
    n_offline: int
    n_online: int

    @property
    def train(self):
        return np.concatenate([self.train_offline, self.train_online])

    def to_csv(self, path):
        """Audit export: one row per union index with its store and half."""
        val = set(self.validation.tolist())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "origin", "half"])
            for i in range(self.n_offline + self.n_online):
                w.writerow([i, "offline" if i < self.n_offline else "online",
                            "validation" if i in val else "train"])


class DualReplayBuffer:
    def __init__(self, obs_dim, act_dim, capacity, dtype=np.float64):
        if capacity < 1:
            raise ConfigError("online capacity must be >= 1")
        self.obs_dim, self.act_dim, self.capacity = obs_dim, act_dim, capacity
        self.dtype = np.dtype(dtype)
        self._off = None
        self._on = {
            "obs": np.zeros((capacity, obs_dim), self.dtype),
            "action": np.zeros((capacity, act_dim), self.dtype),
            "reward": np.zeros(capacity, self.dtype),
            "next_obs": np.zeros((capacity, obs_dim), self.dtype),
            "terminal": np.zeros(capacity, bool),
            "truncated": np.zeros(capacity, bool),
        }
        self.online_size = 0
        self.online_pushes = 0
        self._ptr = 0

    @property
    def offline_size(self):
        return 0 if self._off is None else len(self._off["reward"])

    def __len__(self):
        return self.offline_size + self.online_size

    def load_offline(self, source):
        """Populate the offline store from a dataset file or :class:`Dataset` (once)."""
        if self._off is not None:
            raise UsageError("offline store already loaded")
        ds = source if isinstance(source, Dataset) else load_dataset(source)
        if len(ds) and (ds.obs.shape[1] != self.obs_dim or ds.action.shape[1] != self.act_dim):
            raise ConfigError("dataset widths do not match the buffer")
        self._off = {
            "obs": np.asarray(ds.obs, self.dtype).reshape(-1, self.obs_dim),
            "action": np.asarray(ds.action, self.dtype).reshape(-1, self.act_dim),
            "reward": np.asarray(ds.reward, self.dtype),
            "next_obs": np.asarray(ds.next_obs, self.dtype).reshape(-1, self.obs_dim),
            "terminal": np.asarray(ds.terminal, bool),
            "truncated": np.asarray(ds.truncated, bool),
        }
        for a in self._off.values():
            a.setflags(write=False)
        return self

    def push_online(self, t):
        i = self._ptr
        self._on["obs"][i] = t.obs
        self._on["action"][i] = t.action
        self._on["reward"][i] = t.reward
        self._on["next_obs"][i] = t.next_obs
        self._on["terminal"][i] = t.terminal
        self._on["truncated"][i] = t.truncated
        self._ptr = (i + 1) % self.capacity
        self.online_size = min(self.online_size + 1, self.capacity)
        self.online_pushes += 1
        return self

    def online_transitions(self):
        """Online rows in insertion order (oldest first) as a dict of arrays."""
        if self.online_size < self.capacity:
            order = np.arange(self.online_size)
        else:
            order = (np.arange(self.capacity) + self._ptr) % self.capacity
        return {k: v[order] for k, v in self._on.items()}

    def _gather(self, off_idx, on_idx):
        n_off = self.offline_size
        parts = {}
        for key in self._on:
            chunks = []
            if len(off_idx):
                chunks.append(self._off[key][off_idx])
            if len(on_idx):
                chunks.append(self._on[key][on_idx])
            parts[key] = np.concatenate(chunks) if len(chunks) > 1 else chunks[0]
        origin = np.concatenate([np.full(len(off_idx), OFFLINE), np.full(len(on_idx), ONLINE)])
        index = np.concatenate([np.asarray(off_idx, int), np.asarray(on_idx, int) + n_off])
        return Batch(parts["obs"], parts["action"], parts["reward"], parts["next_obs"],
                     parts["terminal"], parts["truncated"], origin, index)

    def symmetric_sample(self, spec, rng, restrict=None):
        """Half offline, half online, uniform with replacement within each store.

        If fewer online rows than half a batch are available, the deficit is
        drawn from the offline store (and vice versa for an empty offline
        store). ``restrict`` limits both stores to a split's train half.
        """
        if isinstance(spec, int):
            spec = BatchSpec(spec)
        if restrict is not None:
            off_pool, on_pool = restrict.train_offline, restrict.train_online - restrict.n_offline
            n_off_avail, n_on_avail = len(off_pool), len(on_pool)
        else:
            off_pool = on_pool = None
            n_off_avail, n_on_avail = self.offline_size, self.online_size
        if n_off_avail == 0 and n_on_avail == 0:
            raise UsageError("cannot sample from an empty buffer")
        if n_off_avail == 0:
            n_on = spec.size
        else:
            n_on = min(spec.half, n_on_avail)
        n_off = spec.size - n_on
        off_idx = rng.integers(n_off_avail, size=n_off) if n_off else np.zeros(0, int)
        on_idx = rng.integers(n_on_avail, size=n_on) if n_on else np.zeros(0, int)
        if restrict is not None:
            off_idx, on_idx = off_pool[off_idx], on_pool[on_idx]
        return self._gather(off_idx, on_idx)

    def make_split(self, fraction, seed, created_at=0, source="union"):
        """Uniform disjoint train/validation partition.

        ``source="union"`` draws the validation rows from both stores;
        ``source="offline"`` draws them from the offline store only.
        """
        if not 0.0 < fraction < 1.0:
            raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
        if source not in ("union", "offline"):
            raise ConfigError(f"unknown validation source {source!r}")
        n_off = self.offline_size
        total = len(self) if source == "union" else n_off
        if total == 0:
            raise UsageError("cannot split an empty buffer")
        n_val = int(round(fraction * total))
        perm = np.random.default_rng(seed).permutation(total)
        val = np.sort(perm[:n_val])
        train = np.sort(perm[n_val:])
        if source == "offline":
            train = np.concatenate([train, np.arange(n_off, len(self))])
        return ValidationSplit(val, train[train < n_off], train[train >= n_off], fraction,
                               created_at, n_off, self.online_size)

    def states(self, union_index):
        """Observations at the given union indices."""
        union_index = np.asarray(union_index, int)
        n_off = self.offline_size
        out = np.empty((len(union_index), self.obs_dim), self.dtype)
        is_off = union_index < n_off
        if is_off.any():
            out[is_off] = self._off["obs"][union_index[is_off]]
        if (~is_off).any():
            out[~is_off] = self._on["obs"][union_index[~is_off] - n_off]
        return out

    def sample_all(self, restrict=None):
        """Every stored transition (or every train-split transition)."""
        if restrict is not None:
            return self._gather(restrict.train_offline, restrict.train_online - restrict.n_offline)
        return self._gather(np.arange(self.offline_size), np.arange(self.online_size))
