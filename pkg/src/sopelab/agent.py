"""Soft actor-critic with a stacked critic ensemble and subset-min TD targets."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, FormatError, NumericError

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class AgentConfig:
    obs_dim: int
    act_dim: int
    hidden: tuple = (256, 256)
    ensemble: int = 2
    target_subset: int = 2
    dropout: float = 0.01
    layer_norm: bool = True
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 1.0
    target_entropy: float | None = None
    entropy_in_target: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.ensemble < 2:
            raise ConfigError("critic ensemble needs at least 2 members")
        if not 2 <= self.target_subset <= self.ensemble:
            raise ConfigError("target subset size must lie in [2, ensemble]")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.target_entropy is None:
            self.target_entropy = -float(self.act_dim)

    @classmethod
    def profile(cls, name, obs_dim, act_dim, **overrides):
        """``sope``: twin critics + dropout; ``rlpd_lite``: 10 critics, no dropout."""
        if name == "sope":
            base = dict(ensemble=2, target_subset=2, dropout=0.01, layer_norm=True)
        elif name == "rlpd_lite":
            base = dict(ensemble=10, target_subset=2, dropout=0.0, layer_norm=True)
        else:
            raise ConfigError(f"unknown agent profile {name!r}")
        base.update(overrides)
        return cls(obs_dim, act_dim, **base)

    @property
    def actor_widths(self):
        return [self.obs_dim, *self.hidden, 2 * self.act_dim]

    @property
    def critic_widths(self):
        return [self.obs_dim + self.act_dim, *self.hidden, 1]


@dataclass
class ActionSample:
    pre_squash: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray | None


@dataclass
class UpdateReport:
    critic_losses: np.ndarray | None = None
    actor_loss: float | None = None
    temperature_loss: float | None = None
    mean_td_target: float | None = None
    critic_updates: int = 0
    actor_updates: int = 0
    forward_flops: int = 0
    backward_flops: int = 0


def squash_log_prob(eps, log_std, u):
    """log N(u; mu, sigma) - sum log(1 - tanh(u)^2), written stably."""
    gauss = -0.5 * eps * eps - log_std - _HALF_LOG_2PI
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    log_det = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return (gauss - log_det).sum(axis=-1)


class SacAgent:
    def __init__(self, config, rng):
        self.config = config
        c = config
        dtype = np.dtype(c.dtype)
        self.actor = nx.init_mlp(c.actor_widths, rng, dtype=dtype)
        self.critic = nx.init_mlp(c.critic_widths, rng, layer_norm=c.layer_norm,
                                  keep_prob=1.0 - c.dropout, ensemble=c.ensemble, dtype=dtype)
        self.target = self.critic.copy()
        self.log_alpha = math.log(c.init_alpha)
        self.actor_opt = nx.AdamState.for_params(self.actor, lr=c.actor_lr)
        self.critic_opt = nx.AdamState.for_params(self.critic, lr=c.critic_lr)
        self.alpha_opt = dict(m=0.0, v=0.0, step=0, lr=c.alpha_lr, beta1=0.9, beta2=0.999, eps=1e-8)
        self.flops = nx.FlopCounter()

    @property
    def alpha(self):
        return math.exp(self.log_alpha)

    @property
    def dtype(self):
        return self.actor.dtype

    # -- policy ---------------------------------------------------------------

    def _policy_head(self, obs, counter=None):
        out, tape = nx.forward(self.actor, obs, counter=counter)
        a = self.config.act_dim
        mean = out[..., :a]
        raw = out[..., a:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        if not np.all(np.isfinite(out)):
            raise NumericError("actor produced non-finite output")
        return mean, log_std, raw, tape

    def sample_action(self, obs, deterministic=False, rng=None, counter=None):
        mean, log_std, _, _ = self._policy_head(obs, counter)
        if deterministic:
            return ActionSample(mean, np.tanh(mean), None)
        eps = rng.standard_normal(mean.shape).astype(mean.dtype)
        u = mean + np.exp(log_std) * eps
        return ActionSample(u, np.tanh(u), squash_log_prob(eps, log_std, u))

    def act(self, obs, rng, deterministic=False):
        return self.sample_action(np.asarray(obs), deterministic, rng).action

    def policy(self, deterministic=True):
        """``policy(obs, rng) -> action`` closure for environment rollouts."""
        def fn(obs, rng):
            return self.act(obs, rng, deterministic).astype(float)
        return fn

    # -- critics --------------------------------------------------------------

    def q_values(self, obs, action, params=None, train=False, rng=None, counter=None):
        params = self.critic if params is None else params
        x = np.concatenate([np.asarray(obs, self.dtype), np.asarray(action, self.dtype)], axis=-1)
        q, tape = nx.forward(params, x, train=train, rng=rng, counter=counter)
        return q[..., 0], tape

    def td_target(self, batch, rng, counter=None):
        c = self.config
        nxt = self.sample_action(batch.next_obs, rng=rng, counter=counter)
        subset = np.sort(rng.choice(c.ensemble, size=c.target_subset, replace=False))
        q_next, _ = self.q_values(batch.next_obs, nxt.action, params=self.target.select(subset),
                                  counter=counter)
        soft = q_next.min(axis=0)
        if c.entropy_in_target:
            soft = soft - self.alpha * nxt.log_prob
        not_done = 1.0 - np.asarray(batch.terminal, self.dtype)
        return np.asarray(batch.reward, self.dtype) + c.gamma * not_done * soft

    def critic_update(self, batch, rng):
        before = (self.flops.forward, self.flops.backward)
        y = self.td_target(batch, rng, counter=self.flops)
        q, tape = self.q_values(batch.obs, batch.action, train=True, rng=rng, counter=self.flops)
        diff = q - y
        losses = (diff * diff).mean(axis=-1)
        if not np.all(np.isfinite(losses)):
            raise NumericError("non-finite critic loss")
        upstream = (2.0 / len(y)) * diff[..., None]
        grads = nx.backward(self.critic, tape, upstream, counter=self.flops)
        nx.adam_step(self.critic, grads, self.critic_opt)
        return UpdateReport(critic_losses=losses, mean_td_target=float(y.mean()), critic_updates=1,
                            forward_flops=self.flops.forward - before[0],
                            backward_flops=self.flops.backward - before[1])

    def actor_and_temperature_update(self, batch, rng):
        c = self.config
        before = (self.flops.forward, self.flops.backward)
        obs = np.asarray(batch.obs, self.dtype)
        n = len(obs)
        mean, log_std, raw, atape = self._policy_head(obs, counter=self.flops)
        std = np.exp(log_std)
        eps = rng.standard_normal(mean.shape).astype(mean.dtype)
        u = mean + std * eps
        a = np.tanh(u)
        logp = squash_log_prob(eps, log_std, u)
        alpha = self.alpha

        q, ctape = self.q_values(obs, a, train=True, rng=rng, counter=self.flops)
        member = q.argmin(axis=0)
        q_min = q[member, np.arange(n)]
        actor_loss = float((alpha * logp - q_min).mean())
        if not math.isfinite(actor_loss):
            raise NumericError("non-finite actor loss")

        up_q = np.zeros(q.shape + (1,), self.dtype)
        up_q[member, np.arange(n), 0] = -1.0 / n
        _, gin = nx.backward(self.critic, ctape, up_q, need_input_grad=True, counter=self.flops)
        dl_da = gin[:, c.obs_dim:]
        dl_du = dl_da * (1.0 - a * a) + (2.0 * alpha / n) * np.tanh(u)
        dl_dlogstd = -alpha / n + dl_du * std * eps
        dl_dlogstd = np.where((raw < LOG_STD_MIN) | (raw > LOG_STD_MAX), 0.0, dl_dlogstd)
        grads = nx.backward(self.actor, atape, np.concatenate([dl_du, dl_dlogstd], axis=-1),
                            counter=self.flops)
        nx.adam_step(self.actor, grads, self.actor_opt)

        gap = float((logp + c.target_entropy).mean())
        temperature_loss = -self.log_alpha * gap
        self.log_alpha = float(nx.scalar_adam(self.log_alpha, -gap, self.alpha_opt))
        return UpdateReport(actor_loss=actor_loss, temperature_loss=temperature_loss, actor_updates=1,
                            forward_flops=self.flops.forward - before[0],
                            backward_flops=self.flops.backward - before[1])

    def target_soft_update(self):
        tau = self.config.tau
        for t, p in zip(self.target.arrays(), self.critic.arrays()):
            t *= 1.0 - tau
            t += tau * p
        self.target.version += 1
        return self

    # -- persistence ------------------------------------------------------------

    def actor_checksum(self):
        return self.actor.checksum() + f":{self.log_alpha!r}"

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self):
        header = {
            "config": asdict(self.config),
            "log_alpha": self.log_alpha,
            "alpha_opt": self.alpha_opt,
            "actor_opt": _opt_meta(self.actor_opt),
            "critic_opt": _opt_meta(self.critic_opt),
        }
        raw = json.dumps(header).encode()
        buf = io.BytesIO()
        buf.write(AGENT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for net in self._networks():
            nx.dump_params(net, buf)
        return buf.getvalue()

    def _networks(self):
        return [self.actor, self.critic, self.target,
                self.actor.with_arrays(self.actor_opt.m), self.actor.with_arrays(self.actor_opt.v),
                self.critic.with_arrays(self.critic_opt.m), self.critic.with_arrays(self.critic_opt.v)]

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, data):
        fh = io.BytesIO(data)
        if fh.read(len(AGENT_MAGIC)) != AGENT_MAGIC:
            raise FormatError("bad magic, not an agent checkpoint", 0)
        head = fh.read(4)
        if len(head) != 4:
            raise FormatError("truncated agent header", len(AGENT_MAGIC))
        (size,) = struct.unpack("<I", head)
        try:
            header = json.loads(fh.read(size))
        except ValueError:
            raise FormatError("corrupt agent header", len(AGENT_MAGIC) + 4) from None
        cfg = header["config"]
        cfg["hidden"] = tuple(cfg["hidden"])
        config = AgentConfig(**cfg)
        dtype = np.dtype(config.dtype)
        agent = cls.__new__(cls)
        agent.config = config
        nets = [nx.read_params(fh, dtype) for _ in range(7)]
        agent.actor, agent.critic, agent.target = nets[:3]
        agent.actor_opt = nx.AdamState(nets[3].arrays(), nets[4].arrays(), **header["actor_opt"])
        agent.critic_opt = nx.AdamState(nets[5].arrays(), nets[6].arrays(), **header["critic_opt"])
        agent.log_alpha = header["log_alpha"]
        agent.alpha_opt = header["alpha_opt"]
        agent.flops = nx.FlopCounter()
        return agent


AGENT_MAGIC = b"SOPEA1"


def _opt_meta(opt):
    return dict(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, step=opt.step)
