import copy
import math

import numpy as np
import pytest

from sopelab import envlab
from sopelab import numerics as nx
from sopelab.accounting import flops_per_update
from sopelab.agent import LOG_STD_MIN, AgentConfig, SacAgent, squash_log_prob
from sopelab.errors import ConfigError, FormatError
from sopelab.replay import Batch, DualReplayBuffer


def make_batch(obs, action, reward, next_obs, terminal=None, truncated=None):
    n = len(reward)
    return Batch(np.asarray(obs, float), np.asarray(action, float), np.asarray(reward, float),
                 np.asarray(next_obs, float),
                 np.zeros(n, bool) if terminal is None else np.asarray(terminal),
                 np.zeros(n, bool) if truncated is None else np.asarray(truncated),
                 np.zeros(n, int), np.arange(n))


def constant_critic(agent, values):
    """Make each target member output a constant."""
    t = agent.target
    for k in range(t.n_layers):
        t.weights[k][...] = 0.0
        t.biases[k][...] = 0.0
    for m, v in enumerate(values):
        t.biases[-1][m, 0, 0] = v


def test_config_validation():
    with pytest.raises(ConfigError):
        AgentConfig(3, 1, ensemble=1)
    with pytest.raises(ConfigError):
        AgentConfig(3, 1, ensemble=2, target_subset=3)
    with pytest.raises(ConfigError):
        AgentConfig.profile("nope", 3, 1)
    c = AgentConfig.profile("rlpd_lite", 3, 1)
    assert (c.ensemble, c.target_subset, c.dropout, c.target_entropy) == (10, 2, 0.0, -1.0)


def test_td_target_with_constant_critics():
    agent = SacAgent(AgentConfig(2, 1, hidden=(4,), gamma=0.9, entropy_in_target=False), np.random.default_rng(0))
    constant_critic(agent, [3.0, 5.0])
    b = make_batch([[0, 0]] * 3, [[0]] * 3, [1.0, 1.0, 1.0], [[1, 1]] * 3,
                   terminal=[False, True, False], truncated=[False, False, True])
    y = agent.td_target(b, np.random.default_rng(0))
    np.testing.assert_allclose(y, [3.7, 1.0, 3.7])


def test_td_target_entropy_term():
    agent = SacAgent(AgentConfig(2, 1, hidden=(4,), gamma=0.9, init_alpha=0.5), np.random.default_rng(0))
    constant_critic(agent, [3.0, 5.0])
    b = make_batch([[0, 0]] * 4, [[0]] * 4, [1.0] * 4, np.random.default_rng(1).normal(size=(4, 2)))
    rng = np.random.default_rng(7)
    logp = agent.sample_action(b.next_obs, rng=copy.deepcopy(rng)).log_prob
    y = agent.td_target(b, rng)
    np.testing.assert_allclose(y, 1.0 + 0.9 * (3.0 - 0.5 * logp))


def test_target_subset_uses_min_of_drawn_members():
    cfg = AgentConfig(2, 1, hidden=(4,), ensemble=5, target_subset=2, gamma=0.5, entropy_in_target=False)
    agent = SacAgent(cfg, np.random.default_rng(0))
    values = [1.0, 2.0, 3.0, 4.0, 5.0]
    constant_critic(agent, values)
    b = make_batch([[0, 0]], [[0]], [0.0], [[0, 0]])
    seen = set()
    for s in range(200):
        rng = np.random.default_rng(s)
        probe = copy.deepcopy(rng)
        agent.sample_action(b.next_obs, rng=probe)
        subset = probe.choice(5, size=2, replace=False)
        y = agent.td_target(b, rng)[0]
        assert y == pytest.approx(0.5 * min(values[i] for i in subset))
        seen.add(y)
    assert len(seen) == 4


def test_squash_log_prob_matches_naive_formula():
    rng = np.random.default_rng(0)
    eps, log_std = rng.normal(size=(50, 2)), rng.uniform(-2, 1, (50, 2))
    u = rng.normal(size=(50, 2))
    naive = (-0.5 * eps**2 - log_std - 0.5 * math.log(2 * math.pi) - np.log(1 - np.tanh(u) ** 2)).sum(-1)
    np.testing.assert_allclose(squash_log_prob(eps, log_std, u), naive, rtol=1e-10)
    assert np.isfinite(squash_log_prob(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[40.0]]))).all()


def test_squashed_sample_log_prob_is_a_density():
    agent = SacAgent(AgentConfig(1, 1, hidden=(8,)), np.random.default_rng(3))
    obs = np.full((200_000, 1), 0.3)
    s = agent.sample_action(obs, rng=np.random.default_rng(0))
    # E_p[1/p] over (-1, 1) equals the interval length
    assert np.mean(np.exp(-s.log_prob)) == pytest.approx(2.0, rel=0.05)


def _capture_grads(monkeypatch):
    captured = []
    real = nx.adam_step

    def spy(params, grads, state):
        captured.append(grads.copy())
        return real(params, grads, state)

    monkeypatch.setattr(nx, "adam_step", spy)
    return captured


def test_actor_gradient_matches_finite_differences(monkeypatch):
    cfg = AgentConfig(3, 2, hidden=(16, 16), dropout=0.0, init_alpha=0.3)
    agent = SacAgent(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    b = make_batch(rng.normal(size=(9, 3)), np.zeros((9, 2)), np.zeros(9), np.zeros((9, 3)))
    eps = copy.deepcopy(rng).standard_normal((9, 2))
    actor0 = agent.actor.copy()
    alpha = agent.alpha

    def loss(actor):
        out, _ = nx.forward(actor, b.obs)
        mean, log_std = out[:, :2], np.clip(out[:, 2:], LOG_STD_MIN, 2.0)
        u = mean + np.exp(log_std) * eps
        q, _ = agent.q_values(b.obs, np.tanh(u))
        return float((alpha * squash_log_prob(eps, log_std, u) - q.min(axis=0)).mean())

    captured = _capture_grads(monkeypatch)
    agent.actor_and_temperature_update(b, rng)
    grads = captured[0]
    probe = np.random.default_rng(5)
    for _ in range(5):
        d = [probe.normal(size=a.shape) for a in actor0.arrays()]
        h = 1e-6
        fd = (loss(actor0.with_arrays([a + h * x for a, x in zip(actor0.arrays(), d)]))
              - loss(actor0.with_arrays([a - h * x for a, x in zip(actor0.arrays(), d)]))) / (2 * h)
        an = sum(float((g * x).sum()) for g, x in zip(grads.arrays(), d))
        assert an == pytest.approx(fd, rel=1e-5)


def test_critic_gradient_matches_finite_differences(monkeypatch):
    cfg = AgentConfig(3, 1, hidden=(8, 8), dropout=0.0)
    agent = SacAgent(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    b = make_batch(rng.normal(size=(6, 3)), rng.uniform(-1, 1, (6, 1)), rng.normal(size=6), rng.normal(size=(6, 3)))
    y = agent.td_target(b, copy.deepcopy(rng))
    critic0 = agent.critic.copy()

    def loss(critic):
        q, _ = agent.q_values(b.obs, b.action, params=critic)
        return float(((q - y) ** 2).mean(axis=1).sum())

    captured = _capture_grads(monkeypatch)
    agent.critic_update(b, rng)
    d = [np.random.default_rng(9).normal(size=a.shape) for a in critic0.arrays()]
    h = 1e-6
    fd = (loss(critic0.with_arrays([a + h * x for a, x in zip(critic0.arrays(), d)]))
          - loss(critic0.with_arrays([a - h * x for a, x in zip(critic0.arrays(), d)]))) / (2 * h)
    an = sum(float((g * x).sum()) for g, x in zip(captured[0].arrays(), d))
    assert an == pytest.approx(fd, rel=1e-5)


def test_temperature_moves_toward_target_entropy():
    agent = SacAgent(AgentConfig(2, 1, hidden=(8,)), np.random.default_rng(0))
    b = make_batch(np.zeros((32, 2)), np.zeros((32, 1)), np.zeros(32), np.zeros((32, 2)))
    # very narrow policy: entropy far below target, so alpha must grow
    agent.actor.biases[-1][1] = -5.0
    before = agent.log_alpha
    agent.actor_and_temperature_update(b, np.random.default_rng(0))
    assert agent.log_alpha == pytest.approx(before + agent.config.alpha_lr, rel=1e-6)


def test_critic_update_leaves_actor_untouched():
    agent = SacAgent(AgentConfig(2, 1, hidden=(8,)), np.random.default_rng(0))
    b = make_batch(np.ones((4, 2)), np.zeros((4, 1)), np.ones(4), np.ones((4, 2)))
    before = agent.actor_checksum()
    agent.critic_update(b, np.random.default_rng(0))
    assert agent.actor_checksum() == before


def test_soft_update_interpolates():
    agent = SacAgent(AgentConfig(2, 1, hidden=(4,), tau=0.25), np.random.default_rng(0))
    agent.target = agent.target.zeros_like()
    agent.target_soft_update()
    for t, p in zip(agent.target.arrays(), agent.critic.arrays()):
        np.testing.assert_allclose(t, 0.25 * p)


def test_update_flops_match_cost_model():
    cfg = AgentConfig(3, 1, hidden=(16, 16), ensemble=4, target_subset=3)
    agent = SacAgent(cfg, np.random.default_rng(0))
    b = make_batch(np.zeros((10, 3)), np.zeros((10, 1)), np.zeros(10), np.zeros((10, 3)))
    r = agent.critic_update(b, np.random.default_rng(0))
    assert (r.forward_flops, r.backward_flops) == flops_per_update("critic", cfg, 10)
    r = agent.actor_and_temperature_update(b, np.random.default_rng(0))
    assert (r.forward_flops, r.backward_flops) == flops_per_update("actor", cfg, 10)


def test_checkpoint_round_trip_preserves_behaviour(tmp_path):
    cfg = AgentConfig(2, 1, hidden=(8,), dtype="float32")
    agent = SacAgent(cfg, np.random.default_rng(0))
    b = make_batch(np.ones((4, 2)), np.zeros((4, 1)), np.ones(4), np.ones((4, 2)))
    agent.critic_update(b, np.random.default_rng(0))
    agent.actor_and_temperature_update(b, np.random.default_rng(0))
    agent.save(tmp_path / "a.ckpt")
    clone = SacAgent.load(tmp_path / "a.ckpt")
    assert clone.actor_checksum() == agent.actor_checksum()
    for x in (agent, clone):
        x.critic_update(b, np.random.default_rng(4))
        x.actor_and_temperature_update(b, np.random.default_rng(4))
    assert clone.to_bytes() == agent.to_bytes()
    with pytest.raises(FormatError):
        SacAgent.from_bytes(b"garbage")


def coverage_dataset(n, rng):
    """Every (cell, direction) pair of the chain, uniformly, with continuous actions."""
    cells = rng.integers(0, 9, n)
    action = rng.uniform(-1, 1, (n, 1))
    right = action[:, 0] > 0
    nxt = np.array([envlab.chain_next(c, r) for c, r in zip(cells, right)])
    eye = np.eye(envlab.CHAIN_CELLS)
    return envlab.Dataset("tabular-chain", "coverage", eye[cells], action,
                          envlab.CHAIN_REWARDS[cells, right.astype(int)], eye[nxt],
                          nxt == envlab.CHAIN_CELLS - 1, np.zeros(n, bool))


def test_td_learning_recovers_exact_chain_values():
    gamma = 0.8
    cfg = AgentConfig(10, 1, hidden=(64, 64), dropout=0.0, gamma=gamma, tau=0.05, critic_lr=1e-3,
                      entropy_in_target=False)
    agent = SacAgent(cfg, np.random.default_rng(0))
    # zero policy head: mean 0, log-std 0, so each direction has probability 1/2
    agent.actor.weights[-1][...] = 0.0
    agent.actor.biases[-1][...] = 0.0
    rng = np.random.default_rng(1)
    buf = DualReplayBuffer(10, 1, 1).load_offline(coverage_dataset(5000, rng))
    for _ in range(4000):
        agent.critic_update(buf.symmetric_sample(128, rng), rng)
        agent.target_soft_update()
    exact = envlab.chain_q_values(0.5, gamma)
    eye = np.eye(10)[:9]
    for right, a in ((0, -0.5), (1, 0.5)):
        q, _ = agent.q_values(eye, np.full((9, 1), a))
        np.testing.assert_allclose(q.mean(axis=0), exact[:9, right], atol=0.05)
