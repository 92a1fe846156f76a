import numpy as np
import pytest

from flockrl import env as flockenv
from flockrl.env import WorldConfig
from flockrl.errors import ContractViolationError, InvalidConfigurationError
from flockrl.experience import ReplayBuffer
from flockrl.maddpg import make_agents, update_critic
from flockrl.pretrain import (REPORT_COLUMNS, PretrainConfig, compute_beta, pretrain, pretrain_actor_update,
                              pretrain_critic_update)

from conftest import filled_buffer, random_batch

WORLD = WorldConfig(L=18.0, n=2, m=2, T_episode=15)


def linear_agents():
    """Agents with single-layer actors and critics (no hidden layers)."""
    return make_agents(WORLD, 0, hidden=())


def test_config_validation():
    with pytest.raises(InvalidConfigurationError):
        PretrainConfig(disable_bc=True, disable_rl=True)
    with pytest.raises(InvalidConfigurationError):
        PretrainConfig(alpha_critic=-1)
    cfg = PretrainConfig()
    assert (cfg.steps, cfg.alpha_critic, cfg.alpha_actor, cfg.batch_size, cfg.tau) == (300_000, 2e-5, 2.5, 32, 4e-4)
    assert PretrainConfig(disable_overfit=True).effective_alpha_critic == 0.0


def test_zero_critic_has_zero_l2_term():
    agents = linear_agents()
    agents[0].critic.flat[:] = 0.0
    batch = random_batch(2, WORLD.obs_dim, 4, np.random.default_rng(0))
    _, l2 = pretrain_critic_update(agents, 0, batch, 0.95, 2e-5)
    assert l2 == 0.0


def test_zero_alpha_equals_online_critic_step(small_agents):
    batch = random_batch(2, small_agents.obs_dim, 8, np.random.default_rng(0))
    twin = small_agents.copy()
    loss_a, l2 = pretrain_critic_update(small_agents, 1, batch, 0.95, 0.0)
    loss_b = update_critic(twin, 1, batch, 0.95)
    assert loss_a == loss_b and l2 == 0.0
    assert small_agents.flat_state().tobytes() == twin.flat_state().tobytes()


def test_regularized_loss_example():
    """Critic parameters {3, 4} (all others zero) with zero Bellman error."""
    agents = linear_agents()
    d = WORLD.obs_dim
    b = agents[0]
    for net in (b.critic, b.critic_target):
        net.flat[:] = 0.0
        net.biases[0][0] = 4.0
    b.critic.weights[0][0, 0] = 3.0        # reads obs[agent 0][0], zero in the batch
    batch = random_batch(2, d, 4, np.random.default_rng(0))
    batch.obs[:, 0, 0] = 0.0
    batch.done[:] = 0.0
    batch.rew[:, 0] = 2.0                  # y = 2 + 0.5 * 4 = 4 = Q
    rl, l2 = pretrain_critic_update(agents, 0, batch, 0.5, 2e-5)
    assert rl == 0.0
    assert rl + l2 == pytest.approx(1e-4, rel=1e-15)


def _beta_agents():
    agents = linear_agents()
    critic = agents[0].critic
    critic.flat[:] = 0.0
    critic.biases[0][0] = 1.0
    critic.weights[0][0, 0] = 1.0          # Q = 1 + obs[agent 0][0]
    return agents


def test_beta_hand_example():
    agents = _beta_agents()
    batch = random_batch(2, WORLD.obs_dim, 2, np.random.default_rng(0))
    batch.obs[:, 0, 0] = [-2.0, 2.0]       # |Q| = {1, 3}
    assert compute_beta(agents, 0, batch, 2.5) == 5.0


def test_beta_zero_critic_and_homogeneity(small_agents):
    batch = random_batch(2, small_agents.obs_dim, 32, np.random.default_rng(1))
    beta = compute_beta(small_agents, 0, batch, 2.5)
    assert beta > 0
    critic = small_agents[0].critic
    critic.weights[-1][...] *= 4.0
    critic.biases[-1][...] *= 4.0
    assert compute_beta(small_agents, 0, batch, 2.5) == pytest.approx(4 * beta, rel=1e-14)
    critic.flat[:] = 0.0
    assert compute_beta(small_agents, 0, batch, 2.5) == 0.0


def test_beta_empty_batch():
    agents = linear_agents()
    batch = random_batch(2, WORLD.obs_dim, 0, np.random.default_rng(0))
    with pytest.raises(ContractViolationError):
        compute_beta(agents, 0, batch, 2.5)


def test_bc_term_examples():
    agents = linear_agents()
    actor = agents[0].actor
    actor.flat[:] = 0.0
    batch = random_batch(2, WORLD.obs_dim, 1, np.random.default_rng(0))
    batch.act[0, 0] = [0.5, 0.0]           # raw (1, 0)
    _, bc = pretrain_actor_update(agents, 0, batch, 1.0)
    assert bc == 1.0
    # actor reproduces every demo action
    actor.flat[:] = 0.0
    actor.biases[0][:] = [0.3, -0.2]
    batch = random_batch(2, WORLD.obs_dim, 5, np.random.default_rng(1))
    batch.act[:, 0] = 0.5 * np.tanh([0.3, -0.2])
    _, bc = pretrain_actor_update(agents, 0, batch, 1.0)
    assert bc == 0.0


def test_disable_bc_reports_zero(small_agents):
    batch = random_batch(2, small_agents.obs_dim, 8, np.random.default_rng(0))
    rl, bc = pretrain_actor_update(small_agents, 0, batch, 3.0, disable_bc=True)
    assert bc == 0.0 and rl != 0.0


def test_pretrain_zero_steps(small_agents):
    demo = filled_buffer(2, small_agents.obs_dim, 20, np.random.default_rng(0))
    before = small_agents.flat_state().copy()
    pretrain(small_agents, demo, PretrainConfig(steps=0), 0.95, 0)
    np.testing.assert_array_equal(small_agents.flat_state(), before)


def test_pretrain_deterministic_and_reports(small_agents):
    demo = filled_buffer(2, small_agents.obs_dim, 50, np.random.default_rng(0))
    cfg = PretrainConfig(steps=30, batch_size=8, report_every=10)
    a, b = small_agents.copy(), small_agents.copy()
    rows_a, rows_b = [], []
    pretrain(a, demo, cfg, 0.95, 3, on_report=rows_a.append)
    pretrain(b, demo, cfg, 0.95, 3, on_report=rows_b.append)
    assert a.flat_state().tobytes() == b.flat_state().tobytes()
    assert rows_a == rows_b and len(rows_a) == 3 * 2
    assert all(len(r) == len(REPORT_COLUMNS) and np.all(np.isfinite(r)) and r[-1] >= 0 for r in rows_a)
    assert demo.sample_count == 2 * 30 * 2
    assert not np.array_equal(a.flat_state(), small_agents.flat_state())


def test_pretrain_soft_updates_targets(small_agents):
    demo = filled_buffer(2, small_agents.obs_dim, 10, np.random.default_rng(0))
    pretrain(small_agents, demo, PretrainConfig(steps=3, batch_size=4, tau=1.0), 0.95, 0)
    for b in small_agents:
        np.testing.assert_array_equal(b.actor_target.flat, b.actor.flat)
        np.testing.assert_array_equal(b.critic_target.flat, b.critic.flat)


def test_pretrain_never_touches_environment_or_replay(small_agents, monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("pretraining touched the environment")

    for name in ("reset", "step", "reset_with_retry", "observe"):
        monkeypatch.setattr(flockenv, name, forbidden)
    replay = ReplayBuffer(10, 2, small_agents.obs_dim)
    demo = filled_buffer(2, small_agents.obs_dim, 10, np.random.default_rng(0))
    pretrain(small_agents, demo, PretrainConfig(steps=5, batch_size=4), 0.95, 0)
    assert replay.sample_count == 0


def test_pretrain_empty_demo(small_agents):
    with pytest.raises(ContractViolationError):
        pretrain(small_agents, ReplayBuffer(4, 2, small_agents.obs_dim), PretrainConfig(steps=1), 0.95, 0)
