"""Comparison algorithms: supervised-only pretraining (SVL-MARL) and
simultaneous demonstration + online learning with a Q-filter (MARLwD)."""

from __future__ import annotations

from functools import partial

import numpy as np

from .errors import ContractViolationError, InvalidConfigurationError
from .experience import Batch, sample_minibatch
from .maddpg import (actor_loss_grad, critic_input, make_agents, maddpg_update, online_train,
                     unsquash_action, update_critic)
from .nn import adam_step, mlp_forward
from .pretrain import policy_q_values

BASELINES = ("maddpg", "svl", "marlwd")


def svl_pretrain(agents, demo, steps, seed, batch_size=32):
    """Behavior cloning on the actors only; critics and targets untouched."""
    if steps > 0 and len(demo) == 0:
        raise ContractViolationError("demonstration buffer is empty")
    rng = np.random.default_rng([seed, 3])
    for _ in range(steps):
        for i in range(agents.n):
            batch = sample_minibatch(demo, batch_size, rng)
            target = unsquash_action(batch.act[:, i], agents.a_max)
            terms = actor_loss_grad(agents, i, batch, rl_weight=0.0, bc_weight=1.0, bc_target=target)
            adam_step(agents[i].actor_opt, agents[i].actor, terms.grad)
    return agents


def q_filter_mask(agents, i, demo_batch):
    """1 where the critic prefers the demonstrated action over the policy's."""
    x = demo_batch.act / agents.a_max
    q_demo = mlp_forward(agents[i].critic, critic_input(demo_batch.obs, x))[:, 0]
    q_pi = policy_q_values(agents, i, demo_batch)
    return (q_demo > q_pi).astype(np.float64)


def marlwd_update(agents, i, replay_batch, demo_batch, gamma, lambda_bc=1.0):
    """Critic on replay + demo samples; actor on -Q (replay) + Q-filtered BC (demo)."""
    critic_loss = update_critic(agents, i, Batch.concat(replay_batch, demo_batch), gamma)
    mask = q_filter_mask(agents, i, demo_batch)
    rl = actor_loss_grad(agents, i, replay_batch)
    target = unsquash_action(demo_batch.act[:, i], agents.a_max)
    bc = actor_loss_grad(agents, i, demo_batch, rl_weight=0.0, bc_weight=lambda_bc,
                         bc_target=target, bc_mask=mask)
    adam_step(agents[i].actor_opt, agents[i].actor, rl.grad + bc.grad)
    return {"critic_loss": critic_loss, "actor_rl": rl.rl, "actor_bc": bc.bc,
            "filter_rate": float(mask.mean())}


def marlwd_updater(agents, i, replay, demo, cfg, rng, lambda_bc=1.0):
    replay_batch = sample_minibatch(replay, cfg.batch_size, rng)
    demo_batch = sample_minibatch(demo, cfg.batch_size, rng)
    return marlwd_update(agents, i, replay_batch, demo_batch, cfg.gamma, lambda_bc)


def run_baseline(name, world_cfg, rc, train_cfg, replay, seed, *, demo=None, pretrain_steps=0,
                 pretrain_batch=32, lambda_bc=1.0, agents=None):
    """Metrics generator for one baseline; fresh agents unless given."""
    if name not in BASELINES:
        raise InvalidConfigurationError(f"unknown baseline {name!r}")
    if agents is None:
        agents = make_agents(world_cfg, seed, train_cfg.hidden, train_cfg.lr)
    updater = maddpg_update
    if name == "svl":
        svl_pretrain(agents, demo, pretrain_steps, seed, pretrain_batch)
    elif name == "marlwd":
        if demo is None or len(demo) == 0:
            raise ContractViolationError("MARLwD needs a non-empty demonstration buffer")
        updater = partial(marlwd_updater, lambda_bc=lambda_bc)
    return online_train(agents, world_cfg, rc, train_cfg, replay, seed, updater=updater, demo=demo)
