"""Offline pretraining of actors and critics on a demonstration buffer.

Critic: Bellman error on demonstration tuples plus ``alpha_critic`` times
the (unsquared) Euclidean norm of the critic's parameters. Actor: the
demonstration-batch policy loss -Q plus a behavior-cloning term whose weight
beta is re-derived every step from the mean |Q| of the current policy's
actions, so the two terms stay on the same scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidConfigurationError, NumericError
from .experience import sample_minibatch
from .maddpg import actor_loss_grad, critic_input, unit_disc, unsquash_action, update_critic
from .nn import adam_step, l2_norm_grad, l2_param_norm, mlp_forward

REPORT_COLUMNS = ("step", "agent", "critic_rl_loss", "critic_l2", "actor_rl", "actor_bc", "beta")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300_000
    alpha_critic: float = 0.00002
    alpha_actor: float = 2.5
    batch_size: int = 32
    tau: float = 0.0004
    disable_bc: bool = False
    disable_rl: bool = False
    disable_overfit: bool = False
    report_every: int = 100

    def __post_init__(self):
        if sum([self.disable_bc, self.disable_rl, self.disable_overfit]) > 1:
            raise InvalidConfigurationError("at most one ablation flag may be set")
        if self.alpha_critic < 0 or self.alpha_actor < 0:
            raise InvalidConfigurationError("alpha coefficients must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or not 0 < self.tau <= 1:
            raise InvalidConfigurationError("invalid steps, batch_size or tau")

    @property
    def effective_alpha_critic(self):
        return 0.0 if self.disable_overfit else self.alpha_critic


def pretrain_critic_update(agents, i, batch, gamma, alpha_critic):
    """One Adam step on the regularized critic loss; returns (rl_loss, l2_term)."""
    critic = agents[i].critic
    l2_term = alpha_critic * l2_param_norm(critic)
    extra = l2_norm_grad(critic) * alpha_critic if alpha_critic != 0.0 else None
    rl_loss = update_critic(agents, i, batch, gamma, extra_grad=extra)
    return rl_loss, l2_term


def policy_q_values(agents, i, batch):
    """Q_i(o, a) with a_i from the current policy and a_j (j != i) from the batch."""
    act_norm = batch.act / agents.a_max
    act_norm[:, i] = unit_disc(mlp_forward(agents[i].actor, batch.obs[:, i]))
    return mlp_forward(agents[i].critic, critic_input(batch.obs, act_norm))[:, 0]


def compute_beta(agents, i, batch, alpha_actor):
    """alpha_actor / M * sum |Q_i(o, pi_i(o_i), a_-i)| over the batch."""
    M = len(batch)
    if M == 0:
        raise ContractViolationError("empty minibatch")
    q = policy_q_values(agents, i, batch)
    return alpha_actor / M * float(np.sum(np.abs(q)))


def pretrain_actor_update(agents, i, batch, beta, disable_bc=False, disable_rl=False):
    """One Adam step on  L_rl + beta * L_bc ; returns (rl_term, bc_term).

    With ``disable_rl`` the actor is fit by behavior cloning alone at unit
    weight, so the update does not depend on the critic at all.
    """
    if disable_rl:
        rl_weight, bc_weight = 0.0, 1.0
    else:
        rl_weight, bc_weight = 1.0, (0.0 if disable_bc else beta)
    target = None if disable_bc else unsquash_action(batch.act[:, i], agents.a_max)
    terms = actor_loss_grad(agents, i, batch, rl_weight=rl_weight, bc_weight=bc_weight, bc_target=target)
    b = agents[i]
    adam_step(b.actor_opt, b.actor, terms.grad)
    return terms.rl, terms.bc


def pretrain(agents, demo, cfg, gamma, seed, on_report=None):
    """Run ``cfg.steps`` pretraining steps in place on ``agents``.

    ``on_report(row)`` receives a REPORT_COLUMNS row for every agent on every
    ``cfg.report_every``-th step. Returns ``agents``.
    """
    if cfg.steps > 0 and len(demo) == 0:
        raise ContractViolationError("demonstration buffer is empty")
    rng = np.random.default_rng([seed, 2])
    alpha_c = cfg.effective_alpha_critic
    for step in range(1, cfg.steps + 1):
        for i in range(agents.n):
            batch = sample_minibatch(demo, cfg.batch_size, rng)
            try:
                rl_loss, l2_term = pretrain_critic_update(agents, i, batch, gamma, alpha_c)
                beta = compute_beta(agents, i, batch, cfg.alpha_actor)
                actor_rl, actor_bc = pretrain_actor_update(agents, i, batch, beta,
                                                           cfg.disable_bc, cfg.disable_rl)
            except NumericError as exc:
                raise NumericError(f"pretraining step {step} agent {i}: {exc}") from exc
            if on_report is not None and step % cfg.report_every == 0:
                on_report([step, i, rl_loss, l2_term, actor_rl, actor_bc, beta])
        agents.soft_update_targets(cfg.tau)
    return agents
