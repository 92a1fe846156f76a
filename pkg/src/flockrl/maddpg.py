"""Multi-agent DDPG with centralized critics and decentralized actors.

Action coordinates: the actor emits a raw 2-vector in [-1, 1]^2. The
environment receives ``a_max * g(raw)`` where ``g`` rescales vectors longer
than 1 onto the unit circle. Critics see actions as force / a_max, i.e.
``g(raw)`` for policy actions and the stored force divided by a_max for
buffer actions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import env as flockenv
from .errors import InvalidConfigurationError, NumericError
from .experience import ReplayBuffer, Transition, sample_minibatch
from .nn import AdamState, Gradient, adam_step, mlp_backward, mlp_forward, mlp_init, soft_update, _trace

ACT_DIM = 2


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.0004
    batch_size: int = 32
    episodes: int = 200_000
    sigma0: float = 0.3
    sigma_min: float = 0.02
    # sigma reaches sigma_min after this fraction of the episodes
    decay_fraction: float = 0.8
    buffer_capacity: int = 300_000
    lr: float = 1e-3
    hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidConfigurationError(f"gamma={self.gamma} outside [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise InvalidConfigurationError(f"tau={self.tau} outside (0, 1]")
        if self.batch_size < 1 or self.episodes < 0 or self.buffer_capacity < 1:
            raise InvalidConfigurationError("batch_size, buffer_capacity must be >= 1 and episodes >= 0")
        if self.sigma0 < 0 or self.sigma_min < 0 or not 0 < self.decay_fraction <= 1:
            raise InvalidConfigurationError("invalid exploration schedule")

    def sigma(self, episode):
        """Exploration std for a 0-based episode index (exponential decay)."""
        if self.sigma0 == 0 or self.episodes == 0:
            return self.sigma0
        horizon = self.decay_fraction * self.episodes
        frac = min(episode / horizon, 1.0)
        return self.sigma0 * (self.sigma_min / self.sigma0) ** frac


class AgentBundle:
    """Actor, critic, their target copies and optimizer states for one agent."""

    def __init__(self, actor, critic, lr=1e-3):
        self.actor = actor
        self.critic = critic
        self.actor_target = actor.copy()
        self.critic_target = critic.copy()
        self.actor_opt = AdamState(actor, lr=lr)
        self.critic_opt = AdamState(critic, lr=lr)

    def networks(self):
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def copy(self):
        out = AgentBundle.__new__(AgentBundle)
        out.actor = self.actor.copy()
        out.critic = self.critic.copy()
        out.actor_target = self.actor_target.copy()
        out.critic_target = self.critic_target.copy()
        out.actor_opt = self.actor_opt.copy()
        out.critic_opt = self.critic_opt.copy()
        return out


class Agents:
    """The n agent bundles plus the shapes needed to lay out critic inputs."""

    def __init__(self, bundles, n, obs_dim, a_max):
        self.bundles = list(bundles)
        self.n = n
        self.obs_dim = obs_dim
        self.a_max = a_max

    def __getitem__(self, i):
        return self.bundles[i]

    def __len__(self):
        return len(self.bundles)

    def __iter__(self):
        return iter(self.bundles)

    def copy(self):
        return Agents([b.copy() for b in self.bundles], self.n, self.obs_dim, self.a_max)

    def soft_update_targets(self, tau):
        for b in self.bundles:
            soft_update(b.actor_target, b.actor, tau)
            soft_update(b.critic_target, b.critic, tau)

    def flat_state(self):
        """Concatenation of every parameter; handy for equality checks."""
        return np.concatenate([net.flat for b in self.bundles for net in b.networks().values()])


def make_agents(world_cfg, seed, hidden=(64, 64, 64), lr=1e-3):
    n, d = world_cfg.n, world_cfg.obs_dim
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(2 * n)
    bundles = []
    for i in range(n):
        actor = mlp_init([d, *hidden, ACT_DIM], int(seeds[2 * i]), out_activation="tanh")
        critic = mlp_init([n * d + n * ACT_DIM, *hidden, 1], int(seeds[2 * i + 1]), out_activation="identity")
        bundles.append(AgentBundle(actor, critic, lr=lr))
    return Agents(bundles, n, d, world_cfg.a_max)


# -- action mapping ---------------------------------------------------------

def unit_disc(raw):
    """Rescale rows with norm > 1 onto the unit circle."""
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.sqrt((raw * raw).sum(axis=-1, keepdims=True))
    return np.where(norm > 1.0, raw / np.where(norm > 0, norm, 1.0), raw)


def unit_disc_vjp(raw, upstream):
    """Vector-Jacobian product of :func:`unit_disc` (row-wise)."""
    norm = np.sqrt((raw * raw).sum(axis=-1, keepdims=True))
    u = raw / np.where(norm > 0, norm, 1.0)
    proj = upstream - u * (u * upstream).sum(axis=-1, keepdims=True)
    return np.where(norm > 1.0, proj / np.where(norm > 0, norm, 1.0), upstream)


def squash_action(raw, a_max=0.5):
    """Raw actor output in [-1, 1]^2 to a Cartesian force with |f| <= a_max."""
    return a_max * unit_disc(raw)


def unsquash_action(force, a_max=0.5):
    """Inverse map used to encode demonstrated forces as raw actor targets."""
    return np.asarray(force, dtype=np.float64) / a_max


def select_action(actor, obs, sigma, rng=None, a_max=0.5):
    raw = mlp_forward(actor, obs)
    if sigma > 0:
        raw = np.clip(raw + rng.normal(0.0, sigma, size=raw.shape), -1.0, 1.0)
    return squash_action(raw, a_max)


def joint_actions(agents, obs, sigma=0.0, rng=None):
    """(n, 2) forces for a joint observation (n, obs_dim)."""
    return np.stack([select_action(b.actor, obs[i], sigma, rng, agents.a_max) for i, b in enumerate(agents)])


# -- losses -----------------------------------------------------------------

def critic_input(obs, act_norm):
    """[o_1 .. o_n, a_1 .. a_n] rows for a batch."""
    M = obs.shape[0]
    return np.concatenate([obs.reshape(M, -1), act_norm.reshape(M, -1)], axis=1)


def critic_target(agents, i, batch, gamma):
    """Bellman targets y_i = r_i + gamma * (1 - done) * Q'_i(o', pi'(o'))."""
    next_act = np.stack([unit_disc(mlp_forward(b.actor_target, batch.next_obs[:, j]))
                         for j, b in enumerate(agents)], axis=1)
    q_next = mlp_forward(agents[i].critic_target, critic_input(batch.next_obs, next_act))[:, 0]
    return batch.rew[:, i] + gamma * (1.0 - batch.done) * q_next


def critic_loss_grad(critic, x, y):
    """Mean squared error of critic(x) against y, with its gradient."""
    acts = _trace(critic, x)
    err = acts[-1][:, 0] - y
    loss = float(np.mean(err * err))
    grad, _ = mlp_backward(critic, x, (2.0 / len(y)) * err[:, None], trace=acts)
    return loss, grad


def _check_finite(loss, what):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite {what} loss; update skipped")


def update_critic(agents, i, batch, gamma, extra_grad=None):
    """One Adam step on Q_i; returns the pre-update loss."""
    b = agents[i]
    y = critic_target(agents, i, batch, gamma)
    x = critic_input(batch.obs, batch.act / agents.a_max)
    loss, grad = critic_loss_grad(b.critic, x, y)
    _check_finite(loss, "critic")
    if extra_grad is not None:
        grad = grad + extra_grad
    adam_step(b.critic_opt, b.critic, grad)
    return loss


@dataclass
class ActorTerms:
    rl: float = 0.0
    bc: float = 0.0
    grad: Gradient | None = field(default=None, repr=False)


def actor_loss_grad(agents, i, batch, *, rl_weight=1.0, bc_weight=0.0, bc_target=None, bc_mask=None):
    """Actor objective  rl_weight * mean(-Q_i) + bc_weight * L_bc  and its gradient.

    Q_i is evaluated with agent i's action replaced by its current policy and
    the other agents' actions taken from the batch. L_bc is the mean over the
    batch of the squared distance between the raw actor output and
    ``bc_target``; ``bc_mask`` zeroes individual samples but keeps the
    divisor at the batch size.
    """
    b = agents[i]
    obs_i = batch.obs[:, i]
    M = obs_i.shape[0]
    acts = _trace(b.actor, obs_i)
    raw = acts[-1]
    g_raw = np.zeros_like(raw)
    terms = ActorTerms()
    if rl_weight != 0.0:
        act_norm = batch.act / agents.a_max
        act_norm[:, i] = unit_disc(raw)
        x = critic_input(batch.obs, act_norm)
        q = mlp_forward(b.critic, x)[:, 0]
        terms.rl = float(-np.mean(q))
        _, gx = mlp_backward(b.critic, x, np.full((M, 1), -rl_weight / M))
        start = agents.n * agents.obs_dim + ACT_DIM * i
        g_raw += unit_disc_vjp(raw, gx[:, start:start + ACT_DIM])
    if bc_target is not None:
        diff = raw - bc_target
        sq = (diff * diff).sum(axis=1)
        if bc_mask is not None:
            sq = sq * bc_mask
            diff = diff * bc_mask[:, None]
        terms.bc = float(np.mean(sq))
        if bc_weight != 0.0:
            g_raw += (2.0 * bc_weight / M) * diff
    total = rl_weight * terms.rl + bc_weight * terms.bc
    _check_finite(total, "actor")
    terms.grad, _ = mlp_backward(b.actor, obs_i, g_raw, trace=acts)
    return terms


def update_actor(agents, i, batch):
    """One Adam step on pi_i against mean(-Q_i); returns the pre-update loss."""
    terms = actor_loss_grad(agents, i, batch)
    b = agents[i]
    adam_step(b.actor_opt, b.actor, terms.grad)
    return terms.rl


def maddpg_update(agents, i, replay, demo, cfg, rng):
    """Per-step update for agent i under plain MADDPG (demo unused)."""
    batch = sample_minibatch(replay, cfg.batch_size, rng)
    return {"critic_loss": update_critic(agents, i, batch, cfg.gamma),
            "actor_loss": update_actor(agents, i, batch)}


# -- episodes ---------------------------------------------------------------

@dataclass
class EpisodeMetrics:
    episode: int
    seed: int
    scene_seed: int
    success: bool
    ret: float
    flock_distance: float
    time_steps: int
    force_sum: float
    status: str = ""
    wall_ms: float = 0.0

    def row(self):
        return [self.episode, self.seed, int(self.success), repr(self.ret), repr(self.flock_distance),
                self.time_steps, repr(self.force_sum)]


METRIC_COLUMNS = ("episode", "seed", "success", "return", "flock_distance", "time_steps", "force_sum")


TRAIN_STREAM, EVAL_STREAM = 0, 2


def env_seed(seed, episode, stream=TRAIN_STREAM):
    """Scene seed for an episode index; shared by every algorithm."""
    return int(np.random.SeedSequence([seed, episode, stream]).generate_state(1)[0])


def run_episode(world_cfg, rc, scene_seed, policy, on_step=None):
    """Roll out one episode with ``policy(world, obs) -> (n, 2) forces``.

    ``on_step(world, obs, forces, outcome, next_world, next_obs)`` is called
    after every transition. Returns (metrics fields dict, final world).
    """
    world, used_seed, _ = flockenv.reset_with_retry(world_cfg, scene_seed)
    obs = flockenv.observe_all(world)
    ret = 0.0
    flock = 0.0
    force_sum = 0.0
    while world.status == flockenv.Status.RUNNING:
        forces = flockenv.clamp_force(policy(world, obs), world_cfg.a_max)
        nxt, outcome = flockenv.step(world, forces, rc)
        next_obs = flockenv.observe_all(nxt)
        ret += float(outcome.rewards.mean())
        flock += float(np.hypot(*(nxt.pos - nxt.centroid()).T).mean())
        force_sum += float(np.hypot(forces[:, 0], forces[:, 1]).sum())
        if on_step is not None:
            on_step(world, obs, forces, outcome, nxt, next_obs)
        world, obs = nxt, next_obs
    return dict(scene_seed=used_seed, success=world.status == flockenv.Status.SUCCESS, ret=ret,
                flock_distance=flock / world.t, time_steps=world.t, force_sum=force_sum,
                status=world.status.value), world


def is_terminal(status):
    """Bootstrap mask: success and collision end the task; a timeout does not."""
    return status in (flockenv.Status.SUCCESS, flockenv.Status.COLLISION)


def online_train(agents, world_cfg, rc, cfg, replay, seed, *, updater=maddpg_update, demo=None,
                 start_episode=0):
    """Online phase: generator of :class:`EpisodeMetrics`, one per episode.

    Each environment step pushes the joint transition into ``replay``; once
    the buffer holds a minibatch, every agent (ascending index) draws its own
    minibatch and runs ``updater``; all target networks are then soft-updated.
    """
    rng = np.random.default_rng([seed, 1])
    for ep in range(start_episode, cfg.episodes):
        sigma = cfg.sigma(ep)
        t0 = time.perf_counter()

        def policy(world, obs):
            return joint_actions(agents, obs, sigma, rng)

        def on_step(world, obs, forces, outcome, nxt, next_obs):
            replay.push(Transition(obs, forces, outcome.rewards, next_obs, is_terminal(outcome.status)))
            if len(replay) < cfg.batch_size:
                return
            for i in range(agents.n):
                try:
                    updater(agents, i, replay, demo, cfg, rng)
                except NumericError as exc:
                    raise NumericError(f"episode {ep} step {nxt.t} agent {i}: {exc}") from exc
            agents.soft_update_targets(cfg.tau)

        fields, _ = run_episode(world_cfg, rc, env_seed(seed, ep), policy, on_step)
        yield EpisodeMetrics(ep, seed, **fields, wall_ms=1e3 * (time.perf_counter() - t0))
