"""Artificial-potential-field demonstrator and demonstration datasets."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import env as flockenv
from .errors import CalibrationError, InvalidConfigurationError
from .experience import ReplayBuffer, Transition, save_demos
from .maddpg import env_seed, is_terminal, run_episode

log = logging.getLogger(__name__)

DEMO_STREAM = 1


@dataclass(frozen=True)
class ApfParams:
    k_att: float = 0.5
    k_rep: float = 0.8
    d_rep: float = 2.5
    k_coh: float = 0.3
    k_sep: float = 0.6
    action_noise_sigma: float = 0.0
    th_f: float = 1.5
    th_cross: float = 1.5

    def __post_init__(self):
        gains = [self.k_att, self.k_rep, self.k_coh, self.k_sep]
        if any(g < 0 for g in gains) or self.d_rep <= 0 or self.action_noise_sigma < 0:
            raise InvalidConfigurationError(f"invalid APF parameters {self}")


def _unit(v):
    norm = math.hypot(v[0], v[1])
    if norm < 1e-9:
        return np.zeros(2)
    return np.asarray(v, dtype=float) / norm


def _nearest_boundary(p, world):
    """(distance, unit vector pointing away from the obstacle) per obstacle."""
    out = []
    for cx, cy, r in world.circles:
        away = p - (cx, cy)
        out.append((math.hypot(*away) - r, _unit(away)))
    for cx, cy, h in world.squares:
        c = np.array([cx, cy])
        nearest = np.clip(p, c - h, c + h)
        away = p - nearest
        d = math.hypot(*away)
        if d < 1e-9:
            away = p - c
        out.append((d, _unit(away)))
    return out


def apf_action(world, agent, params, rng=None, a_max=None):
    """Potential-field force for one agent, clamped to the acceleration cap."""
    cfg = world.cfg
    a_max = cfg.a_max if a_max is None else a_max
    p = world.pos[agent]
    force = params.k_att * _unit(world.target - p)
    for d, away in _nearest_boundary(p, world):
        if d < params.d_rep:
            d = max(d, 1e-6)
            force += params.k_rep * (1.0 / d - 1.0 / params.d_rep) / (d * d) * away
    to_center = world.centroid() - p
    d_f = math.hypot(*to_center)
    force += params.k_coh * max(d_f - params.th_f, 0.0) * _unit(to_center)
    for j in range(cfg.n):
        if j == agent:
            continue
        away = p - world.pos[j]
        d_ag = math.hypot(*away)
        if d_ag < params.th_cross:
            force += params.k_sep * (params.th_cross - d_ag) * _unit(away)
    if params.action_noise_sigma > 0:
        force += rng.normal(0.0, params.action_noise_sigma, size=2)
    return flockenv.clamp_force(force, a_max)


def apf_policy(params, rng=None):
    def policy(world, obs):
        return np.stack([apf_action(world, i, params, rng) for i in range(world.cfg.n)])
    return policy


@dataclass
class DemoStats:
    episodes: int
    successes: int
    transitions: int
    skipped_scenes: int

    @property
    def success_rate(self):
        return self.successes / self.episodes if self.episodes else 0.0


def generate_demos(world_cfg, rc, params, episodes, seed, path=None):
    """Play ``episodes`` APF episodes and record every transition.

    Failed episodes are kept. Returns ``(locked buffer, DemoStats)`` and writes
    the JSON-Lines file when ``path`` is given.
    """
    if episodes < 1:
        raise InvalidConfigurationError("episodes must be >= 1")
    rng = np.random.default_rng([seed, 4])
    policy = apf_policy(params, rng)
    records = []
    ep_info = []
    successes = skipped = 0
    for ep in range(episodes):
        requested = env_seed(seed, ep, DEMO_STREAM)
        start = len(records)

        def on_step(world, obs, forces, outcome, nxt, next_obs):
            records.append(Transition(obs, forces, outcome.rewards, next_obs, is_terminal(outcome.status)))

        fields, _ = run_episode(world_cfg, rc, requested, policy, on_step)
        skipped += fields["scene_seed"] - requested
        successes += fields["success"]
        ep_info.append({"seed": fields["scene_seed"], "length": len(records) - start, "status": fields["status"]})
    if skipped:
        log.info("resampled %d scene seeds after placement failures", skipped)
    stats = DemoStats(episodes, successes, len(records), skipped)
    buf = ReplayBuffer(len(records), world_cfg.n, world_cfg.obs_dim)
    for tr in records:
        buf.push(tr)
    buf.meta = {
        "generator": "apf",
        "apf": asdict(params),
        "seed": seed,
        "success_rate": stats.success_rate,
        "world": asdict(world_cfg),
        "reward": asdict(rc),
        "episodes": ep_info,
    }
    buf.lock()
    if path is not None:
        save_demos(buf, path)
    return buf, stats


def measure_success(world_cfg, rc, params, episodes, seed):
    return generate_demos(world_cfg, rc, params, episodes, seed)[1].success_rate


def _within(rate, target, tol):
    # a measurement exactly tol away counts as outside, robust to rounding
    return abs(rate - target) < tol - 1e-9


def calibrate_quality(world_cfg, rc, target_success, seed, base=None, episodes=300, tol=0.05,
                      max_iter=20, sigma_ceiling=8.0):
    """Bisect the action-noise level until the success rate is within ``tol``.

    Returns ``(params, measured_rate)``. Every measurement runs the same
    ``episodes`` scenes (common random numbers) so the curve is smooth.
    """
    base = base or ApfParams()
    curve = []

    def measure(sigma):
        rate = measure_success(world_cfg, rc, replace(base, action_noise_sigma=sigma), episodes, seed)
        curve.append((sigma, rate))
        log.debug("sigma=%.4f success=%.3f", sigma, rate)
        return rate

    lo = base.action_noise_sigma
    r_lo = measure(lo)
    if _within(r_lo, target_success, tol):
        return base, r_lo
    if target_success > r_lo:
        raise CalibrationError(f"target {target_success} above base success rate {r_lo:.3f}", curve)
    hi = max(2 * lo, 0.25)
    r_hi = measure(hi)
    while r_hi > target_success:
        if _within(r_hi, target_success, tol):
            return replace(base, action_noise_sigma=hi), r_hi
        if hi >= sigma_ceiling:
            raise CalibrationError(f"success stays above {target_success} up to sigma={hi}", curve)
        lo, r_lo = hi, r_hi
        hi = min(2 * hi, sigma_ceiling)
        r_hi = measure(hi)
    if _within(r_hi, target_success, tol):
        return replace(base, action_noise_sigma=hi), r_hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r_mid = measure(mid)
        if _within(r_mid, target_success, tol):
            return replace(base, action_noise_sigma=mid), r_mid
        if r_mid > target_success:
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
    raise CalibrationError(f"no sigma within {tol} of {target_success} after {max_iter} bisections", curve)


def split_episodes(buf):
    """Transitions of a generated buffer grouped per recorded episode."""
    transitions = buf.transitions()
    out = []
    pos = 0
    for info in buf.meta["episodes"]:
        out.append((info, transitions[pos:pos + info["length"]]))
        pos += info["length"]
    return out


def episode_prefix(buf, episodes):
    """First ``episodes`` recorded episodes as a new locked buffer."""
    infos = buf.meta["episodes"][:episodes]
    count = sum(e["length"] for e in infos)
    out = buf.prefix(count)
    out.meta = dict(buf.meta, episodes=infos)
    return out.lock()


def replay_error(buf, world_cfg, rc):
    """Largest |stored next_obs - re-simulated next_obs| over the whole file."""
    worst = 0.0
    for info, transitions in split_episodes(buf):
        world = flockenv.reset(world_cfg, info["seed"])
        for tr in transitions:
            obs = flockenv.observe_all(world)
            worst = max(worst, float(np.max(np.abs(obs - tr.obs))))
            world, _ = flockenv.step(world, tr.act, rc)
            worst = max(worst, float(np.max(np.abs(flockenv.observe_all(world) - tr.next_obs))))
    return worst
