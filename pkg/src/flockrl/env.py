"""2-D flocking world: scene generation, rangefinders, capped point-mass
dynamics, the six-term reward and episode termination."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ContractViolationError, EnvironmentGenerationError, InvalidConfigurationError

HEADING_EPS = 1e-9


class Status(str, enum.Enum):
    RUNNING = "Running"
    SUCCESS = "Success"
    COLLISION = "Collision"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class WorldConfig:
    L: float = 36.0
    n: int = 3
    m: int = 5
    d_arrive: float = 3.0
    T_episode: int = 100
    agent_diameter: float = 0.4
    target_diameter: float = 0.4
    obstacle_size_range: tuple = (3.0, 5.0)
    v_max: float = 0.5
    a_max: float = 0.5
    ray_count: int = 7
    ray_spacing_deg: float = 30.0
    ray_max_range: float = 6.0
    # agent-to-obstacle gap at spawn; half of the crossing threshold
    spawn_clearance: float = 0.75
    max_placement_attempts: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "obstacle_size_range", tuple(float(s) for s in self.obstacle_size_range))
        self.validate()

    def validate(self):
        lengths = [self.L, self.d_arrive, self.agent_diameter, self.target_diameter,
                   self.v_max, self.a_max, self.ray_max_range, self.ray_spacing_deg]
        if any(not (x > 0) for x in lengths):
            raise InvalidConfigurationError("all lengths must be positive")
        lo, hi = self.obstacle_size_range
        if not 0 < lo <= hi:
            raise InvalidConfigurationError(f"bad obstacle size range {self.obstacle_size_range}")
        if self.m > 0 and hi > 2 * self.L / 3:
            raise InvalidConfigurationError(f"obstacles up to {hi} do not fit the central {2 * self.L / 3:g} square")
        if self.n < 2:
            raise InvalidConfigurationError("need at least two agents")
        if self.m < 0:
            raise InvalidConfigurationError("obstacle count must be non-negative")
        if self.T_episode < 1:
            raise InvalidConfigurationError("T_episode must be >= 1")
        if self.ray_count < 1 or self.ray_count % 2 == 0:
            raise InvalidConfigurationError("ray_count must be odd")
        if self.spawn_clearance < 0:
            raise InvalidConfigurationError("spawn_clearance must be non-negative")

    @property
    def agent_radius(self):
        return 0.5 * self.agent_diameter

    @property
    def obs_dim(self):
        return 2 + 2 * (self.n - 1) + self.ray_count + 2

    def ray_offsets(self):
        half = (self.ray_count - 1) / 2
        return np.radians((np.arange(self.ray_count) - half) * self.ray_spacing_deg)


@dataclass(frozen=True)
class RewardConfig:
    rho_nav: float = 0.25 / 36
    rho_flock: float = 0.5 / 36
    rho_col: float = 80 / 36
    rho_cross: float = 40 / 36
    rho_time: float = 1 / 36
    rho_stab: float = 1 / 36
    th_f: float = 1.5
    th_col: float = 1.0
    th_cross: float = 1.5

    def __post_init__(self):
        coeffs = [self.rho_nav, self.rho_flock, self.rho_col, self.rho_cross, self.rho_time, self.rho_stab]
        if any(c < 0 for c in coeffs):
            raise InvalidConfigurationError("reward coefficients must be >= 0")
        if min(self.th_f, self.th_col, self.th_cross) <= 0:
            raise InvalidConfigurationError("reward thresholds must be > 0")

    @classmethod
    def for_side(cls, L, **overrides):
        """Coefficients scaled by the map side as in the reference table."""
        base = dict(rho_nav=0.25 / L, rho_flock=0.5 / L, rho_col=80 / L,
                    rho_cross=40 / L, rho_time=1 / L, rho_stab=1 / L)
        base.update(overrides)
        return cls(**base)

    @property
    def weights(self):
        return np.array([self.rho_nav, self.rho_flock, self.rho_col,
                         self.rho_cross, self.rho_time, self.rho_stab])


TERM_NAMES = ("r_nav", "r_flock", "r_col", "r_cross", "r_time", "r_stab")


@dataclass
class WorldState:
    cfg: WorldConfig
    pos: np.ndarray          # (n, 2)
    vel: np.ndarray          # (n, 2)
    heading: np.ndarray      # (n,) radians
    circles: np.ndarray      # (m, 3): cx, cy, radius
    squares: np.ndarray      # (m, 3): cx, cy, half side
    target: np.ndarray       # (2,)
    t: int = 0
    status: Status = Status.RUNNING
    _rays: np.ndarray | None = field(default=None, repr=False, compare=False)

    def copy(self):
        return replace(self, pos=self.pos.copy(), vel=self.vel.copy(), heading=self.heading.copy(),
                       _rays=None)

    def translated(self, shift):
        """Same scene shifted by ``shift`` (map bounds are not moved)."""
        shift = np.asarray(shift, dtype=float)
        circles = self.circles.copy()
        squares = self.squares.copy()
        circles[:, :2] += shift
        squares[:, :2] += shift
        return replace(self, pos=self.pos + shift, vel=self.vel.copy(), heading=self.heading.copy(),
                       circles=circles, squares=squares, target=self.target + shift, _rays=None)

    def rays(self):
        """Cached (n, ray_count) rangefinder distances for this state."""
        if self._rays is None:
            self._rays = np.stack([raycast(self, i) for i in range(self.cfg.n)])
        return self._rays

    def centroid(self):
        return self.pos.mean(axis=0)


@dataclass
class StepOutcome:
    rewards: np.ndarray      # (n,)
    terms: np.ndarray        # (n, 6) unweighted terms in TERM_NAMES order
    status: Status


# -- geometry ---------------------------------------------------------------

def point_rect_distance(p, center, half):
    """Distance from points ``p`` (..., 2) to an axis-aligned square (0 inside)."""
    d = np.maximum(np.abs(np.asarray(p) - center) - half, 0.0)
    return np.sqrt((d * d).sum(axis=-1))


def boundary_distance(world, p):
    """Distance from point ``p`` to the nearest obstacle boundary (inf if none)."""
    best = math.inf
    for cx, cy, r in world.circles:
        best = min(best, math.hypot(p[0] - cx, p[1] - cy) - r)
    for cx, cy, h in world.squares:
        best = min(best, float(point_rect_distance(p, (cx, cy), h)))
    return best


def _ray_circle(p, u, circles):
    # u: (k, 2) unit directions; returns (k,) hit distances
    out = np.full(len(u), np.inf)
    for cx, cy, r in circles:
        dx, dy = p[0] - cx, p[1] - cy
        c = dx * dx + dy * dy - r * r
        if c <= 0.0:
            return np.zeros(len(u))
        b = u[:, 0] * dx + u[:, 1] * dy
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            s = -b - np.sqrt(disc)
        hit = (disc >= 0) & (s >= 0)
        out = np.where(hit, np.minimum(out, s), out)
    return out


def _ray_box(p, u, lo, hi):
    """Slab test for rays starting at ``p``; distance to entry, inf on miss."""
    inside = np.all((p >= lo) & (p <= hi))
    if inside:
        return np.zeros(len(u))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / u
        t1 = (lo - p) * inv
        t2 = (hi - p) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # axis-parallel rays: slab either always or never contains the ray
    parallel = u == 0.0
    inslab = (p >= lo) & (p <= hi)
    tmin = np.where(parallel, np.where(inslab, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inslab, np.inf, -np.inf), tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    hit = (far >= near) & (far >= 0)
    return np.where(hit, np.maximum(near, 0.0), np.inf)


def _ray_walls(p, u, L):
    if np.any(p < 0) or np.any(p > L):
        return np.zeros(len(u))
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(u[:, 0] > 0, (L - p[0]) / u[:, 0], np.where(u[:, 0] < 0, -p[0] / u[:, 0], np.inf))
        ty = np.where(u[:, 1] > 0, (L - p[1]) / u[:, 1], np.where(u[:, 1] < 0, -p[1] / u[:, 1], np.inf))
    return np.minimum(tx, ty)


def ray_directions(world, agent):
    angles = world.heading[agent] + world.cfg.ray_offsets()
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def raycast(world, agent):
    """Distances along the rangefinder fan to obstacles and walls, clamped."""
    cfg = world.cfg
    p = world.pos[agent]
    u = ray_directions(world, agent)
    dist = np.minimum(_ray_circle(p, u, world.circles), _ray_walls(p, u, cfg.L))
    for cx, cy, h in world.squares:
        c = np.array([cx, cy])
        dist = np.minimum(dist, _ray_box(p, u, c - h, c + h))
    return np.minimum(dist, cfg.ray_max_range)


# -- scene generation -------------------------------------------------------

def reset(cfg, seed):
    """Random scene: agents in the central L/3 square, obstacles in the central
    2L/3 square, target in the border band within L/6 of an edge."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    L, ra = cfg.L, cfg.agent_radius
    attempts = 0

    def bump():
        nonlocal attempts
        attempts += 1
        if attempts > cfg.max_placement_attempts:
            raise EnvironmentGenerationError(f"scene placement failed for seed {seed}")

    pos = np.zeros((cfg.n, 2))
    i = 0
    while i < cfg.n:
        bump()
        p = rng.uniform(L / 3, 2 * L / 3, size=2)
        if i and np.min(np.hypot(*(pos[:i] - p).T)) < 3 * cfg.agent_diameter:
            continue
        pos[i] = p
        i += 1

    lo_size, hi_size = cfg.obstacle_size_range
    keep_out = ra + cfg.spawn_clearance
    circles = np.zeros((cfg.m, 3))
    squares = np.zeros((cfg.m, 3))
    for arr, is_square in ((circles, False), (squares, True)):
        k = 0
        while k < cfg.m:
            bump()
            half = 0.5 * rng.uniform(lo_size, hi_size)
            c = rng.uniform(L / 6 + half, 5 * L / 6 - half, size=2)
            if is_square:
                gap = point_rect_distance(pos, c, half)
            else:
                gap = np.hypot(*(pos - c).T) - half
            if np.min(gap) < keep_out:
                continue
            arr[k] = (c[0], c[1], half)
            k += 1

    world = WorldState(cfg, pos, np.zeros((cfg.n, 2)), np.zeros(cfg.n), circles, squares, np.zeros(2))
    rt = 0.5 * cfg.target_diameter
    while True:
        bump()
        tgt = rng.uniform(rt, L - rt, size=2)
        if min(tgt[0], tgt[1], L - tgt[0], L - tgt[1]) > L / 6:
            continue
        if boundary_distance(world, tgt) < cfg.d_arrive:
            continue
        break
    world.target = tgt
    delta = tgt - pos
    world.heading = np.arctan2(delta[:, 1], delta[:, 0])
    return world


def reset_with_retry(cfg, seed, max_retries=100):
    """``reset`` that walks forward through seeds on placement failure.

    Returns ``(world, seed_used, skipped)``."""
    for k in range(max_retries + 1):
        try:
            return reset(cfg, seed + k), seed + k, k
        except EnvironmentGenerationError:
            continue
    raise EnvironmentGenerationError(f"no valid scene within {max_retries} seeds of {seed}")


# -- sensing and reward -----------------------------------------------------

def observe(world, agent):
    """[target offset, other-agent offsets, normalized rays, own velocity]."""
    cfg = world.cfg
    p = world.pos[agent]
    others = np.delete(world.pos, agent, axis=0) - p
    return np.concatenate([
        world.target - p,
        others.ravel(),
        world.rays()[agent] / cfg.ray_max_range,
        world.vel[agent],
    ])


def observe_all(world):
    return np.stack([observe(world, i) for i in range(world.cfg.n)])


def clamp_force(force, a_max):
    f = np.asarray(force, dtype=np.float64)
    mag = np.hypot(f[..., 0], f[..., 1])
    scale = np.where(mag > a_max, a_max / np.where(mag > 0, mag, 1.0), 1.0)
    return f * scale[..., None]


def force_polar(force):
    """(magnitude, angle) view of a Cartesian force."""
    return float(np.hypot(force[0], force[1])), float(math.atan2(force[1], force[0]))


def force_from_polar(magnitude, angle):
    return np.array([magnitude * math.cos(angle), magnitude * math.sin(angle)])


def reward_terms(prev, nxt, agent, action, rc):
    """Unweighted (r_nav, r_flock, r_col, r_cross, r_time, r_stab)."""
    i = agent
    d_tar_prev = np.hypot(*(prev.target - prev.pos[i]))
    d_tar_next = np.hypot(*(nxt.target - nxt.pos[i]))
    d_f_prev = np.hypot(*(prev.pos[i] - prev.centroid()))
    d_f_next = np.hypot(*(nxt.pos[i] - nxt.centroid()))
    r_flock = max(d_f_prev - rc.th_f, 0.0) - max(d_f_next - rc.th_f, 0.0)
    d_obs = float(nxt.rays()[i].min())
    r_col = (d_obs - rc.th_col) ** 3 if d_obs < rc.th_col else 0.0
    d_ag = np.hypot(*(np.delete(nxt.pos, i, axis=0) - nxt.pos[i]).T)
    close = d_ag[d_ag < rc.th_cross]
    r_cross = float(np.sum((close - rc.th_cross) ** 3))
    F = float(np.hypot(action[0], action[1]))
    return np.array([d_tar_prev - d_tar_next, r_flock, r_col, r_cross, -1.0, -F])


def reward(prev, nxt, agent, action, rc):
    terms = reward_terms(prev, nxt, agent, action, rc)
    return float(rc.weights @ terms), terms


# -- dynamics ---------------------------------------------------------------

def _collided(world):
    cfg = world.cfg
    ra = cfg.agent_radius
    p = world.pos
    if np.any(p - ra < 0) or np.any(p + ra > cfg.L):
        return True
    for cx, cy, r in world.circles:
        if np.any(np.hypot(p[:, 0] - cx, p[:, 1] - cy) < r + ra):
            return True
    for cx, cy, h in world.squares:
        if np.any(point_rect_distance(p, (cx, cy), h) < ra):
            return True
    diff = p[:, None, :] - p[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(d, np.inf)
    return bool(np.any(d < cfg.agent_diameter))


def classify(world):
    """Status of a post-step state; collision takes precedence over success."""
    cfg = world.cfg
    if _collided(world):
        return Status.COLLISION
    d = np.hypot(*(world.pos - world.target).T)
    if np.all(d < cfg.d_arrive):
        return Status.SUCCESS
    if world.t >= cfg.T_episode:
        return Status.TIMEOUT
    return Status.RUNNING


def step(world, actions, rc):
    """Advance one joint step; returns the successor state and outcome.

    ``actions`` is an (n, 2) array of Cartesian forces; magnitudes above
    a_max are clamped before use. ``world`` itself is not modified.
    """
    cfg = world.cfg
    if world.status != Status.RUNNING:
        raise ContractViolationError(f"cannot step a terminal world (status {world.status.value})")
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (cfg.n, 2):
        raise ContractViolationError(f"expected ({cfg.n}, 2) actions, got {actions.shape}")
    forces = clamp_force(actions, cfg.a_max)
    vel = world.vel + forces
    speed = np.hypot(vel[:, 0], vel[:, 1])
    over = speed > cfg.v_max
    vel[over] *= (cfg.v_max / speed[over])[:, None]
    speed = np.minimum(speed, cfg.v_max)
    heading = np.where(speed > HEADING_EPS, np.arctan2(vel[:, 1], vel[:, 0]), world.heading)
    nxt = replace(world, pos=world.pos + vel, vel=vel, heading=heading, t=world.t + 1, _rays=None)
    nxt.status = classify(nxt)
    terms = np.stack([reward_terms(world, nxt, i, forces[i], rc) for i in range(cfg.n)])
    rewards = terms @ rc.weights
    return nxt, StepOutcome(rewards, terms, nxt.status)


def episode_status(world):
    return world.status


# -- export -----------------------------------------------------------------

TRAJECTORY_COLUMNS = ("episode", "t", "agent", "x", "y", "vx", "vy", "fx", "fy", "r_total",
                      *TERM_NAMES, "status")


def trajectory_rows(episode, world, forces, outcome):
    """CSV rows for one step: ``world`` is the post-step state."""
    forces = clamp_force(forces, world.cfg.a_max)
    for i in range(world.cfg.n):
        yield [episode, world.t, i, *world.pos[i], *world.vel[i], *forces[i],
               outcome.rewards[i], *outcome.terms[i], outcome.status.value]


def write_trajectory_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        w.writerows(rows)


def scene_dict(world):
    return {
        "L": world.cfg.L,
        "circles": [{"center": [cx, cy], "radius": r} for cx, cy, r in world.circles.tolist()],
        "squares": [{"center": [cx, cy], "side": 2 * h} for cx, cy, h in world.squares.tolist()],
        "target": {"center": world.target.tolist(), "diameter": world.cfg.target_diameter,
                   "d_arrive": world.cfg.d_arrive},
        "agents": [{"position": p, "diameter": world.cfg.agent_diameter} for p in world.pos.tolist()],
        "config": asdict(world.cfg),
    }


def write_scene_json(path, world):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_dict(world), fh, indent=2)
