"""Experiment configuration, presets and (de)serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .demos import ApfParams
from .env import RewardConfig, WorldConfig
from .errors import InvalidConfigurationError
from .maddpg import TrainConfig
from .pretrain import PretrainConfig

ALGORITHMS = ("pwd", "maddpg", "svl", "marlwd", "pwd-no-bc", "pwd-no-rl", "pwd-no-overfit")
DEMO_ALGORITHMS = ("pwd", "svl", "marlwd", "pwd-no-bc", "pwd-no-rl", "pwd-no-overfit")
ABLATIONS = {"pwd-no-bc": "disable_bc", "pwd-no-rl": "disable_rl", "pwd-no-overfit": "disable_overfit"}


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    apf: ApfParams = field(default_factory=ApfParams)
    algo: str = "pwd"
    scale: str = "paper"
    seeds: tuple = (0, 1, 2)
    demo_path: str | None = None
    demo_episodes: int = 3000
    demo_seed: int = 12345
    # "base" or a target demonstrator success rate in (0, 1)
    demo_quality: str = "base"
    eval_episodes: int = 2500
    eval_snapshots: int = 20
    snapshot_episodes: int = 100
    lambda_bc: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        if self.algo not in ALGORITHMS:
            raise InvalidConfigurationError(f"unknown algorithm {self.algo!r}; choose from {ALGORITHMS}")
        if self.scale not in ("paper", "desk"):
            raise InvalidConfigurationError(f"unknown scale {self.scale!r}")
        if not self.seeds:
            raise InvalidConfigurationError("seeds must be non-empty")
        if self.eval_episodes < 1 or self.demo_episodes < 1 or self.eval_snapshots < 0:
            raise InvalidConfigurationError("episode counts must be positive")
        if self.demo_quality != "base":
            rate = self.target_demo_success
            if not 0 < rate < 1:
                raise InvalidConfigurationError(f"demo success target {rate} outside (0, 1)")
        if self.uses_demos and self.demo_path is not None and not Path(self.demo_path).exists():
            raise InvalidConfigurationError(f"demo file {self.demo_path} does not exist")

    @property
    def uses_demos(self):
        return self.algo in DEMO_ALGORITHMS

    @property
    def target_demo_success(self):
        if self.demo_quality == "base":
            return None
        try:
            return float(self.demo_quality.removeprefix("success-rate="))
        except ValueError:
            raise InvalidConfigurationError(f"bad demo quality {self.demo_quality!r}") from None

    def pretrain_for_algo(self):
        flag = ABLATIONS.get(self.algo)
        base = replace(self.pretrain, disable_bc=False, disable_rl=False, disable_overfit=False)
        return replace(base, **{flag: True}) if flag else base

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def preset(scale="paper"):
    if scale == "paper":
        return ExperimentConfig(rewards=RewardConfig.for_side(36.0))
    if scale == "desk":
        world = WorldConfig(L=18.0, n=2, m=2, T_episode=60)
        return ExperimentConfig(
            world=world,
            rewards=RewardConfig.for_side(world.L),
            train=TrainConfig(episodes=5000),
            pretrain=PretrainConfig(steps=20_000),
            scale="desk",
            demo_episodes=500,
            eval_episodes=200,
            snapshot_episodes=50,
        )
    raise InvalidConfigurationError(f"unknown scale {scale!r}")


_SECTIONS = {"world": WorldConfig, "rewards": RewardConfig, "train": TrainConfig,
             "pretrain": PretrainConfig, "apf": ApfParams}

# Command-line spellings of the tunable table keys -> dotted config paths.
FLAG_PATHS = {
    "L": "world.L", "n": "world.n", "m": "world.m", "d_arrive": "world.d_arrive",
    "T_episode": "world.T_episode",
    "rho_nav": "rewards.rho_nav", "rho_flock": "rewards.rho_flock", "rho_col": "rewards.rho_col",
    "rho_cross": "rewards.rho_cross", "rho_time": "rewards.rho_time", "rho_stab": "rewards.rho_stab",
    "th_f": "rewards.th_f", "th_col": "rewards.th_col", "th_cross": "rewards.th_cross",
    "gamma": "train.gamma", "tau": "train.tau", "M": "train.batch_size", "E": "train.episodes",
    "capacity": "train.buffer_capacity", "lr": "train.lr",
    "alpha_critic": "pretrain.alpha_critic", "alpha_actor": "pretrain.alpha_actor",
    "S_pretrain": "pretrain.steps",
}


def _coerce(cls, key, value):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise InvalidConfigurationError(f"unknown key {cls.__name__}.{key}")
    t = str(types[key])
    try:
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        if t == "bool":
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        if t == "tuple":
            return tuple(value) if not isinstance(value, str) else tuple(json.loads(value))
    except (TypeError, ValueError) as exc:
        raise InvalidConfigurationError(f"bad value for {key}: {value!r}") from exc
    return value


def apply_overrides(cfg, overrides):
    """Apply a nested dict and/or dotted-path keys on top of ``cfg``.

    When the map side changes but no reward coefficient is given, the
    reward coefficients are rescaled to the new side.
    """
    flat = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[FLAG_PATHS.get(key, key)] = value
    sections = {name: {} for name in _SECTIONS}
    top = {}
    for path, value in flat.items():
        head, _, tail = path.partition(".")
        if tail:
            if head not in _SECTIONS:
                raise InvalidConfigurationError(f"unknown config section {head!r}")
            sections[head][tail] = _coerce(_SECTIONS[head], tail, value)
        else:
            top[head] = _coerce(ExperimentConfig, head, value)
    try:
        new = {}
        for name, cls in _SECTIONS.items():
            if sections[name]:
                new[name] = replace(getattr(cfg, name), **sections[name])
        world = new.get("world", cfg.world)
        if world.L != cfg.world.L and not any(k.startswith("rho_") for k in sections["rewards"]):
            new["rewards"] = RewardConfig.for_side(world.L, **{k: v for k, v in sections["rewards"].items()})
        return replace(cfg, **new, **top)
    except TypeError as exc:
        raise InvalidConfigurationError(str(exc)) from exc


def from_dict(data):
    base = preset(data.get("scale", "paper"))
    return apply_overrides(base, {k: v for k, v in data.items() if k != "scale"} | {"scale": data.get("scale", "paper")})


def load_config(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfigurationError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
