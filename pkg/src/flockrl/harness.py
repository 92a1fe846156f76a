"""Experiment orchestration: training runs, evaluation, run directories,
manifests and cross-run comparison."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import baselines
from .config import ExperimentConfig, load_config, save_config
from .demos import ApfParams, calibrate_quality, episode_prefix, generate_demos
from .errors import ComparisonRefusedError, ContractViolationError, InvalidConfigurationError
from .experience import ReplayBuffer, load_demos, save_demos
from .maddpg import (EVAL_STREAM, METRIC_COLUMNS, env_seed, joint_actions, make_agents, online_train,
                     run_episode)
from .nn import load_params, save_params
from .pretrain import REPORT_COLUMNS, pretrain

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("episode", "success_rate", "return", "flock_distance", "time_steps", "force_sum")
EPISODE_EVAL_COLUMNS = ("episode", "scene_seed", "success", "return", "flock_distance", "time_steps",
                        "force_sum", "status")
MANIFEST = "manifest.json"


@dataclass
class Aggregate:
    success_rate: float
    ret: float
    flock_distance: float
    time_steps: float
    force_sum: float

    def row(self, episode):
        return [episode, repr(self.success_rate), repr(self.ret), repr(self.flock_distance),
                repr(self.time_steps), repr(self.force_sum)]


def evaluate(agents, world_cfg, rc, episodes, seed, episode_csv=None):
    """Greedy (noise-free) rollouts on evaluation scenes; returns the means."""
    rows = []
    for ep in range(episodes):
        fields, _ = run_episode(world_cfg, rc, env_seed(seed, ep, EVAL_STREAM),
                                lambda world, obs: joint_actions(agents, obs))
        rows.append([ep, fields["scene_seed"], int(fields["success"]), fields["ret"],
                     fields["flock_distance"], fields["time_steps"], fields["force_sum"], fields["status"]])
    if episode_csv is not None:
        _write_csv(episode_csv, EPISODE_EVAL_COLUMNS, rows)
    arr = np.array([r[2:7] for r in rows], dtype=float)
    return Aggregate(*arr.mean(axis=0).tolist())


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints ------------------------------------------------------------

def save_agents(agents, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, b in enumerate(agents):
        save_params(directory / f"agent{i}_actor.bin", b.actor, b.actor_opt)
        save_params(directory / f"agent{i}_critic.bin", b.critic, b.critic_opt)
        save_params(directory / f"agent{i}_actor_target.bin", b.actor_target)
        save_params(directory / f"agent{i}_critic_target.bin", b.critic_target)


def load_agents(directory, world_cfg):
    directory = Path(directory)
    agents = make_agents(world_cfg, 0)
    for i, b in enumerate(agents):
        b.actor, b.actor_opt = load_params(directory / f"agent{i}_actor.bin")
        b.critic, b.critic_opt = load_params(directory / f"agent{i}_critic.bin")
        b.actor_target, _ = load_params(directory / f"agent{i}_actor_target.bin")
        b.critic_target, _ = load_params(directory / f"agent{i}_critic_target.bin")
    return agents


# -- demonstrations ---------------------------------------------------------

def prepare_demos(cfg, out_dir):
    """Load or generate the demonstration buffer for ``cfg``; None if unused."""
    if not cfg.uses_demos:
        return None
    out_dir = Path(out_dir)
    if cfg.demo_path is not None:
        demo = load_demos(cfg.demo_path)
    else:
        path = out_dir / "demos.jsonl"
        if path.exists():
            demo = load_demos(path)
        else:
            params = cfg.apf
            calibration = None
            if cfg.target_demo_success is not None:
                params, rate = calibrate_quality(cfg.world, cfg.rewards, cfg.target_demo_success, cfg.demo_seed,
                                                 base=cfg.apf)
                calibration = {"target": cfg.target_demo_success, "measured": rate}
            demo, stats = generate_demos(cfg.world, cfg.rewards, params, cfg.demo_episodes, cfg.demo_seed)
            if calibration:
                demo.meta["calibration"] = calibration
            save_demos(demo, path)
    n_eps = len(demo.meta.get("episodes", []))
    if n_eps > cfg.demo_episodes:
        demo = episode_prefix(demo, cfg.demo_episodes)
    if demo.n != cfg.world.n or demo.obs_dim != cfg.world.obs_dim:
        raise InvalidConfigurationError("demo file shape does not match the world configuration")
    meta = {k: v for k, v in demo.meta.items() if k != "episodes"}
    meta["episodes_used"] = len(demo.meta.get("episodes", []))
    meta["transitions"] = len(demo)
    (out_dir / "demo_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return demo


# -- a single seed ----------------------------------------------------------

def snapshot_points(cfg):
    E, k = cfg.train.episodes, cfg.eval_snapshots
    if k == 0 or E == 0:
        return set()
    return {max(1, round(E * j / k)) for j in range(1, k + 1)}


def train_seed(cfg, seed, demo, seed_dir):
    """Full pipeline for one seed; writes every artifact into ``seed_dir``."""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    agents = make_agents(cfg.world, seed, cfg.train.hidden, cfg.train.lr)
    algo = cfg.algo
    if algo.startswith("pwd"):
        report = []
        pretrain(agents, demo, cfg.pretrain_for_algo(), cfg.train.gamma, seed, on_report=report.append)
        _write_csv(seed_dir / "pretrain_report.csv", REPORT_COLUMNS, [[repr(v) if isinstance(v, float) else v
                                                                       for v in r] for r in report])
        save_agents(agents, seed_dir / "checkpoints" / "pretrained")
        stream = online_train(agents, cfg.world, cfg.rewards, cfg.train,
                              ReplayBuffer(cfg.train.buffer_capacity, cfg.world.n, cfg.world.obs_dim), seed)
    else:
        stream = baselines.run_baseline(
            algo, cfg.world, cfg.rewards, cfg.train,
            ReplayBuffer(cfg.train.buffer_capacity, cfg.world.n, cfg.world.obs_dim), seed,
            demo=demo, pretrain_steps=cfg.pretrain.steps, pretrain_batch=cfg.pretrain.batch_size,
            lambda_bc=cfg.lambda_bc, agents=agents)
    points = snapshot_points(cfg)
    metric_rows, timing_rows, eval_rows = [], [], []
    for m in stream:
        metric_rows.append(m.row())
        timing_rows.append([m.episode, f"{m.wall_ms:.3f}"])
        if m.episode + 1 in points:
            agg = evaluate(agents, cfg.world, cfg.rewards, cfg.snapshot_episodes, seed)
            eval_rows.append(agg.row(m.episode + 1))
            log.info("seed %d episode %d: snapshot success %.3f", seed, m.episode + 1, agg.success_rate)
    _write_csv(seed_dir / "train.csv", METRIC_COLUMNS, metric_rows)
    _write_csv(seed_dir / "timing.csv", ("episode", "wall_ms"), timing_rows)
    _write_csv(seed_dir / "eval.csv", EVAL_COLUMNS, eval_rows)
    final = evaluate(agents, cfg.world, cfg.rewards, cfg.eval_episodes, seed,
                     episode_csv=seed_dir / "final_eval_episodes.csv")
    (seed_dir / "final_eval.json").write_text(json.dumps(asdict(final), indent=2) + "\n", encoding="utf-8")
    save_agents(agents, seed_dir / "checkpoints" / "final")
    (seed_dir / "DONE").write_text(cfg.digest() + "\n", encoding="utf-8")
    return agents, final


# -- run directories --------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, cfg):
    run_dir = Path(run_dir)
    files = {str(p.relative_to(run_dir)): _sha256(p)
             for p in sorted(run_dir.rglob("*")) if p.is_file() and p.name != MANIFEST}
    manifest = {"config_digest": cfg.digest(), "complete": True, "files": files}
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def verify_manifest(run_dir):
    """True when every listed file exists with its recorded hash."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / MANIFEST).read_text(encoding="utf-8"))
    return all((run_dir / rel).is_file() and _sha256(run_dir / rel) == digest
               for rel, digest in manifest["files"].items())


def run_experiment(cfg, out_dir, resume=True):
    """Run every seed of ``cfg`` into ``out_dir`` and return the directory.

    A completed directory with the same config digest is left untouched.
    Partially completed runs resume at seed granularity when ``resume`` is
    true (finished seeds are kept, unfinished ones restart); otherwise they
    are refused.
    """
    out_dir = Path(out_dir)
    digest = cfg.digest()
    snapshot = out_dir / "config.json"
    if snapshot.exists():
        old = load_config(snapshot)
        if old.digest() != digest:
            raise ContractViolationError(f"{out_dir} holds a run with a different configuration")
        manifest = out_dir / MANIFEST
        if manifest.exists() and json.loads(manifest.read_text())["config_digest"] == digest \
                and verify_manifest(out_dir):
            log.info("%s already complete; nothing to do", out_dir)
            return out_dir
        if not resume:
            raise ContractViolationError(f"{out_dir} holds a partial run; pass resume to continue")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, snapshot)
    demo = prepare_demos(cfg, out_dir)
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        done = seed_dir / "DONE"
        if done.exists() and done.read_text().strip() == digest:
            continue
        if seed_dir.exists():
            shutil.rmtree(seed_dir)
        train_seed(cfg, seed, demo, seed_dir)
    write_manifest(out_dir, cfg)
    return out_dir


# -- comparison -------------------------------------------------------------

def moving_average(x, window):
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def episodes_to_threshold(success, threshold, window=200):
    """1-based episode at which the moving-average success first reaches
    ``threshold``; None if it never does.

    Only full windows count (or the whole curve when it is shorter than a
    window), so a lucky first episode does not register as reaching 0.5.
    """
    ma = moving_average(success, window)
    first = min(window, len(ma)) - 1
    hit = np.nonzero(ma[first:] >= threshold)[0] if len(ma) else []
    return int(hit[0]) + first + 1 if len(hit) else None


def load_run(run_dir):
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    seeds = {}
    for seed in cfg.seeds:
        sd = run_dir / f"seed_{seed}"
        if not (sd / "DONE").exists():
            continue
        seeds[seed] = {
            "train": read_csv(sd / "train.csv"),
            "eval": read_csv(sd / "eval.csv"),
            "final": json.loads((sd / "final_eval.json").read_text()),
        }
    return cfg, seeds


SUMMARY_COLUMNS = ("run", "algo", "seed", "checkpoint", "success_rate", "return", "flock_distance",
                   "time_steps", "force_sum", "episodes_to_threshold")
CURVE_COLUMNS = ("run", "algo", "seed", "episode", "success_ma", "return_ma")


def compare(run_dirs, out_dir=None, threshold=0.5, window=200):
    """Summary rows (per run, seed and checkpoint) plus long-format curves."""
    if len(run_dirs) < 2:
        raise ComparisonRefusedError("need at least two run directories")
    runs = [(Path(d), *load_run(d)) for d in run_dirs]
    ref_world = runs[0][1].world
    for d, cfg, _ in runs[1:]:
        if cfg.world != ref_world or cfg.rewards != runs[0][1].rewards:
            raise ComparisonRefusedError(f"{d} uses a different environment configuration")
    summary, curves = [], []
    for d, cfg, seeds in runs:
        for seed, data in sorted(seeds.items()):
            success = [int(r["success"]) for r in data["train"]]
            returns = [float(r["return"]) for r in data["train"]]
            ett = episodes_to_threshold(success, threshold, window)
            for r in data["eval"]:
                summary.append([d.name, cfg.algo, seed, int(r["episode"]), float(r["success_rate"]),
                                float(r["return"]), float(r["flock_distance"]), float(r["time_steps"]),
                                float(r["force_sum"]), ett])
            f = data["final"]
            summary.append([d.name, cfg.algo, seed, "final", f["success_rate"], f["ret"], f["flock_distance"],
                            f["time_steps"], f["force_sum"], ett])
            s_ma = moving_average(success, window)
            r_ma = moving_average(returns, window)
            for k in range(len(success)):
                curves.append([d.name, cfg.algo, seed, k + 1, repr(float(s_ma[k])), repr(float(r_ma[k]))])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary)
        _write_csv(out_dir / "curves.csv", CURVE_COLUMNS, curves)
    return summary, curves


def format_table(summary):
    """Final-checkpoint means per algorithm across seeds, as plain text."""
    by_algo = {}
    for row in summary:
        if row[3] == "final":
            by_algo.setdefault((row[0], row[1]), []).append(row[4:9])
    lines = [f"{'run':<24}{'algo':<16}{'success':>9}{'reward':>9}{'flock':>8}{'steps':>8}{'force':>8}"]
    for (run, algo), rows in by_algo.items():
        m = np.mean(np.array(rows, dtype=float), axis=0)
        lines.append(f"{run:<24}{algo:<16}{m[0]:>9.3f}{m[1]:>9.3f}{m[2]:>8.3f}{m[3]:>8.2f}{m[4]:>8.2f}")
    return "\n".join(lines)
