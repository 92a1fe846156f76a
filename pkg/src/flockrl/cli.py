"""Command-line entry point: ``flockrl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import ALGORITHMS, FLAG_PATHS, apply_overrides, load_config, preset, save_config
from .demos import calibrate_quality, generate_demos
from .errors import (CalibrationError, ComparisonRefusedError, ContractViolationError, CorruptCheckpointError,
                     CorruptFileError, InvalidConfigurationError, NumericError)
from .experience import load_demos
from .harness import (compare, evaluate, format_table, load_agents, run_experiment, save_agents, _write_csv)
from .maddpg import make_agents
from .pretrain import REPORT_COLUMNS, pretrain

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file (keys as in a run's config.json)")
    p.add_argument("--scale", choices=("paper", "desk"), help="preset used as the base configuration")
    p.add_argument("--seed", type=int, help="single seed (overrides the seeds list)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key by dotted path, e.g. train.sigma0=0.2")
    for flag in FLAG_PATHS:
        p.add_argument(f"--{flag}", dest=f"ov_{flag}", metavar="X", help=f"override {FLAG_PATHS[flag]}")
    p.add_argument("-v", "--verbose", action="store_true")


def build_config(args, **top):
    cfg = load_config(args.config) if args.config else preset(args.scale or "paper")
    overrides = {}
    for flag in FLAG_PATHS:
        value = getattr(args, f"ov_{flag}", None)
        if value is not None:
            overrides[flag] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = value
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    overrides.update({k: v for k, v in top.items() if v is not None})
    return apply_overrides(cfg, overrides)


def cmd_gen_demos(args):
    cfg = build_config(args)
    seed = args.seed if args.seed is not None else cfg.demo_seed
    params = cfg.apf
    if args.quality != "base":
        target = float(args.quality.removeprefix("success-rate="))
        params, rate = calibrate_quality(cfg.world, cfg.rewards, target, seed, base=params)
        print(f"calibrated action noise sigma={params.action_noise_sigma:.4f} (measured {rate:.3f})")
    episodes = args.episodes or cfg.demo_episodes
    _, stats = generate_demos(cfg.world, cfg.rewards, params, episodes, seed, path=args.out)
    print(f"{stats.episodes} episodes, {stats.transitions} transitions, success rate {stats.success_rate:.3f}"
          f" -> {args.out}")


def cmd_pretrain(args):
    cfg = build_config(args, algo=args.algo)
    demo = load_demos(args.demos)
    seed = cfg.seeds[0]
    agents = make_agents(cfg.world, seed, cfg.train.hidden, cfg.train.lr)
    report = []
    pretrain(agents, demo, cfg.pretrain_for_algo(), cfg.train.gamma, seed, on_report=report.append)
    out = Path(args.out)
    save_agents(agents, out)
    _write_csv(out / "pretrain_report.csv", REPORT_COLUMNS, report)
    save_config(cfg, out / "config.json")
    print(f"pretrained {cfg.world.n} agents for {cfg.pretrain.steps} steps -> {out}")


def cmd_train(args):
    cfg = build_config(args, algo=args.algo, demo_path=args.demos and str(args.demos))
    out = run_experiment(cfg, args.out, resume=not args.no_resume)
    print(f"run complete -> {out}")


def cmd_eval(args):
    cfg = build_config(args)
    agents = load_agents(args.checkpoint, cfg.world)
    episodes = args.episodes or cfg.eval_episodes
    agg = evaluate(agents, cfg.world, cfg.rewards, episodes, cfg.seeds[0], episode_csv=args.csv)
    print(json.dumps(asdict(agg), indent=2))


def cmd_ablate(args):
    base = build_config(args, demo_path=args.demos and str(args.demos))
    out = Path(args.out)
    dirs = []
    for algo in ("pwd", "pwd-no-bc", "pwd-no-rl", "pwd-no-overfit"):
        cfg = replace(base, algo=algo)
        if cfg.demo_path is None and dirs:
            cfg = replace(cfg, demo_path=str(dirs[0] / "demos.jsonl"))
        dirs.append(run_experiment(cfg, out / algo))
    summary, _ = compare(dirs, out / "comparison")
    print(format_table(summary))


def cmd_compare(args):
    summary, _ = compare(args.runs, args.out, threshold=args.threshold, window=args.window)
    print(format_table(summary))
    if args.out:
        print(f"summary and curves -> {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="flockrl", description="Multi-agent flocking with demonstration pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="generate APF demonstrations")
    _common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--quality", default="base", help="'base' or 'success-rate=X'")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("pretrain", help="pretrain agents on a demo file")
    _common(p)
    p.add_argument("--algo", default="pwd", choices=[a for a in ALGORITHMS if a.startswith("pwd")])
    p.add_argument("--demos", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run a full experiment into a run directory")
    _common(p)
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--demos", type=Path, help="existing demo file (generated otherwise)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-resume", action="store_true", help="refuse to continue a partial run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint directory")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--episodes", type=int)
    p.add_argument("--csv", type=Path, help="per-episode CSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run PwD-MARL and its three ablations")
    _common(p)
    p.add_argument("--demos", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="compare run directories")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--window", type=int, default=200)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (InvalidConfigurationError, ComparisonRefusedError, ContractViolationError, CalibrationError,
            CorruptFileError, CorruptCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
