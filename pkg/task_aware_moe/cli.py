#!/usr/bin/env python3
"""Command-line interface for task-aware MoE experiments."""

import argparse
import logging
import logging.handlers
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from task_aware_moe.anyres import LinearPatchEncoder, TransformSet, anyres_encode, load_grid_csv, save_features_csv
from task_aware_moe.config import load_config
from task_aware_moe.errors import CheckpointError, ConfigError, NumericError, TaskMoeError
from task_aware_moe.experiments import (
    GRADCHECK_TOLERANCE,
    grad_check_suite,
    run_ablation_suite,
    run_conflict_validation,
    run_experiment,
    run_expert_load,
    run_ratio_sweep,
    run_stage1_only,
    run_stage2_only,
)
from task_aware_moe.router import TaskGroup

logger = logging.getLogger("task_aware_moe.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

TASK_FILTERS = {"all": None, "und": int(TaskGroup.UNDERSTANDING), "gen": int(TaskGroup.GENERATION)}


def get_env_or_default(key, default):
    return os.environ.get(key, default)


def setup_logging(debug=False, log_dir=None):
    """Set up logging configuration."""
    # Get log level from environment (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    level_name = "DEBUG" if debug else get_env_or_default("LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    handlers: List[logging.Handler] = [logging.StreamHandler()]

    log_dir = log_dir or get_env_or_default("LOG_DIR", "")
    if log_dir:
        log_dir = os.path.expanduser(log_dir)
        os.makedirs(log_dir, exist_ok=True)
        max_log_size = int(get_env_or_default("MAX_LOG_SIZE_MB", "10")) * 1024 * 1024
        backup_count = int(get_env_or_default("LOG_BACKUP_COUNT", "5"))
        handlers.append(logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, "task_aware_moe.log"), maxBytes=max_log_size, backupCount=backup_count
        ))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="task-moe", description='Task-aware mixture-of-experts experiments')
    parser.add_argument('--debug', action='store_true', help='Enable debug logging')
    parser.add_argument('--log-dir', help='Also write a rotating log file here')
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', help='Path to config file')
        p.add_argument('--seed', type=int, help='Override seed')
        p.add_argument('--out', help='Override output directory')
        p.add_argument('--steps', type=int, help='Override stage-1 and stage-2 step counts')
        return p

    experiment("stage1", "train the per-task FFN stacks")
    experiment("stage2", "assemble the MoE model from stage-1 checkpoints and fine-tune it")
    experiment("run", "stage 1, stage 2, evaluation and reports")
    experiment("conflict", "single-task vs joint dense training")
    experiment("ablate", "router, shared expert and training-strategy ablations")
    sweep = experiment("ratio-sweep", "experts-per-group : shared-experts sweep")
    sweep.add_argument('--ratios', help='Comma-separated g:s pairs, e.g. 1:0,2:1')

    load = experiment("expert-load", "expert load report from a trained checkpoint")
    load.add_argument('--checkpoint', required=True, help='Merged model checkpoint (model.tamo)')
    load.add_argument('--task', choices=sorted(TASK_FILTERS), default="und", help='Samples to route')
    load.add_argument('--samples', type=int, help='Number of instances to average')

    grad = sub.add_parser("gradcheck", help="finite-difference checks of the gradient code")
    grad.add_argument('--seeds', type=int, default=3, help='Number of seeds')
    grad.add_argument('--eps', type=float, default=1e-5, help='Central-difference step')
    grad.add_argument('--tolerance', type=float, default=GRADCHECK_TOLERANCE, help='Max relative error')

    demo = sub.add_parser("anyres-demo", help="encode a CSV grid with the any-resolution pipeline")
    demo.add_argument('--grid', required=True, help='CSV of floats in [0, 1]')
    demo.add_argument('--split', default="2x2", help='rows x cols, e.g. 2x2')
    demo.add_argument('--patch-size', type=int, default=2, help='Encoder tile size p')
    demo.add_argument('--dim', type=int, default=8, help='Encoder feature width D')
    demo.add_argument('--transforms', default="identity,rotate90,rotate180,rotate270", help='Transform names')
    demo.add_argument('--seed', type=int, default=0, help='Seed for transforms and the encoder')
    demo.add_argument('--out', default="features.csv", help='Output CSV')
    return parser


def _overrides(args) -> Dict[str, Optional[str]]:
    overrides = {"seed": args.seed, "out_dir": args.out}
    if args.steps is not None:
        overrides["stage1.steps"] = args.steps
        overrides["stage2.steps"] = args.steps
    if getattr(args, "ratios", None):
        overrides["sweep.ratios"] = args.ratios
    return overrides


def _run_gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seeds):
        errors = grad_check_suite(seed, args.eps)
        logger.info(f"seed {seed}: " + ", ".join(f"{k}={v:.2e}" for k, v in errors.items()))
        worst = max(worst, *errors.values())
    print(f"max relative error over {args.seeds} seeds: {worst:.3e} (tolerance {args.tolerance:.0e})")
    if worst >= args.tolerance:
        logger.error("Gradient check failed")
        return EXIT_NUMERIC
    return EXIT_OK


def _run_anyres_demo(args) -> int:
    try:
        rows, cols = (int(v) for v in args.split.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--split must look like 2x2, got {args.split!r}", keys=["anyres.split"])
    rng = np.random.default_rng(args.seed)
    grid = load_grid_csv(args.grid)
    ts = TransformSet(tuple(n.strip() for n in args.transforms.split(",") if n.strip()))
    encoder = LinearPatchEncoder.init(args.patch_size, args.dim, rng)
    features = anyres_encode(grid, (rows, cols), ts, encoder, seed=args.seed)
    save_features_csv(args.out, features)
    tokens = encoder.tokens_for((grid.shape[0] // rows, grid.shape[1] // cols))
    print(f"grid {grid.shape[0]}x{grid.shape[1]} -> {rows * cols} patches + global view, "
          f"{tokens} tokens each -> features {features.shape[0]}x{features.shape[1]} written to {args.out}")
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.debug, args.log_dir)

    try:
        if args.command == "gradcheck":
            return _run_gradcheck(args)
        if args.command == "anyres-demo":
            return _run_anyres_demo(args)

        cfg = load_config(args.config, _overrides(args))
        out_dir = cfg["out_dir"]
        if args.command == "stage1":
            report = run_stage1_only(cfg, out_dir)
        elif args.command == "stage2":
            report = run_stage2_only(cfg, out_dir)
        elif args.command == "run":
            report = run_experiment(cfg, out_dir)
        elif args.command == "conflict":
            report = run_conflict_validation(cfg, out_dir)
            print(report.metrics["table"])
        elif args.command == "ablate":
            report = run_ablation_suite(cfg, out_dir)
            print(report.metrics["table"])
        elif args.command == "ratio-sweep":
            report = run_ratio_sweep(cfg, out_dir)
            print(report.metrics["table"])
        else:
            _, bars = run_expert_load(cfg, args.checkpoint, out_dir, TASK_FILTERS[args.task], args.samples)
            print(bars)
            return EXIT_OK
        logger.info(f"{args.command} finished in {report.wall_clock_seconds:.1f}s; results in {out_dir}")
        return EXIT_OK
    except (ConfigError, CheckpointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except TaskMoeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


def main():
    """Main entry point for the CLI."""
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        sys.exit(130)


if __name__ == '__main__':
    main()
