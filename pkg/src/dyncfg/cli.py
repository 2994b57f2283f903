"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

from . import harness
from .config import ExperimentConfig
from .errors import InvalidConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # bad flags are a configuration problem, not a crash
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--output-dir", help="override the output directory")
    p.add_argument("--steps", type=int, help="override the number of diffusion steps K")
    p.add_argument("--task", help="override the task kind")
    p.add_argument("--iterations", type=int, help="override the number of PPO iterations")
    p.add_argument("--eval-episodes", type=int, help="override the eval episode count")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dyncfg", description="Learned guidance schedules for a toy masked diffusion model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("train", help="train a guidance policy with PPO"))
    _common(sub.add_parser("sweep", help="evaluate heuristic and fixed-scale baselines"))
    p = sub.add_parser("eval", help="distil a checkpoint into schedules and compare with baselines")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("ablate", help="run one ablation grid")
    _common(p)
    p.add_argument("--axis", required=True, choices=harness.ABLATION_AXES)
    p.add_argument("--checkpoint", help="reuse a trained policy (temperature axis only)")
    _common(sub.add_parser("print-config", help="print the effective config as YAML"))
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.task is not None:
        changes["task"] = args.task
    if args.output_dir is not None:
        changes["output_dir"] = args.output_dir
    if args.seed is not None:
        changes["seeds"] = dataclasses.replace(cfg.seeds, train=args.seed)
    if args.eval_episodes is not None:
        changes["seeds"] = dataclasses.replace(changes.get("seeds", cfg.seeds), eval_episodes=args.eval_episodes)
    if args.steps is not None:
        changes["sampler"] = dataclasses.replace(cfg.sampler, steps=args.steps, unmask_per_step=None)
    if args.iterations is not None:
        changes["ppo"] = dataclasses.replace(cfg.ppo, iterations=args.iterations)
    try:
        return cfg.replace(**changes) if changes else cfg
    except (ValueError, TypeError) as exc:
        raise InvalidConfigError(str(exc)) from exc


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "print-config":
            sys.stdout.write(cfg.to_yaml())
        elif args.command == "train":
            paths = harness.cmd_train(cfg)
            print(f"checkpoint written to {paths['checkpoint']}")
        elif args.command == "sweep":
            report = harness.cmd_sweep(cfg)
            sys.stdout.write(report.to_csv())
        elif args.command == "eval":
            report = harness.cmd_eval(cfg, args.checkpoint)
            sys.stdout.write(report.to_csv())
        elif args.command == "ablate":
            path = harness.cmd_ablate(cfg, args.axis, args.checkpoint)
            sys.stdout.write(path.read_text())
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any failure as a runtime exit code
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
