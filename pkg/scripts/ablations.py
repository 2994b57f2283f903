"""Run the sampling-temperature, reward-weight and step-count ablations.

Each axis writes ablate_<axis>.csv to --output-dir. The reward-weight and step
axes retrain a policy per setting, so expect several minutes each.
"""
import argparse

from dyncfg import harness
from dyncfg.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--axes", nargs="+", choices=harness.ABLATION_AXES, default=list(harness.ABLATION_AXES))
    ap.add_argument("--checkpoint", help="trained policy reused by the temperature axis")
    ap.add_argument("--output-dir", default="runs/ablations")
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(task="keywords")
    cfg = cfg.replace(output_dir=args.output_dir)
    for axis in args.axes:
        path = harness.cmd_ablate(cfg, axis, args.checkpoint if axis == "temperature" else None)
        print(path.read_text())


if __name__ == "__main__":
    main()
