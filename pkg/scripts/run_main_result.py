"""Train three seeds on the keyword task and compare the distilled schedules with the baselines.

Writes sweep.*, seed_<k>/eval.* and summary.csv under --output-dir.
"""
import argparse
import csv
import time
from pathlib import Path

from dyncfg import harness
from dyncfg.config import ExperimentConfig
from dyncfg.schedules import HEURISTICS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", help="YAML config; defaults to the keyword task setup")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--output-dir", default="runs/main_result")
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(task="keywords")
    out = Path(args.output_dir)
    t0 = time.perf_counter()
    env = harness.build_env(cfg)
    sweep = harness.run_sweep(cfg, env)
    sweep.write(out, "sweep")
    best = max(r["mean_reward"] for r in sweep.rows if r["method"].startswith("fixed_"))
    print(f"best fixed gamma {sweep.meta['best_fixed_gamma']} reward {best:.4f}")

    summary = []
    for seed in args.seeds:
        params, history = harness.train_policy(cfg, env, seed)
        rep = harness.run_eval(cfg, params, env, sweep)
        rep.write(out / f"seed_{seed}", "eval")
        history.save(out / f"seed_{seed}" / "history.csv")
        rl = rep.row("rl_mean")["mean_reward"]
        beaten = sum(rl > rep.row(h)["mean_reward"] for h in HEURISTICS)
        ok = rl >= best - 0.005 and beaten >= 5
        summary.append({"seed": seed, "rl_mean": rl, "rl_freq": rep.row("rl_freq")["mean_reward"],
                        "best_fixed": best, "heuristics_beaten": beaten, "pass": ok})
        print(f"seed {seed}: rl_mean {rl:.4f}, beats {beaten}/7 heuristics, {'pass' if ok else 'fail'}")

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    passed = sum(r["pass"] for r in summary)
    print(f"{passed}/{len(summary)} seeds pass in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
