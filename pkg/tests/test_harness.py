import csv
import io
import json

import numpy as np
import pytest
import yaml

from dyncfg import harness
from dyncfg.cli import main
from dyncfg.config import AggregationConfig, ExperimentConfig, SeedConfig
from dyncfg.errors import InvalidConfigError
from dyncfg.ppo import PpoConfig, load_checkpoint
from dyncfg.rewards import RewardWeights
from dyncfg.schedules import HEURISTICS


def tiny(tmp_path, **kw):
    cfg = ExperimentConfig(
        ppo=PpoConfig(iterations=2, episodes_per_iteration=8, minibatch_size=16),
        aggregation=AggregationConfig(num_trajectories=10),
        seeds=SeedConfig(train_prompt_count=50, eval_episodes=20),
        output_dir=str(tmp_path / "out"),
    )
    return cfg.replace(**kw)


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


# -- config ------------------------------------------------------------------------------

def test_config_yaml_roundtrip(tmp_path):
    cfg = tiny(tmp_path, task="length")
    (tmp_path / "c.yaml").write_text(cfg.to_yaml())
    assert ExperimentConfig.load(tmp_path / "c.yaml") == cfg


def test_config_partial_file_uses_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("task: neg2pos\nppo:\n  iterations: 7\n")
    cfg = ExperimentConfig.load(tmp_path / "c.yaml")
    assert cfg.task == "neg2pos" and cfg.ppo.iterations == 7
    assert cfg.ppo.learning_rate == ExperimentConfig().ppo.learning_rate
    assert cfg.reward_weights() == RewardWeights.for_task("neg2pos")


@pytest.mark.parametrize("text", ["bogus: 1\n", "ppo:\n  iterations: two\n", "task: poetry\n",
                                  "seeds:\n  eval_prompt_start: 10\n", "sampler:\n  steps: 0\n",
                                  "- just\n- a list\n", "env:\n  source_length: [3]\n"])
def test_config_rejects_bad_input(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(InvalidConfigError):
        ExperimentConfig.load(tmp_path / "c.yaml")


def test_seed_sets_disjoint():
    s = SeedConfig()
    assert not set(s.train_prompts) & set(s.eval_prompts)


# -- train ---------------------------------------------------------------------------------

def test_train_smoke_and_determinism(tmp_path):
    cfg = tiny(tmp_path, output_dir=str(tmp_path / "a" / "b" / "c"))
    paths = harness.cmd_train(cfg)
    params, ppo_cfg, meta = load_checkpoint(paths["checkpoint"])
    assert ppo_cfg == cfg.ppo and meta["seed"] == cfg.seeds.train
    first = paths["history"].read_text()
    assert len(rows_of(first)) == 2
    assert ExperimentConfig.from_dict(yaml.safe_load(paths["config"].read_text())) == cfg
    harness.cmd_train(cfg)
    assert paths["history"].read_text() == first


# -- sweep -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    cfg = tiny(tmp_path_factory.mktemp("sweep"))
    return cfg, harness.cmd_sweep(cfg)


def test_sweep_rows(sweep):
    cfg, report = sweep
    assert len(report.rows) == 7 + 13
    names = [r["method"] for r in report.rows]
    assert names[:7] == list(HEURISTICS) and len(set(names)) == 20


def test_sweep_best_fixed_flag(sweep):
    _, report = sweep
    fixed = [r for r in report.rows if r["method"].startswith("fixed_")]
    oracle = max(fixed, key=lambda r: (r["mean_reward"], -r["mean_gamma"]))
    flagged = [r for r in report.rows if r["best_fixed"]]
    assert flagged == [oracle]
    assert report.meta["best_fixed_gamma"] == oracle["mean_gamma"]
    assert report.row("fixed")["mean_reward"] == oracle["mean_reward"]


def test_sweep_linear_pair_differs(sweep):
    _, report = sweep
    a, b = report.row("linear_increase"), report.row("linear_decrease")
    assert a["mean_reward"] != b["mean_reward"]
    assert report.episodes["linear_increase"] != report.episodes["linear_decrease"]


def test_sweep_files(sweep):
    cfg, _ = sweep
    from pathlib import Path
    out = Path(cfg.output_dir)
    assert len(rows_of((out / "sweep.csv").read_text())) == 20
    traj = rows_of((out / "sweep_trajectories.csv").read_text())
    assert len(traj) == 30


# -- eval -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def evaluated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("eval")
    cfg = tiny(tmp)
    paths = harness.cmd_train(cfg)
    return cfg, harness.cmd_eval(cfg, paths["checkpoint"]), paths


def test_eval_rows_and_schedule_length(evaluated):
    cfg, report, _ = evaluated
    assert [r["method"] for r in report.rows] == ["rl_mean", "rl_freq"] + list(HEURISTICS)
    assert report.schedules["rl_mean"].num_blocks == 30
    assert report.meta["policy_calls_during_replay"] == 0
    assert report.schedules["rl_mean"].meta["N"] == 10


def test_eval_metrics_recomputable(evaluated):
    cfg, report, _ = evaluated
    from pathlib import Path
    dumped = json.loads((Path(cfg.output_dir) / "eval.json").read_text())
    table = {r["method"]: r for r in rows_of((Path(cfg.output_dir) / "eval.csv").read_text())}
    for method, eps in dumped["episodes"].items():
        assert len(eps) == cfg.seeds.eval_episodes
        assert abs(np.mean([e["total"] for e in eps]) - float(table[method]["mean_reward"])) <= 1e-9
        assert abs(np.mean([e["ppl"] for e in eps]) - float(table[method]["ppl"])) <= 1e-9
        ctrl = 100 * np.mean([e["r_ctrl"] == 1.0 for e in eps])
        assert abs(ctrl - float(table[method]["ctrl_pct"])) <= 1e-9


def test_eval_paired_with_sweep(evaluated, tmp_path):
    cfg, report, _ = evaluated
    sweep = harness.run_sweep(cfg)
    for name in HEURISTICS:
        assert report.row(name) == sweep.row(name)


def test_report_csv_stable(evaluated):
    cfg, report, paths = evaluated
    again = harness.run_eval(cfg, load_checkpoint(paths["checkpoint"])[0])
    assert again.to_csv() == report.to_csv()


# -- ablations --------------------------------------------------------------------------------

def test_ablate_reward_weights(tmp_path):
    cfg = tiny(tmp_path)
    rows = harness.run_ablation(cfg, "reward_weights")
    assert [r["setting"] for r in rows] == ["2/3", "1/1", "3/2"]
    w = harness.ratio_weights(cfg, 2, 3)
    assert w.lambda_ctrl / w.lambda_ppl == pytest.approx(2 / 3)
    assert w.lambda_ctrl + w.lambda_ppl == pytest.approx(1.0)


def test_ablate_steps(tmp_path):
    rows = harness.run_ablation(tiny(tmp_path), "steps")
    assert [r["setting"] for r in rows] == ["K=30", "K=60"]


def test_ablate_temperature(tmp_path):
    cfg = tiny(tmp_path)
    path = harness.cmd_ablate(cfg, "temperature")
    rows = rows_of(path.read_text())
    assert [r["setting"] for r in rows] == ["T=0", "T=0.5", "T=1", "T=1.5", "T=2"]
    assert float(rows[0]["schedule_std"]) == 0.0
    with pytest.raises(ValueError):
        harness.run_ablation(cfg, "learning_rate")


# -- CLI -----------------------------------------------------------------------------------------

def test_cli_print_config(capsys):
    assert main(["print-config", "--task", "length", "--steps", "60"]) == 0
    cfg = ExperimentConfig.from_dict(yaml.safe_load(capsys.readouterr().out))
    assert cfg.task == "length" and cfg.sampler.steps == 60


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--task", "poetry"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--output-dir", str(tmp_path)]) == 2


def test_cli_train_and_sweep(tmp_path, capsys):
    cfg = tiny(tmp_path)
    (tmp_path / "c.yaml").write_text(cfg.to_yaml())
    out = tmp_path / "cli"
    assert main(["train", "--config", str(tmp_path / "c.yaml"), "--output-dir", str(out), "--seed", "3"]) == 0
    assert load_checkpoint(out / "checkpoint.npz")[2]["seed"] == 3
    assert main(["sweep", "--config", str(tmp_path / "c.yaml"), "--output-dir", str(out),
                 "--eval-episodes", "5"]) == 0
    assert len(rows_of((out / "sweep.csv").read_text())) == 20
