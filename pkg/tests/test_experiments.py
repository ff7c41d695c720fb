import json
from pathlib import Path

import pytest

from implicitq.experiments import (
    ExperimentConfig,
    ScoringError,
    normalized_score,
    read_rows,
    rerun_from_manifest,
    run_experiment,
    score_runs,
    write_scores,
    worker_count,
)
from implicitq.tabular import ParameterError


def test_normalized_score_anchors():
    assert normalized_score(-300.0, -300.0, -100.0) == 0.0
    assert normalized_score(-100.0, -300.0, -100.0) == 1.0
    assert normalized_score(150.0, 100.0, 200.0) == pytest.approx(0.5)
    with pytest.raises(ScoringError):
        normalized_score(1.0, 5.0, 5.0)


def test_config_validation():
    with pytest.raises(ParameterError):
        ExperimentConfig(kind="dp_equivalence", seeds=[])
    with pytest.raises(ParameterError):
        ExperimentConfig(kind="dreaming", seeds=[0])
    with pytest.raises(ParameterError):
        ExperimentConfig(kind="deep_train", seeds=[0], variants=["ddpg"])
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"kind": "dp_equivalence", "seeds": [0], "colour": 1})


def test_yaml_load(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("kind: error_propagation\nseeds: [0, 1]\nalphas: [0.0, 1.0]\ntaus: [0.1]\n"
                    "n_steps: 20\nnoise: {kind: iid_gaussian, scale: 0.1}\n")
    cfg = ExperimentConfig.load(path)
    assert cfg.seeds == (0, 1) and len(cfg.cells()) == 4


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("IMPLICITQ_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.delenv("IMPLICITQ_WORKERS")
    assert worker_count() == 1


def small_dp_config(**kw):
    doc = dict(kind="dp_equivalence", seeds=[0, 1], alphas=[0.0, 0.9], taus=[0.1],
               mdp={"n_states": [3, 6], "n_actions": [2, 3], "branching_factor": 2,
                    "gamma": 0.9}, n_steps=30)
    doc.update(kw)
    return ExperimentConfig(**doc)


def test_dp_equivalence_run(tmp_path):
    out, failed = run_experiment(small_dp_config(), tmp_path / "run", workers=1)
    assert failed == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["cells"]) == 4 and manifest["code_version"]
    for cell in manifest["cells"]:
        assert read_rows(out / cell["file"])[0]["max_policy_deviation"] < 1e-10
    agg = read_rows(out / "aggregate.csv")
    assert {r["alpha"] for r in agg} == {0.0, 0.9} and all(r["max_policy_deviation_n"] == 2
                                                          for r in agg)
    assert (out / "plot.py").exists()


def test_error_propagation_run_and_rerun(tmp_path):
    cfg = ExperimentConfig(kind="error_propagation", seeds=[0, 1], alphas=[0.0, 1.0], taus=[0.1],
                           n_steps=25, noise={"kind": "iid_gaussian", "scale": 0.1},
                           mdp={"n_states": 5, "n_actions": 2, "branching_factor": 2,
                                "gamma": 0.9})
    out, _ = run_experiment(cfg, tmp_path / "a", workers=1)
    first = (out / "aggregate.csv").read_text()
    rows = read_rows(out / "aggregate.csv")
    assert max(r["step"] for r in rows) == 25
    again, _ = rerun_from_manifest(out, tmp_path / "b", workers=1)
    assert (again / "aggregate.csv").read_text() == first
    par, _ = run_experiment(cfg, tmp_path / "c", workers=2)
    assert (par / "aggregate.csv").read_text() == first


def test_failed_cell_recorded(tmp_path):
    # a discount of 1.5 is rejected when the Garnet is built inside the worker
    cfg = small_dp_config(seeds=[0], alphas=[0.5],
                          mdp={"n_states": 3, "n_actions": 2, "gamma": 1.5})
    out, failed = run_experiment(cfg, tmp_path / "f", workers=1)
    assert failed == 1
    cell = json.loads((out / "manifest.json").read_text())["cells"][0]
    assert cell["status"] == "failed" and "ParameterError" in cell["error"]


def test_deep_scoring(tmp_path):
    cfg = ExperimentConfig(kind="ablation_suite", seeds=[0], variants=["iq", "trust_pcl"],
                           alphas=[0.9], taus=[0.01], env="point_mass",
                           env_params={"max_episode_steps": 20}, total_steps=40,
                           agent={"hidden": [8, 8], "batch_size": 8, "eval_episodes": 2,
                                  "eval_interval": 20})
    out, failed = run_experiment(cfg, tmp_path / "d", workers=1)
    assert failed == 0
    table = score_runs(out, random_return=-50.0)
    finals = table.final()
    assert finals[("iq", 0.9, 0.01)] == [pytest.approx(1.0)]
    assert table.baseline_label == "iq_a0.9_t0.01"
    write_scores(out, table)
    assert read_rows(out / "scores_aggregate.csv")
    with pytest.raises(ScoringError):
        score_runs(out, random_return=table.baseline_return)


def test_example_configs_load():
    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert {ExperimentConfig.load(p).kind for p in paths} == {
        "dp_equivalence", "error_propagation", "deep_train", "ablation_suite",
        "temperature_sweep"}
