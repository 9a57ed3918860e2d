"""CLI surface: a reduced-scale run of every pipeline stage, artifact
integrity, exit codes, assert expressions, and seed overrides."""

import json
import os

import pytest

from riskgate import cli
from riskgate import estimator as est
from riskgate import policy as pol

from conftest import MICRO_STAGES


def _read(root, name):
    with open(root / name) as f:
        return json.load(f)


def test_all_stages_exit_zero(micro_run):
    for stage in MICRO_STAGES:
        assert micro_run["codes"][stage] == 0, stage
    assert micro_run["codes"]["evaluate-ungated"] == 0
    assert micro_run["codes"]["evaluate-gated"] == 0


def test_pipeline_artifacts(micro_run):
    root = micro_run["root"]
    for name in ("data/risk_H2.jsonl", "data/risk_H3.jsonl", "data/risk_H5.jsonl",
                 "est.json", "est_post.json", "heldout.jsonl", "thresholds.json",
                 "pol.json", "pol_ft.json",
                 "report_ungated.json", "report_gated.json"):
        assert (root / name).exists(), name
    # checkpoints load through the typed loaders
    offline = est.load_params(root / "est.json")
    post = est.load_params(root / "est_post.json")
    assert offline.count() == 6628
    assert not all(
        (offline.weights[k] == post.weights[k]).all() for k in offline.weights)
    pol.load_policy(root / "pol.json")
    pol.load_policy(root / "pol_ft.json")


def test_thresholds_file_feeds_reports(micro_run):
    root = micro_run["root"]
    thr = _read(root, "thresholds.json")
    assert 0.0 < thr["tau_down"] < thr["tau_up"] < 1.0
    assert thr["tau_down"] == pytest.approx(0.5 * thr["tau_up"])
    assert {"fpr", "tpr", "thresholds"} <= set(thr["roc"])
    gated = _read(root, "report_gated.json")
    assert gated["thresholds"]["tau_up"] == thr["tau_up"]
    assert gated["thresholds"]["tau_down"] == thr["tau_down"]


def test_report_shapes(micro_run):
    root = micro_run["root"]
    ungated = _read(root, "report_ungated.json")
    gated = _read(root, "report_gated.json")
    for rep, mode in ((ungated, "ungated"), (gated, "gated")):
        assert rep["mode"] == mode
        assert rep["episodes"] == 12
        for tid in ("crossing_transfer", "parallel_place"):
            block = rep["per_task"][tid]
            assert block["episodes"] == 6
            assert 0.0 <= block["collision_rate"] <= 1.0
            assert 0.0 <= block["success_rate"] <= 1.0
    assert ungated["estimator"] is None
    assert gated["estimator"]["n_scored_steps"] > 0
    assert gated["estimator"]["latency"]["p50_us"] > 0.0
    assert all(b["blocked_fraction"] == 0.0 for b in ungated["per_task"].values())


def test_run_subcommand_and_modes(micro_run):
    root = micro_run["root"]
    cfg = str(micro_run["cfg_path"])
    cwd = os.getcwd()
    try:
        os.chdir(root)
        for mode in ("ungated", "gated", "gated+refine", "gated+finetuned"):
            code = cli.main(["run", "--config", cfg, "--task", "parallel_place",
                             "--index", "0", "--mode", mode])
            assert code == 0, mode
            name = f"ep_{mode.replace('+', '_')}_parallel_place_"
            assert any(p.startswith(name) for p in os.listdir("logs"))
    finally:
        os.chdir(cwd)


def test_report_subcommand_rebuilds_from_logs(micro_run, tmp_path):
    root = micro_run["root"]
    base = json.loads(micro_run["cfg_path"].read_text())
    base["eval"] = dict(base["eval"], logs_dir=str(root / "logs_gated"),
                        report_path=str(tmp_path / "rebuilt.json"))
    # report resolves thresholds and checkpoints relative to the micro root
    base["gate"] = dict(base["gate"], thresholds_path=str(root / "thresholds.json"))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(base))
    assert cli.main(["report", "--config", str(cfg_path)]) == 0
    rebuilt = json.load(open(tmp_path / "rebuilt.json"))
    live = _read(root, "report_gated.json")
    assert rebuilt["per_task"] == live["per_task"]
    assert rebuilt["thresholds"] == live["thresholds"]
    assert rebuilt["estimator"]["auc"] == live["estimator"]["auc"]


def test_exit_code_1_on_config_errors(tmp_path):
    assert cli.main(["gen-data", "--config", str(tmp_path / "nofile.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": {}}))
    assert cli.main(["gen-data", "--config", str(bad)]) == 1
    # roc-tune demands a thresholds path
    cfg = tmp_path / "nothr.json"
    cfg.write_text(json.dumps({"gate": {"thresholds_path": ""}}))
    assert cli.main(["roc-tune", "--config", str(cfg)]) == 1


def test_exit_code_2_on_runtime_errors(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "datagen": {"out_dir": str(tmp_path / "data")},
        "estimator": {"checkpoint_path": str(tmp_path / "missing_est.json"),
                      "heldout_path": str(tmp_path / "missing_held.jsonl")},
    }))
    # no dataset files on disk yet
    assert cli.main(["train-estimator", "--config", str(cfg)]) == 2
    assert cli.main(["calibrate", "--config", str(cfg)]) == 2


def test_evaluate_asserts(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "tasks": {"episodes_per_task": 1},
        "eval": {"mode": "ungated", "logs_dir": str(tmp_path / "logs"),
                 "report_path": str(tmp_path / "rep.json")},
    }))
    ok = cli.main(["evaluate", "--config", str(cfg), "--mode", "ungated",
                   "--assert", "per_task.crossing_transfer.collision_rate<=1.0"])
    assert ok == 0
    failing = cli.main(["evaluate", "--config", str(cfg), "--mode", "ungated",
                        "--assert", "per_task.crossing_transfer.success_rate>=2"])
    assert failing == 3
    missing = cli.main(["evaluate", "--config", str(cfg), "--mode", "ungated",
                        "--assert", "per_task.flying.success_rate>=0"])
    assert missing == 3
    malformed = cli.main(["evaluate", "--config", str(cfg), "--mode", "ungated",
                          "--assert", "episodes==2"])
    assert malformed == 1


def test_seed_override_changes_data(tmp_path):
    for seed, d in ((None, "a"), (123, "b")):
        cfg = tmp_path / f"cfg_{d}.json"
        cfg.write_text(json.dumps({
            "datagen": {"out_dir": str(tmp_path / d), "episodes_per_task": 2,
                        "horizons": [2]},
        }))
        argv = ["gen-data", "--config", str(cfg)]
        if seed is not None:
            argv += ["--seed", str(seed)]
        assert cli.main(argv) == 0
    a = (tmp_path / "a" / "risk_H2.jsonl").read_bytes()
    b = (tmp_path / "b" / "risk_H2.jsonl").read_bytes()
    assert a != b


def test_stdout_is_json(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "tasks": {"episodes_per_task": 1},
        "eval": {"mode": "ungated", "logs_dir": str(tmp_path / "logs"),
                 "report_path": str(tmp_path / "rep.json")},
    }))
    assert cli.main(["run", "--config", str(cfg), "--task", "crossing_transfer",
                     "--index", "0", "--mode", "ungated"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert {"log", "success", "collided", "steps"} <= set(payload)
