"""Shared fixtures: a small generated dataset, a lightly trained risk
estimator, and a micro end-to-end pipeline directory for CLI/harness tests.

Everything is session-scoped and seeded, so the whole suite is
deterministic and the expensive artifacts are built once.
"""

import json
import os

import numpy as np
import pytest

from riskgate import cli
from riskgate import datasetgen as dg
from riskgate import estimator as est
from riskgate import world as wd

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def world_cfg():
    return wd.default_world()


@pytest.fixture(scope="session")
def task_params():
    return wd.TaskParams()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, world_cfg, task_params):
    """Small generated dataset: per-horizon batches plus a held-out batch."""
    out = tmp_path_factory.mktemp("tinydata")
    gen_cfg = dg.DatagenConfig(episodes_per_task=8, horizons=(2, 3), seed=0)
    paths = dg.generate_dataset(gen_cfg, world_cfg, out, task_params)
    rng = np.random.default_rng(np.random.SeedSequence([0, 31]))
    phases, held = [], []
    for h in sorted(paths):
        samples = dg.read_dataset(paths[h]).samples
        order = rng.permutation(len(samples))
        n_held = max(1, len(samples) // 6)
        held.extend(samples[i] for i in order[:n_held])
        phases.append(dg.to_sample_batch([samples[i] for i in order[n_held:]]))
    return {"paths": paths, "phases": phases,
            "heldout": dg.to_sample_batch(held), "gen_cfg": gen_cfg}


@pytest.fixture(scope="session")
def trained_tiny(tiny_data):
    """Estimator trained a few epochs on the tiny dataset, then calibrated."""
    cfg = est.TrainConfig(epochs_per_phase=4, seed=0)
    params = est.train(tiny_data["phases"], cfg)
    est.calibrate_temperature(params, tiny_data["heldout"])
    return params


MICRO_CONFIG = {
    "seed": 0,
    "tasks": {"episodes_per_task": 6},
    "datagen": {"out_dir": "data", "episodes_per_task": 12},
    "estimator": {"checkpoint_path": "est.json", "heldout_path": "heldout.jsonl",
                  "posttrained_path": "est_post.json", "epochs_per_phase": 3},
    "gate": {"thresholds_path": "thresholds.json"},
    "policy": {"checkpoint_path": "pol.json", "finetuned_path": "pol_ft.json",
               "demo_episodes_per_task": 15, "rollout_episodes_per_task": 4,
               "epochs": 100},
    "eval": {"logs_dir": "logs", "report_path": "report.json", "workers": 2},
}

MICRO_STAGES = ("gen-data", "train-estimator", "calibrate", "roc-tune",
                "train-policy", "finetune-policy", "post-train")


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """One reduced-scale pipeline run through the CLI entry point.

    Returns the working directory (all artifact paths in MICRO_CONFIG are
    relative to it) plus the recorded exit code of every stage.
    """
    root = tmp_path_factory.mktemp("micro")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(MICRO_CONFIG))
    cwd = os.getcwd()
    codes = {}
    try:
        os.chdir(root)
        for stage in MICRO_STAGES:
            codes[stage] = cli.main([stage, "--config", str(cfg_path)])
        for mode in ("ungated", "gated"):
            sub = dict(MICRO_CONFIG)
            sub["eval"] = dict(MICRO_CONFIG["eval"],
                               logs_dir=f"logs_{mode}",
                               report_path=f"report_{mode}.json")
            mode_cfg = root / f"cfg_{mode}.json"
            mode_cfg.write_text(json.dumps(sub))
            codes[f"evaluate-{mode}"] = cli.main(
                ["evaluate", "--config", str(mode_cfg), "--mode", mode])
    finally:
        os.chdir(cwd)
    return {"root": root, "codes": codes, "cfg_path": cfg_path}
