"""Command-line entry points for the full pipeline.

Subcommands: gen-data, train-estimator, calibrate, roc-tune, train-policy,
finetune-policy, post-train, run, evaluate, report. Every command takes
--config and an optional --seed override. Exit codes: 0 success, 1 config
error, 2 runtime error, 3 failed --assert threshold in evaluate.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as cf
from . import datasetgen as dg
from . import estimator as est
from . import harness as hn
from . import metrics as mt
from . import policy as pol
from . import world as wd


class AssertFailure(Exception):
    """An evaluate --assert threshold was not met."""


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _phase_paths(cfg: cf.RunConfig) -> dict:
    return {h: os.path.join(cfg.datagen.out_dir, f"risk_H{h}.jsonl")
            for h in cfg.datagen.horizons}


def _cmd_gen_data(cfg: cf.RunConfig, args) -> None:
    paths = dg.generate_dataset(cfg.datagen_config(), cfg.world_config(),
                                cfg.datagen.out_dir, cfg.task_params())
    counts = {}
    for h, p in paths.items():
        ds = dg.read_dataset(p)
        counts[str(h)] = ds.header.counts
    _emit({"files": {str(h): p for h, p in paths.items()}, "counts": counts})


def _split_phases(cfg: cf.RunConfig):
    """Per-phase train/held-out batches from the generated files."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31]))
    train_phases, held_samples = [], []
    for h, path in sorted(_phase_paths(cfg).items()):
        ds = dg.read_dataset(path)
        n = len(ds.samples)
        order = rng.permutation(n)
        n_held = max(1, int(round(cfg.estimator.heldout_frac * n)))
        held_idx = set(order[:n_held].tolist())
        held_samples.extend(ds.samples[i] for i in sorted(held_idx))
        train = [ds.samples[i] for i in order[n_held:]]
        train_phases.append(dg.to_sample_batch(train))
    return train_phases, held_samples


def _write_heldout(cfg: cf.RunConfig, held_samples) -> None:
    horizons = sorted({s.H for s in held_samples})
    header = dg._make_header(horizons, held_samples, cfg.seed,
                             dg.config_digest(cfg.datagen_config()))
    dg.write_dataset(cfg.estimator.heldout_path,
                     dg.Dataset(header=header, samples=held_samples))


def _load_heldout(cfg: cf.RunConfig) -> est.SampleBatch:
    ds = dg.read_dataset(cfg.estimator.heldout_path)
    return dg.to_sample_batch(ds.samples)


def _cmd_train_estimator(cfg: cf.RunConfig, args) -> None:
    train_phases, held_samples = _split_phases(cfg)
    params = est.train(train_phases, cfg.estimator_train_config())
    est.save_params(params, cfg.estimator.checkpoint_path,
                    config_digest=dg.config_digest(cfg.datagen_config()))
    _write_heldout(cfg, held_samples)
    held = dg.to_sample_batch(held_samples)
    risks = mt.calibrated_risks(params, held)
    _emit({
        "checkpoint": cfg.estimator.checkpoint_path,
        "heldout": cfg.estimator.heldout_path,
        "train_samples": int(sum(len(b) for b in train_phases)),
        "heldout_samples": len(held),
        "heldout_auc": mt.auc_trapezoid(risks, held.y_bin),
        "param_count": params.count(),
    })


def _cmd_calibrate(cfg: cf.RunConfig, args) -> None:
    params = est.load_params(cfg.estimator.checkpoint_path)
    held = _load_heldout(cfg)
    nll_before = est.heldout_nll(params, held, 1.0)
    ece_before = mt.compute_calibration(
        mt.calibrated_risks(est.EstimatorParams(params.weights, 1.0, params.d_model,
                                                params.ttc_cap), held),
        held.y_bin).ece
    temperature = est.calibrate_temperature(params, held)
    est.save_params(params, cfg.estimator.checkpoint_path)
    risks = mt.calibrated_risks(params, held)
    _emit({
        "temperature": temperature,
        "nll_t1": nll_before,
        "nll_calibrated": est.heldout_nll(params, held, temperature),
        "ece_before": ece_before,
        "ece_after": mt.compute_calibration(risks, held.y_bin).ece,
    })


def _cmd_roc_tune(cfg: cf.RunConfig, args) -> None:
    if not cfg.gate.thresholds_path:
        raise cf.ConfigError("gate.thresholds_path must be set for roc-tune")
    params = est.load_params(cfg.estimator.checkpoint_path)
    held = _load_heldout(cfg)
    res = mt.roc_tune(params, held, cfg.gate.fn_target)
    payload = {
        "tau_up": res.tau_up, "tau_down": res.tau_down, "auc": res.auc,
        "fn_target": cfg.gate.fn_target, "fnr_at_tau": res.fnr_at_tau,
        "roc": {
            "fpr": res.fpr.tolist(), "tpr": res.tpr.tolist(),
            "thresholds": [t if np.isfinite(t) else None
                           for t in res.thresholds.tolist()],
        },
    }
    with open(cfg.gate.thresholds_path, "w") as f:
        json.dump(payload, f)
        f.write("\n")
    _emit({k: payload[k] for k in ("tau_up", "tau_down", "auc", "fnr_at_tau")})


def _demo_seeds(cfg: cf.RunConfig, task_id: str):
    tidx = wd._task_index(task_id)
    return [int(np.random.SeedSequence([cfg.seed, tidx, i, 301]).generate_state(1)[0])
            for i in range(cfg.policy.demo_episodes_per_task)]


def _collect_all_demos(cfg: cf.RunConfig):
    world_cfg = cfg.world_config()
    task_params = cfg.task_params()
    demos = []
    for tid in cfg.tasks.ids:
        demos.extend(pol.collect_demonstrations(
            tid, _demo_seeds(cfg, tid), cfg.eval.H, world_cfg, task_params,
            explore_noise=cfg.policy.explore_noise))
    return demos


def _cmd_train_policy(cfg: cf.RunConfig, args) -> None:
    demos = _collect_all_demos(cfg)
    params = pol.bc_train(pol.init_policy(cfg.seed, cfg.world.a_max), demos,
                          cfg.policy_train_config())
    pol.save_policy(params, cfg.policy.checkpoint_path)
    _emit({"checkpoint": cfg.policy.checkpoint_path, "demonstrations": len(demos)})


def _cmd_finetune_policy(cfg: cf.RunConfig, args) -> None:
    demos = _collect_all_demos(cfg)
    est_params = est.load_params(cfg.estimator.checkpoint_path)
    gate_cfg = hn.resolve_gate_config(cfg)
    params = pol.load_policy(cfg.policy.checkpoint_path)
    # Aggregation pass: roll the cloned policy under the gate so blocked
    # steps contribute the recovery action as a corrected cloning target.
    setup = replace(hn.prepare_setup(cfg, "gated"), policy_params=params)
    records = []
    for tid in cfg.tasks.ids:
        for i in range(cfg.policy.rollout_episodes_per_task):
            seed = hn._episode_seed(cfg.seed, tid, i, tag=401)
            hn.run_episode(setup, tid, seed, collector=records)
    buffer = pol.aggregate_buffer(pol.AggBuffer(), records)
    d_safe = pol.safety_filter_dataset(demos + buffer.records, est_params,
                                       gate_cfg.tau_down)
    tuned = pol.risk_weighted_finetune(params, d_safe, cfg.policy_train_config(),
                                       kappa=cfg.policy.kappa)
    pol.save_policy(tuned, cfg.policy.finetuned_path)
    _emit({"checkpoint": cfg.policy.finetuned_path, "kept": len(d_safe),
           "demos": len(demos), "rollout_records": len(buffer.records),
           "corrected": sum(r.corrected for r in buffer.records),
           "tau_down": gate_cfg.tau_down})


def _cmd_post_train(cfg: cf.RunConfig, args) -> None:
    setup = hn.prepare_setup(cfg, "gated")
    if os.path.exists(cfg.policy.checkpoint_path):
        setup = replace(setup, policy_params=pol.load_policy(cfg.policy.checkpoint_path))
    records = []
    for tid in cfg.tasks.ids:
        for i in range(cfg.tasks.episodes_per_task):
            seed = hn._episode_seed(cfg.seed, tid, i, tag=501)
            hn.run_episode(setup, tid, seed, collector=records)
    buffer = pol.aggregate_buffer(pol.AggBuffer(), records)
    params = pol.post_train_estimator(setup.est_params, buffer,
                                      cfg.estimator_train_config())
    out = cfg.estimator.posttrained_path or cfg.estimator.checkpoint_path
    est.save_params(params, out)
    _emit({"checkpoint": out, "buffer_records": len(buffer),
           "temperature": params.temperature})


def _cmd_run(cfg: cf.RunConfig, args) -> None:
    setup = hn.prepare_setup(cfg, args.mode)
    seed = hn._episode_seed(cfg.seed, args.task, args.index)
    log = hn.run_episode(setup, args.task, seed)
    os.makedirs(cfg.eval.logs_dir, exist_ok=True)
    name = f"ep_{log.mode.replace('+', '_')}_{log.task_id}_{log.seed}.jsonl"
    path = os.path.join(cfg.eval.logs_dir, name)
    hn.write_episode_log(log, path)
    _emit({"log": path, "success": log.success, "collided": log.collided,
           "steps": log.n_steps, "blocked_steps": log.blocked_steps,
           "recoveries": log.recoveries})


def _resolve_metric(report: dict, dotted: str):
    cur = report
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise AssertFailure(f"unknown metric path {dotted!r}")
        cur = cur[part]
    if not isinstance(cur, (int, float)) or isinstance(cur, bool):
        raise AssertFailure(f"metric {dotted!r} is not a number")
    return float(cur)


def _check_asserts(report: dict, exprs) -> list:
    """Each expr is '<dotted.path><=value>' or with '>='. Returns failures."""
    failures = []
    for expr in exprs:
        if "<=" in expr:
            path, _, raw = expr.partition("<=")
            ok = _resolve_metric(report, path.strip()) <= float(raw)
        elif ">=" in expr:
            path, _, raw = expr.partition(">=")
            ok = _resolve_metric(report, path.strip()) >= float(raw)
        else:
            raise cf.ConfigError(f"assert must use <= or >=: {expr!r}")
        if not ok:
            failures.append(expr)
    return failures


def _cmd_evaluate(cfg: cf.RunConfig, args) -> None:
    report = hn.evaluate(cfg, args.mode)
    payload = report.to_dict()
    _emit(payload)
    if args.assert_exprs:
        failures = _check_asserts(payload, args.assert_exprs)
        if failures:
            raise AssertFailure("; ".join(failures))


def _cmd_report(cfg: cf.RunConfig, args) -> None:
    report = hn.report_from_logs(cfg)
    payload = report.to_dict()
    with open(cfg.eval.report_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _emit(payload)


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-estimator": _cmd_train_estimator,
    "calibrate": _cmd_calibrate,
    "roc-tune": _cmd_roc_tune,
    "train-policy": _cmd_train_policy,
    "finetune-policy": _cmd_finetune_policy,
    "post-train": _cmd_post_train,
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskgate",
                                     description="Dual-arm collision-risk gating pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name in ("run", "evaluate"):
            p.add_argument("--mode", default=None, choices=cf.MODES)
        if name == "run":
            p.add_argument("--task", required=True, choices=wd.TASK_IDS)
            p.add_argument("--index", type=int, default=0,
                           help="episode index within the seed grid")
        if name == "evaluate":
            p.add_argument("--assert", dest="assert_exprs", action="append",
                           default=[], metavar="PATH<=VALUE",
                           help="threshold check on a report metric; exit 3 on failure")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = cf.load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        _COMMANDS[args.command](cfg, args)
    except cf.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except AssertFailure as e:
        print(f"assertion failed: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # runtime failures map to a distinct code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
