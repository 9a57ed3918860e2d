"""Strict sectioned JSON configuration for the pipeline CLI.

One document with sections world, tasks, datagen, estimator, gate, policy,
eval. Unknown sections or keys are errors; missing keys fall back to the
defaults baked into the corresponding dataclasses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from . import datasetgen as dg
from . import estimator as est
from . import policy as pol
from . import safeguard as sg
from . import world as wd

MODES = ("ungated", "gated", "gated+refine", "gated+finetuned")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


@dataclass
class WorldSection:
    a_max: float = 0.02
    dt: float = 0.1
    mu: float = 0.05
    inflation: float = 0.0
    grasp_length: float = 0.10
    grasp_radius: float = 0.02
    include_intra_arm: bool = False
    noise_sigma: float = 0.005


@dataclass
class TasksSection:
    ids: list = field(default_factory=lambda: list(wd.TASK_IDS))
    episodes_per_task: int = 100
    goal_jitter: float = 0.03
    start_q_jitter: float = 0.1
    min_start_clearance: float = 0.05
    success_tolerance: float = 0.02
    max_steps: int = 300
    max_reset_draws: int = 100


@dataclass
class DatagenSection:
    out_dir: str = "data"
    episodes_per_task: int = 200
    n_candidates: int = 8
    sigma_a: float = 0.01
    horizons: list = field(default_factory=lambda: [2, 3, 5])
    d_thresh: float = 0.05
    oversample_factor: int = 3


@dataclass
class EstimatorSection:
    checkpoint_path: str = "estimator.json"
    posttrained_path: str = ""   # empty: post-train overwrites checkpoint_path
    heldout_path: str = "heldout.jsonl"
    heldout_frac: float = 0.15
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    epochs_per_phase: int = 10
    lambda_bce: float = 1.0
    lambda_d: float = 1.0
    lambda_ttc: float = 0.5
    w_pos: float = 3.0
    gamma_early: float = 0.5


@dataclass
class GateSection:
    tau_up: float = 0.7
    tau_down: float = 0.35
    k_resume: int = 3
    r_sat: float = 0.99
    watchdog_window: int = 50
    d0: float = 0.02
    thresholds_path: str = ""    # roc-tune output; evaluate reads it if set
    fn_target: float = 0.05
    lambda_reg: float = 0.1
    eta: float = 0.05
    max_iters: int = 10
    max_halvings: int = 5
    alpha: float = 1.0
    beta: float = 2.0


@dataclass
class PolicySection:
    checkpoint_path: str = "policy.json"
    finetuned_path: str = "policy_finetuned.json"
    demo_episodes_per_task: int = 100
    explore_noise: float = 0.01
    rollout_episodes_per_task: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 300
    kappa: float = 5.0


@dataclass
class EvalSection:
    mode: str = "gated"
    H: int = 5
    n_candidates: int = 8
    sigma_a: float = 0.01
    soft_gate: bool = True
    logs_dir: str = "logs"
    report_path: str = "report.json"
    workers: int = 1
    latency_trials: int = 1000
    latency_warmup: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldSection = field(default_factory=WorldSection)
    tasks: TasksSection = field(default_factory=TasksSection)
    datagen: DatagenSection = field(default_factory=DatagenSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    gate: GateSection = field(default_factory=GateSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)

    def world_config(self) -> wd.WorldConfig:
        w = self.world
        return wd.default_world(
            a_max=w.a_max, dt=w.dt, mu=w.mu, inflation=w.inflation,
            grasp_length=w.grasp_length, grasp_radius=w.grasp_radius,
            include_intra_arm=w.include_intra_arm, noise_sigma=w.noise_sigma)

    def task_params(self) -> wd.TaskParams:
        t = self.tasks
        return wd.TaskParams(
            goal_jitter=t.goal_jitter, start_q_jitter=t.start_q_jitter,
            min_start_clearance=t.min_start_clearance,
            success_tolerance=t.success_tolerance, max_steps=t.max_steps,
            max_reset_draws=t.max_reset_draws)

    def datagen_config(self) -> dg.DatagenConfig:
        d = self.datagen
        return dg.DatagenConfig(
            tasks=tuple(self.tasks.ids), episodes_per_task=d.episodes_per_task,
            n_candidates=d.n_candidates, sigma_a=d.sigma_a,
            horizons=tuple(d.horizons), d_thresh=d.d_thresh,
            oversample_factor=d.oversample_factor, seed=self.seed)

    def gate_config(self) -> sg.GateConfig:
        g = self.gate
        return sg.GateConfig(
            tau_up=g.tau_up, tau_down=g.tau_down, k_resume=g.k_resume,
            r_sat=g.r_sat, watchdog_window=g.watchdog_window, d0=g.d0,
            a_max=self.world.a_max)

    def estimator_train_config(self) -> est.TrainConfig:
        e = self.estimator
        return est.TrainConfig(
            lr=e.lr, momentum=e.momentum, batch_size=e.batch_size,
            epochs_per_phase=e.epochs_per_phase, lambda_bce=e.lambda_bce,
            lambda_d=e.lambda_d, lambda_ttc=e.lambda_ttc, w_pos=e.w_pos,
            gamma_early=e.gamma_early, seed=self.seed)

    def policy_train_config(self) -> pol.PolicyTrainConfig:
        p = self.policy
        return pol.PolicyTrainConfig(lr=p.lr, momentum=p.momentum,
                                     batch_size=p.batch_size, epochs=p.epochs,
                                     seed=self.seed)


_SECTIONS = {
    "world": WorldSection, "tasks": TasksSection, "datagen": DatagenSection,
    "estimator": EstimatorSection, "gate": GateSection, "policy": PolicySection,
    "eval": EvalSection,
}


def _build_section(cls, obj, name):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        default = allowed[key].default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
                raise ConfigError(f"{name}.{key} must be an integer")
            value = int(value)
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}.{key} must be a string")
        elif key in ("ids", "horizons"):
            if not isinstance(value, list):
                raise ConfigError(f"{name}.{key} must be a list")
        kwargs[key] = value
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.eval.mode not in MODES:
        raise ConfigError(f"eval.mode must be one of {MODES}, got {cfg.eval.mode!r}")
    if not (1 <= cfg.eval.H <= 10):
        raise ConfigError("eval.H must lie in [1, 10]")
    for h in cfg.datagen.horizons:
        if not (1 <= int(h) <= 10):
            raise ConfigError("datagen.horizons entries must lie in [1, 10]")
    for tid in cfg.tasks.ids:
        if tid not in wd.TASK_IDS:
            raise ConfigError(f"unknown task id {tid!r}; expected one of {wd.TASK_IDS}")
    if cfg.eval.n_candidates < 1:
        raise ConfigError("eval.n_candidates must be >= 1")
    if not (0.0 < cfg.estimator.heldout_frac < 1.0):
        raise ConfigError("estimator.heldout_frac must lie in (0, 1)")
    try:
        cfg.gate_config()
        cfg.datagen_config()
        cfg.estimator_train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    unknown = set(obj) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = obj.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    kwargs = {"seed": seed}
    for name, cls in _SECTIONS.items():
        if name in obj:
            kwargs[name] = _build_section(cls, obj[name], name)
    return _validate(RunConfig(**kwargs))


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            obj = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(obj)
