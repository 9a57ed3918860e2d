"""Stand-in policies and their training loops.

A deterministic scripted expert emits short-horizon plans by simulating a
proportional task-space law (goal-seeking, collision-blind). A small MLP
policy clones it, optionally with per-sample risk weights on a
safety-filtered dataset. A FIFO aggregation buffer collects gated-rollout
records for estimator post-training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import estimator as est
from . import world as wd

K_P = 0.5  # proportional gain of the scripted expert

POLICY_IN = est.PROPRIO_DIM + est.VISION_DIM + 4  # proprio + scene + goals
POLICY_HIDDEN = 32
POLICY_OUT = 4


def _expert_action_row(state: wd.DualArmState, task: wd.Task, a_max: float) -> np.ndarray:
    dx_l = np.clip(K_P * (task.goal_left - state.ee_left), -a_max, a_max)
    dx_r = np.clip(K_P * (task.goal_right - state.ee_right), -a_max, a_max)
    return np.concatenate([dx_l, dx_r])


def scripted_expert(state: wd.DualArmState, task: wd.Task, horizon: int,
                    cfg: wd.WorldConfig) -> wd.PlanSequence:
    """H-step plan from a proportional law dx = clip(k_p (goal - ee), box).

    The expert rolls its own kinematic prediction forward, so later actions
    react to where the earlier ones will have moved each arm. Deliberately
    blind to the other arm: this is the unsafe baseline.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    steps = np.empty((horizon, 4))
    cur = state
    for i in range(horizon):
        row = _expert_action_row(cur, task, cfg.a_max)
        steps[i] = row
        cur = wd.step(cur, wd.DualAction.from_row(row), cfg)
    return wd.PlanSequence(steps)


@dataclass
class PolicyParams:
    """Two-layer MLP, 28 -> 32 tanh -> 4, output squashed by a_max * tanh."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    a_max: float = 0.02

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                            self.b2.copy(), self.a_max)

    def weight_items(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def init_policy(seed: int = 0, a_max: float = 0.02) -> PolicyParams:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    lim1 = np.sqrt(6.0 / (POLICY_IN + POLICY_HIDDEN))
    lim2 = np.sqrt(6.0 / (POLICY_HIDDEN + POLICY_OUT))
    return PolicyParams(
        w1=rng.uniform(-lim1, lim1, size=(POLICY_IN, POLICY_HIDDEN)),
        b1=np.zeros(POLICY_HIDDEN),
        w2=rng.uniform(-lim2, lim2, size=(POLICY_HIDDEN, POLICY_OUT)),
        b2=np.zeros(POLICY_OUT),
        a_max=a_max,
    )


def _policy_forward_batch(params: PolicyParams, x: np.ndarray):
    h = np.tanh(x @ params.w1 + params.b1)
    u = h @ params.w2 + params.b2
    out = params.a_max * np.tanh(u)
    return out, h, u


def policy_features(proprio, z, goals) -> np.ndarray:
    return np.concatenate([np.asarray(proprio, dtype=float),
                           np.asarray(z, dtype=float),
                           np.asarray(goals, dtype=float)])


def policy_forward(params: PolicyParams, proprio, z, goals) -> wd.DualAction:
    """Deterministic action; the tanh squash keeps it inside the a_max box."""
    x = policy_features(proprio, z, goals)[None, :]
    out, _, _ = _policy_forward_batch(params, x)
    return wd.DualAction.from_row(out[0])


def policy_plan(params: PolicyParams, state: wd.DualArmState, task: wd.Task,
                cfg: wd.WorldConfig, horizon: int) -> wd.PlanSequence:
    """The policy's own H-step plan, rolled forward kinematically.

    Noise-free scene features: this is the policy's internal prediction,
    not a sensor pass.
    """
    goals = np.concatenate([task.goal_left, task.goal_right])
    steps = np.empty((horizon, 4))
    cur = state
    for i in range(horizon):
        action = policy_forward(params, wd.proprio_feature(cur),
                                wd.scene_feature(cur, task), goals)
        steps[i] = action.as_row()
        cur = wd.step(cur, action, cfg)
    return wd.PlanSequence(steps)


@dataclass(frozen=True)
class DemoRecord:
    """One state on an expert (or gated) rollout with its oracle plan label.

    risk is the estimator's score of the stored plan, 0 until a filter or
    collection pass fills it in; corrected marks actions supplied by the
    recovery controller rather than the expert.
    """

    proprio: np.ndarray
    z: np.ndarray
    goals: np.ndarray
    action: np.ndarray
    plan: np.ndarray
    y_bin: int
    y_d: float
    y_ttc: float
    risk: float = 0.0
    corrected: bool = False


@dataclass
class PolicyTrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0


def collect_demonstrations(task_id: str, seeds, horizon: int, cfg: wd.WorldConfig,
                           params: wd.TaskParams = wd.TaskParams(),
                           explore_noise: float = 0.005) -> list:
    """Expert rollouts over the given seeds, one record per visited state.

    The executed action adds small exploration noise (clipped to the box)
    while the recorded action and plan stay the expert's own, so cloning
    sees corrective labels on off-trajectory states and stays stable in
    closed loop. Episodes stop at success, collision, or the step budget.
    Oracle labels come from simulating each stored plan from its own state.
    """
    records = []
    for seed in seeds:
        state, task = wd.task_init(task_id, seed, cfg, params)
        rng = np.random.default_rng(np.random.SeedSequence(
            [wd._task_index(task_id), int(seed), 29]))
        goals = np.concatenate([task.goal_left, task.goal_right])
        for _ in range(task.max_steps):
            plan = scripted_expert(state, task, horizon, cfg)
            outcome = wd.rollout(state, plan, cfg)
            records.append(DemoRecord(
                proprio=wd.proprio_feature(state),
                z=wd.scene_feature(state, task, cfg.noise_sigma, rng),
                goals=goals.copy(),
                action=plan.steps[0].copy(),
                plan=plan.steps.copy(),
                y_bin=outcome.y_bin, y_d=outcome.y_d, y_ttc=outcome.y_ttc,
            ))
            executed = plan.steps[0]
            if explore_noise > 0:
                executed = np.clip(executed + rng.normal(0.0, explore_noise, size=4),
                                   -cfg.a_max, cfg.a_max)
            state = wd.step(state, wd.DualAction.from_row(executed), cfg)
            if wd.min_self_distance(state, cfg) < 0.0:
                break
            if wd.success_check(state, task):
                break
    return records


def _demo_arrays(demos):
    x = np.array([policy_features(d.proprio, d.z, d.goals) for d in demos])
    y = np.array([d.action for d in demos], dtype=float)
    return x, y


def _fit_mlp(params: PolicyParams, x, y, weights, cfg: PolicyTrainConfig) -> PolicyParams:
    """Weighted squared-error SGD with momentum; exact analytic gradients.

    The error is measured in box-normalized units (divided by a_max), which
    leaves the minimizer unchanged but keeps gradient magnitudes independent
    of the physical action scale.
    """
    params = params.copy()
    n = x.shape[0]
    scale = 1.0 / params.a_max ** 2
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 17]))
    vel = {name: np.zeros_like(arr) for name, arr in params.weight_items()}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            xb, yb, wb = x[idx], y[idx], weights[idx]
            out, h, u = _policy_forward_batch(params, xb)
            err = out - yb
            loss = float(np.mean(wb * np.sum(err * err, axis=1))) * scale
            if not np.isfinite(loss):
                raise RuntimeError(f"policy training diverged: loss={loss}")
            g_out = scale * 2.0 * wb[:, None] * err / len(idx)
            g_u = g_out * params.a_max * (1.0 - np.tanh(u) ** 2)
            grads = {
                "w2": h.T @ g_u, "b2": g_u.sum(axis=0),
            }
            g_h = g_u @ params.w2.T
            g_pre = g_h * (1.0 - h ** 2)
            grads["w1"] = xb.T @ g_pre
            grads["b1"] = g_pre.sum(axis=0)
            for name, arr in params.weight_items():
                vel[name] = cfg.momentum * vel[name] - cfg.lr * grads[name]
                arr += vel[name]
    return params


def bc_train(params: PolicyParams, demonstrations, cfg: PolicyTrainConfig) -> PolicyParams:
    """Plain behavior cloning: unit-weight squared error against the expert."""
    if not demonstrations:
        raise ValueError("no demonstrations")
    x, y = _demo_arrays(demonstrations)
    return _fit_mlp(params, x, y, np.ones(len(demonstrations)), cfg)


def safety_filter_dataset(demonstrations, est_params: est.EstimatorParams,
                          tau_down: float) -> list:
    """Keep records whose stored plan the estimator scores at or below tau_down.

    Returns new records with the risk field frozen to the score used for
    the decision. Raises if nothing survives (threshold too strict).
    """
    if not demonstrations:
        raise ValueError("no demonstrations")
    batch = est.stack_batch([
        {"proprio": d.proprio, "z": d.z, "plan": d.plan,
         "y_bin": d.y_bin, "y_d": d.y_d, "y_ttc": d.y_ttc}
        for d in demonstrations
    ])
    logit, _, _, _ = est._forward_batch(est_params, batch.proprio, batch.z,
                                        batch.plan, batch.mask)
    risk = est._sigmoid(logit / est_params.temperature)
    kept = [replace(d, risk=float(r)) for d, r in zip(demonstrations, risk)
            if r <= tau_down]
    if not kept:
        raise ValueError("safety filter removed every record; tau_down too strict")
    return kept


def risk_weighted_finetune(params: PolicyParams, d_safe, cfg: PolicyTrainConfig,
                           kappa: float = 5.0) -> PolicyParams:
    """Cloning with per-sample weight exp(-kappa * risk).

    Risks are the ones frozen on the records at filter time, so the
    objective is a fixed weighted regression, deterministic given the seed.
    """
    if not d_safe:
        raise ValueError("empty fine-tuning dataset")
    x, y = _demo_arrays(d_safe)
    weights = np.exp(-kappa * np.array([d.risk for d in d_safe], dtype=float))
    return _fit_mlp(params, x, y, weights, cfg)


@dataclass
class AggBuffer:
    """FIFO record buffer; eviction keeps the newest records in order."""

    capacity: int = 50_000
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.records)


def aggregate_buffer(buffer: AggBuffer, new_records) -> AggBuffer:
    """Append gated-rollout records, FIFO-evicting past capacity."""
    buffer.records.extend(new_records)
    overflow = len(buffer.records) - buffer.capacity
    if overflow > 0:
        del buffer.records[:overflow]
    return buffer


def post_train_estimator(est_params: est.EstimatorParams, buffer: AggBuffer,
                         cfg: est.TrainConfig, heldout_frac: float = 0.2) -> est.EstimatorParams:
    """Continue estimator training on buffer records, then recalibrate.

    A fresh held-out split (seeded shuffle) backs the temperature fit, so
    the calibration NLL can only match or improve on T = 1.
    """
    if len(buffer) == 0:
        raise ValueError("empty aggregation buffer")
    batch = est.stack_batch([
        {"proprio": d.proprio, "z": d.z, "plan": d.plan,
         "y_bin": d.y_bin, "y_d": d.y_d, "y_ttc": d.y_ttc}
        for d in buffer.records
    ])
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 19]))
    order = rng.permutation(len(batch))
    n_held = max(1, int(round(heldout_frac * len(batch))))
    heldout = batch.take(order[:n_held])
    train_part = batch.take(order[n_held:])
    params = est.train([train_part], cfg, params=est_params)
    est.calibrate_temperature(params, heldout)
    return params


POLICY_CHECKPOINT_KIND = "policy"


def save_policy(params: PolicyParams, path, config_digest: str = "") -> None:
    payload = {
        "format_version": est.CHECKPOINT_VERSION,
        "kind": POLICY_CHECKPOINT_KIND,
        "dims": {"input": POLICY_IN, "hidden": POLICY_HIDDEN, "output": POLICY_OUT},
        "shapes": {name: list(arr.shape) for name, arr in params.weight_items()},
        "weights": {name: arr.ravel().tolist() for name, arr in params.weight_items()},
        "a_max": params.a_max,
        "config_digest": config_digest,
    }
    with open(path, "w") as f:
        json.dump(payload, f)
        f.write("\n")


def load_policy(path) -> PolicyParams:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != est.CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("kind") != POLICY_CHECKPOINT_KIND:
        raise ValueError(f"not a policy checkpoint: kind={payload.get('kind')!r}")
    arrs = {
        name: np.array(payload["weights"][name], dtype=float).reshape(payload["shapes"][name])
        for name in payload["weights"]
    }
    return PolicyParams(w1=arrs["w1"], b1=arrs["b1"], w2=arrs["w2"], b2=arrs["b2"],
                        a_max=float(payload["a_max"]))
