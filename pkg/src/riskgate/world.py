"""Dual-arm simulated world: state, stepping, self-collision distance, tasks.

The same rollout machinery serves as the labeling oracle for the risk
network and as the execution environment for the control loop, so every
function here is deterministic given its inputs (plus an explicit rng where
noise is part of the contract). States are value-like: `step` returns a new
state and never mutates its argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ArmModel, default_arm, dls_ik_step, joint_origins, segment_pairs_distance

TASK_IDS = ("crossing_transfer", "parallel_place")


@dataclass(frozen=True)
class WorldConfig:
    """Arm geometry plus the handful of scalars that define the dynamics."""

    arm_left: ArmModel
    arm_right: ArmModel
    a_max: float = 0.02          # per-component EE increment bound, m/step
    dt: float = 0.1              # control period, s (10 Hz)
    mu: float = 0.05             # DLS damping, m
    inflation: float = 0.0       # capsule inflation for distance queries, m
    grasp_length: float = 0.10   # grasped-object capsule axis length, m
    grasp_radius: float = 0.02
    include_intra_arm: bool = False
    noise_sigma: float = 0.005   # scene feature position noise, m

    @property
    def dof(self) -> int:
        return self.arm_left.dof + self.arm_right.dof


def default_world(**overrides) -> WorldConfig:
    return WorldConfig(
        arm_left=default_arm(base_position=(-0.25, 0.0), base_orientation=np.pi / 2),
        arm_right=default_arm(base_position=(0.25, 0.0), base_orientation=np.pi / 2),
        **overrides,
    )


@dataclass(frozen=True)
class DualArmState:
    """Joint state of both arms with cached forward kinematics.

    The cached EE poses and link segments always equal the forward
    kinematics of q_left/q_right; use `make_state` (or `step`) so the caches
    are rebuilt on every change.
    """

    q_left: np.ndarray
    q_right: np.ndarray
    g_left: float
    g_right: float
    holding_left: bool
    holding_right: bool
    t: int
    ee_left: np.ndarray
    ee_right: np.ndarray
    heading_left: float
    heading_right: float
    segs_left: np.ndarray   # (n, 2, 2)
    segs_right: np.ndarray


def make_state(
    cfg: WorldConfig,
    q_left,
    q_right,
    g_left: float = 0.0,
    g_right: float = 0.0,
    holding_left: bool = False,
    holding_right: bool = False,
    t: int = 0,
) -> DualArmState:
    """Build a state with fresh kinematic caches (joint limits enforced)."""
    q_left = np.asarray(q_left, dtype=float)
    q_right = np.asarray(q_right, dtype=float)
    from .geometry import forward_kinematics

    segs_l, ee_l, head_l = forward_kinematics(cfg.arm_left, q_left)
    segs_r, ee_r, head_r = forward_kinematics(cfg.arm_right, q_right)
    return DualArmState(
        q_left=q_left, q_right=q_right,
        g_left=float(g_left), g_right=float(g_right),
        holding_left=holding_left, holding_right=holding_right,
        t=t,
        ee_left=ee_l, ee_right=ee_r,
        heading_left=head_l, heading_right=head_r,
        segs_left=segs_l, segs_right=segs_r,
    )


@dataclass(frozen=True)
class DualAction:
    """Cartesian EE increments for both arms, each within the a_max box."""

    dx_left: np.ndarray
    dx_right: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dx_left", np.asarray(self.dx_left, dtype=float))
        object.__setattr__(self, "dx_right", np.asarray(self.dx_right, dtype=float))

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.dx_left, self.dx_right])

    @staticmethod
    def from_row(row) -> "DualAction":
        row = np.asarray(row, dtype=float)
        return DualAction(dx_left=row[:2], dx_right=row[2:4])


@dataclass(frozen=True)
class PlanSequence:
    """H-step dual-arm action plan, stored as an (H, 4) row matrix.

    Row layout is [dxL, dyL, dxR, dyR]; `actions` views the rows as
    DualAction objects.
    """

    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=float)
        if steps.ndim != 2 or steps.shape[1] != 4 or steps.shape[0] < 1:
            raise ValueError(f"plan must be (H, 4) with H >= 1, got {steps.shape}")
        object.__setattr__(self, "steps", steps)

    @property
    def horizon(self) -> int:
        return self.steps.shape[0]

    @property
    def actions(self) -> list[DualAction]:
        return [DualAction.from_row(r) for r in self.steps]

    def action(self, i: int) -> DualAction:
        return DualAction.from_row(self.steps[i])

    @staticmethod
    def zeros(horizon: int) -> "PlanSequence":
        return PlanSequence(np.zeros((horizon, 4)))

    def within_box(self, a_max: float, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.steps) <= a_max + tol))


@dataclass(frozen=True)
class Task:
    id: str
    goal_left: np.ndarray
    goal_right: np.ndarray
    start_q_left: np.ndarray
    start_q_right: np.ndarray
    success_tolerance: float = 0.02
    max_steps: int = 300


@dataclass(frozen=True)
class RolloutOutcome:
    """Horizon labels plus the trajectory that produced them.

    y_bin is 1 iff some step penetrated (d_min < 0); y_d is the minimum
    clearance seen over the executed steps; y_ttc is the first collision
    time (1-based step index times dt), censored at H*dt when collision-free.
    """

    y_bin: int
    y_d: float
    y_ttc: float
    states: list[DualArmState]


def _capsule_arrays(state: DualArmState, cfg: WorldConfig):
    """Per-arm capsule segment/radius arrays, grasped object appended."""

    def one_side(segs, radii, holding, ee, heading):
        if not holding:
            return segs, radii
        tip = ee + cfg.grasp_length * np.array([np.cos(heading), np.sin(heading)])
        grasp = np.stack([ee, tip])[None]
        return np.concatenate([segs, grasp]), np.append(radii, cfg.grasp_radius)

    segs_l, rad_l = one_side(state.segs_left, cfg.arm_left.link_radii,
                             state.holding_left, state.ee_left, state.heading_left)
    segs_r, rad_r = one_side(state.segs_right, cfg.arm_right.link_radii,
                             state.holding_right, state.ee_right, state.heading_right)
    return segs_l, rad_l, segs_r, rad_r


def min_self_distance(state: DualArmState, cfg: WorldConfig, inflation: float | None = None) -> float:
    """Minimum inflated capsule clearance over all cross-arm pairs.

    Pairs are every left capsule against every right capsule, where each
    side's capsules are its links plus (when holding) the grasped-object
    capsule extending from the EE along the EE heading. Intra-arm pairs
    between non-adjacent links of one arm join the enumeration only when
    cfg.include_intra_arm is set.
    """
    if inflation is None:
        inflation = cfg.inflation
    segs_l, rad_l, segs_r, rad_r = _capsule_arrays(state, cfg)
    nl, nr = len(segs_l), len(segs_r)
    il, ir = np.repeat(np.arange(nl), nr), np.tile(np.arange(nr), nl)
    dists = segment_pairs_distance(
        segs_l[il, 0], segs_l[il, 1], segs_r[ir, 0], segs_r[ir, 1]
    ) - (rad_l[il] + rad_r[ir] + 2.0 * inflation)
    best = float(np.min(dists))

    if cfg.include_intra_arm:
        for segs, rad in ((segs_l, rad_l), (segs_r, rad_r)):
            n = len(segs)
            ii, jj = np.triu_indices(n, k=2)  # skip adjacent links (shared joint)
            if len(ii):
                d = segment_pairs_distance(
                    segs[ii, 0], segs[ii, 1], segs[jj, 0], segs[jj, 1]
                ) - (rad[ii] + rad[jj] + 2.0 * inflation)
                best = min(best, float(np.min(d)))
    return best


def step(state: DualArmState, action: DualAction, cfg: WorldConfig) -> DualArmState:
    """Advance one control period: DLS increment per arm, clip to limits."""

    def advance(arm: ArmModel, q, dx):
        dq = dls_ik_step(arm, q, dx, cfg.mu)
        return np.clip(q + dq, arm.joint_limits[:, 0], arm.joint_limits[:, 1])

    q_l = advance(cfg.arm_left, state.q_left, action.dx_left)
    q_r = advance(cfg.arm_right, state.q_right, action.dx_right)
    return make_state(
        cfg, q_l, q_r,
        g_left=state.g_left, g_right=state.g_right,
        holding_left=state.holding_left, holding_right=state.holding_right,
        t=state.t + 1,
    )


def rollout(state: DualArmState, plan: PlanSequence, cfg: WorldConfig,
            inflation: float | None = None) -> RolloutOutcome:
    """Execute the plan, recording clearance after each step.

    Execution stops at the first penetrating step; remaining actions are
    never applied.
    """
    horizon = plan.horizon
    states = [state]
    y_d = np.inf
    cur = state
    for i in range(horizon):
        cur = step(cur, plan.action(i), cfg)
        states.append(cur)
        d = min_self_distance(cur, cfg, inflation)
        y_d = min(y_d, d)
        if d < 0.0:
            return RolloutOutcome(y_bin=1, y_d=float(y_d), y_ttc=(i + 1) * cfg.dt, states=states)
    return RolloutOutcome(y_bin=0, y_d=float(y_d), y_ttc=horizon * cfg.dt, states=states)


def scene_feature(state: DualArmState, task: Task, noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Synthetic 10-dim scene descriptor standing in for a vision embedding.

    Layout: [ee_left, ee_right, goal_left, goal_right, holding_left,
    holding_right]; Gaussian noise with the given sigma lands on the eight
    position entries only.
    """
    z = np.concatenate([
        state.ee_left, state.ee_right, task.goal_left, task.goal_right,
        [float(state.holding_left), float(state.holding_right)],
    ])
    if noise_sigma > 0:
        z[:8] += rng.normal(0.0, noise_sigma, size=8)
    return z


def proprio_feature(state: DualArmState) -> np.ndarray:
    """14-dim proprioception: interleaved sin/cos of the 6 joints + grippers."""
    q = np.concatenate([state.q_left, state.q_right])
    enc = np.empty(2 * len(q))
    enc[0::2] = np.sin(q)
    enc[1::2] = np.cos(q)
    return np.concatenate([enc, [state.g_left, state.g_right]])


@dataclass(frozen=True)
class TaskParams:
    """Reset-protocol knobs shared by both task definitions."""

    goal_jitter: float = 0.03
    start_q_mean: tuple = (0.6, -0.4, -0.2)
    start_q_jitter: float = 0.1
    min_start_clearance: float = 0.05
    success_tolerance: float = 0.02
    max_steps: int = 300
    max_reset_draws: int = 100


_GOAL_CENTERS = {
    "crossing_transfer": (np.array([0.35, 0.30]), np.array([-0.35, 0.30])),
    "parallel_place": (np.array([-0.35, 0.35]), np.array([0.35, 0.35])),
}


def task_init(task_id: str, seed: int, cfg: WorldConfig,
              params: TaskParams = TaskParams()) -> tuple[DualArmState, Task]:
    """Seeded reset: jittered goals, then start joints redrawn until clear.

    crossing_transfer sends each EE to the opposite side of the workspace so
    straight goal paths intersect; parallel_place keeps each arm on its own
    side. Start configurations with clearance below min_start_clearance are
    rejected; after max_reset_draws rejections this raises RuntimeError.
    """
    if task_id not in _GOAL_CENTERS:
        raise ValueError(f"unknown task id {task_id!r}; expected one of {TASK_IDS}")
    rng = np.random.default_rng(np.random.SeedSequence([_task_index(task_id), int(seed)]))
    center_l, center_r = _GOAL_CENTERS[task_id]
    j = params.goal_jitter
    goal_l = center_l + rng.uniform(-j, j, size=2)
    goal_r = center_r + rng.uniform(-j, j, size=2)
    _check_reachable(goal_l, cfg.arm_left)
    _check_reachable(goal_r, cfg.arm_right)

    mean = np.asarray(params.start_q_mean, dtype=float)
    for _ in range(params.max_reset_draws):
        q_l = mean + rng.uniform(-params.start_q_jitter, params.start_q_jitter, size=mean.shape)
        q_r = mean + rng.uniform(-params.start_q_jitter, params.start_q_jitter, size=mean.shape)
        state = make_state(cfg, q_l, q_r)
        if min_self_distance(state, cfg) >= params.min_start_clearance:
            task = Task(
                id=task_id, goal_left=goal_l, goal_right=goal_r,
                start_q_left=q_l, start_q_right=q_r,
                success_tolerance=params.success_tolerance, max_steps=params.max_steps,
            )
            return state, task
    raise RuntimeError(
        f"task_init({task_id!r}, seed={seed}): no clear start in {params.max_reset_draws} draws"
    )


def _task_index(task_id: str) -> int:
    return TASK_IDS.index(task_id)


def _check_reachable(goal: np.ndarray, arm: ArmModel) -> None:
    reach = float(np.sum(arm.link_lengths))
    dist = float(np.linalg.norm(goal - arm.base_position))
    # success needs only |ee - goal| <= tolerance, so a goal slightly past
    # full stretch is still attainable; anything further is a config error
    if dist > reach + 0.015:
        raise ValueError(f"goal {goal} beyond workspace of arm at {arm.base_position}")


def success_check(state: DualArmState, task: Task, collided: bool = False) -> bool:
    """True iff both EEs sit within tolerance of their goals and the episode
    never collided (collision is a terminal failure)."""
    if collided:
        return False
    tol = task.success_tolerance
    return bool(
        np.linalg.norm(state.ee_left - task.goal_left) <= tol
        and np.linalg.norm(state.ee_right - task.goal_right) <= tol
    )
