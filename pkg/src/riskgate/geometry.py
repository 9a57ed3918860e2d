"""Planar kinematics and capsule distance primitives.

Everything here is a pure function of its inputs (no hidden state), so the
simulator, the labeling oracle and any number of parallel workers can share
these routines freely. Units are meters and radians throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


class JointLimitError(ValueError):
    """A joint angle falls outside its configured [lo, hi] interval."""


@dataclass(frozen=True)
class Segment2:
    """2D line segment; zero length is allowed and treated as a point."""

    p0: np.ndarray
    p1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float))
        if not (np.isfinite(self.p0).all() and np.isfinite(self.p1).all()):
            raise ValueError("segment endpoints must be finite")


@dataclass(frozen=True)
class Capsule2:
    """A segment swollen by a radius; stands in for a link or grasped object."""

    axis: Segment2
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("capsule radius must be >= 0")


@dataclass(frozen=True)
class ArmModel:
    """Geometry and limits of one planar chain.

    Attributes:
        base_position: world position of joint 0 (m).
        base_orientation: world heading of the chain root (rad).
        link_lengths: per-link lengths (m), all > 0.
        link_radii: per-link capsule radii (m).
        joint_limits: per-joint [lo, hi] (rad), lo < hi.
        joint_velocity_limit: per-step joint increment bound (rad/step).
    """

    base_position: np.ndarray
    base_orientation: float
    link_lengths: np.ndarray
    link_radii: np.ndarray
    joint_limits: np.ndarray
    joint_velocity_limit: float

    def __post_init__(self):
        object.__setattr__(self, "base_position", np.asarray(self.base_position, dtype=float))
        object.__setattr__(self, "link_lengths", np.asarray(self.link_lengths, dtype=float))
        object.__setattr__(self, "link_radii", np.asarray(self.link_radii, dtype=float))
        object.__setattr__(self, "joint_limits", np.asarray(self.joint_limits, dtype=float))
        if np.any(self.link_lengths <= 0):
            raise ValueError("link lengths must be > 0")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint limits require lo < hi")
        if self.joint_velocity_limit <= 0:
            raise ValueError("joint velocity limit must be > 0")

    @property
    def dof(self) -> int:
        return len(self.link_lengths)


def default_arm(base_position=(0.0, 0.0), base_orientation: float = 0.0) -> ArmModel:
    """Tabletop-scale 3-link arm used by the default world configuration."""
    return ArmModel(
        base_position=np.asarray(base_position, dtype=float),
        base_orientation=base_orientation,
        link_lengths=np.array([0.30, 0.25, 0.15]),
        link_radii=np.array([0.03, 0.03, 0.03]),
        joint_limits=np.array([[-2.8, 2.8]] * 3),
        joint_velocity_limit=0.1,
    )


def _point_segment_dist2(p, a, b):
    """Squared distance from points p to segments [a, b], all (..., 2)."""
    ab = b - a
    denom = np.einsum("...i,...i", ab, ab)
    t = np.einsum("...i,...i", p - a, ab) / np.where(denom < _EPS, 1.0, denom)
    t = np.clip(np.where(denom < _EPS, 0.0, t), 0.0, 1.0)
    closest = a + t[..., None] * ab
    d = p - closest
    return np.einsum("...i,...i", d, d)


def segment_pairs_distance(p0, p1, q0, q1) -> np.ndarray:
    """Minimum distances between segment pairs [p0,p1] and [q0,q1].

    All inputs are (..., 2) arrays; the result has the broadcast batch shape.
    The minimum over the (s, t) parameter square is attained either at the
    interior stationary point (when it lies inside the square) or on one of
    the four edges, each of which reduces to a clamped point-to-segment
    projection, so taking the min over those five candidates is exact.
    Zero-length segments degrade to points through the same clamping.
    """
    p0, p1, q0, q1 = (np.asarray(x, dtype=float) for x in (p0, p1, q0, q1))
    u = p1 - p0
    v = q1 - q0
    w0 = p0 - q0
    a = np.einsum("...i,...i", u, u)
    b = np.einsum("...i,...i", u, v)
    c = np.einsum("...i,...i", v, v)
    d = np.einsum("...i,...i", u, w0)
    e = np.einsum("...i,...i", v, w0)
    det = a * c - b * b

    safe = np.where(det < _EPS, 1.0, det)
    s = (b * e - c * d) / safe
    t = (a * e - b * d) / safe
    inside = (det >= _EPS) & (s >= 0.0) & (s <= 1.0) & (t >= 0.0) & (t <= 1.0)
    pi = p0 + s[..., None] * u
    qi = q0 + t[..., None] * v
    di = pi - qi
    interior = np.where(inside, np.einsum("...i,...i", di, di), np.inf)

    best = np.minimum(interior, _point_segment_dist2(q0, p0, p1))
    best = np.minimum(best, _point_segment_dist2(q1, p0, p1))
    best = np.minimum(best, _point_segment_dist2(p0, q0, q1))
    best = np.minimum(best, _point_segment_dist2(p1, q0, q1))
    return np.sqrt(best)


def segment_closest_distance(a: Segment2, b: Segment2) -> float:
    """Minimum Euclidean distance between two segments (0 if they intersect)."""
    return float(segment_pairs_distance(a.p0, a.p1, b.p0, b.p1))


def capsule_distance(a: Capsule2, b: Capsule2, inflation: float = 0.0) -> float:
    """Signed clearance between two capsules, each grown by `inflation`.

    Negative values measure penetration of the inflated surfaces.
    """
    if inflation < 0:
        raise ValueError("inflation must be >= 0")
    axis_dist = segment_closest_distance(a.axis, b.axis)
    return axis_dist - (a.radius + b.radius + 2.0 * inflation)


def joint_origins(arm: ArmModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint origin points (n+1, 2) and cumulative link angles (n,)."""
    q = np.asarray(q, dtype=float)
    if q.shape != (arm.dof,):
        raise ValueError(f"expected {arm.dof} joint angles, got shape {q.shape}")
    angles = arm.base_orientation + np.cumsum(q)
    steps = arm.link_lengths[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = np.empty((arm.dof + 1, 2))
    pts[0] = arm.base_position
    pts[1:] = arm.base_position + np.cumsum(steps, axis=0)
    return pts, angles


def forward_kinematics(arm: ArmModel, q: np.ndarray):
    """Link segments, end-effector position and heading for joint vector q.

    Link i runs from joint i's origin to joint i+1's origin at cumulative
    angle base_orientation + sum(q[:i+1]).

    Returns:
        (link_segments, ee_position, ee_heading) where link_segments is an
        (n, 2, 2) array of [p0, p1] rows.

    Raises:
        ValueError: q has the wrong length.
        JointLimitError: some q[i] lies outside its joint limits.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (arm.dof,):
        raise ValueError(f"expected {arm.dof} joint angles, got shape {q.shape}")
    if np.any(q < arm.joint_limits[:, 0]) or np.any(q > arm.joint_limits[:, 1]):
        raise JointLimitError(f"joint vector {q} violates limits {arm.joint_limits.tolist()}")
    pts, angles = joint_origins(arm, q)
    segments = np.stack([pts[:-1], pts[1:]], axis=1)
    return segments, pts[-1].copy(), float(angles[-1])


def jacobian(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Analytic 2 x n position Jacobian of the end effector.

    Column j is the 90-degree CCW rotation of (ee - joint_j_origin).
    """
    pts, _ = joint_origins(arm, q)
    rel = pts[-1] - pts[:-1]  # (n, 2)
    return np.stack([-rel[:, 1], rel[:, 0]], axis=0)


def dls_ik_step(arm: ArmModel, q: np.ndarray, dx: np.ndarray, mu: float = 0.05) -> np.ndarray:
    """Damped-least-squares joint increment realizing EE increment dx.

    dq = J^T (J J^T + mu^2 I)^{-1} dx, then clipped componentwise to the
    per-step velocity limit. mu > 0 keeps the 2x2 solve well-posed at
    singular configurations.
    """
    if mu <= 0:
        raise ValueError("damping mu must be > 0")
    dx = np.asarray(dx, dtype=float)
    J = jacobian(arm, q)
    A = J @ J.T + (mu * mu) * np.eye(2)
    dq = J.T @ np.linalg.solve(A, dx)
    lim = arm.joint_velocity_limit
    return np.clip(dq, -lim, lim)
