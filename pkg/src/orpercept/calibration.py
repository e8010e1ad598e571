"""Camera-to-robot extrinsic calibration for a one-axis rig.

The rig's only motion is rotation about a single axis, which makes the
AX=XB problem rank deficient: any screw about that axis (rotation beta plus
slide alpha) maps solutions to solutions. ``solve_rotation`` therefore
selects the family member closest to a caller-supplied gauge, and the
remaining screw freedom is resolved downstream by ICP against a reference
model whose pose in the robot base frame is known (``mode="screw"``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    RigidTransform,
    PointCloud,
    compose,
    invert,
    nearest_rotation,
    rotation_about_axis,
    rotation_angle,
    rotation_axis,
)

__all__ = [
    "CalibrationError",
    "IcpError",
    "PoseObservation",
    "MotionPair",
    "HandEyeSolution",
    "BaseCameraSolution",
    "IcpResult",
    "TreReport",
    "make_motion_pairs",
    "solve_rotation",
    "solve_translation_perp",
    "solve_hand_eye",
    "solve_base_camera",
    "icp_refine",
    "compute_tre",
]

_MIN_PAIR_ANGLE_DEG = 5.0
_MAX_ANGLE_MISMATCH_DEG = 1.0


class CalibrationError(RuntimeError):
    pass


class IcpError(CalibrationError):
    pass


@dataclass(frozen=True)
class PoseObservation:
    """One synchronized sample: forward kinematics T and fixture pose S.

    ``T`` maps mounting-joint coordinates into the robot base frame;
    ``S`` maps fixture-local coordinates into the camera frame.
    """

    T: RigidTransform
    S: RigidTransform


@dataclass(frozen=True)
class MotionPair:
    """Relative joint motion A and the matching camera-observed motion B."""

    A: RigidTransform
    B: RigidTransform

    def __post_init__(self):
        mismatch = abs(rotation_angle(self.A.rotation) - rotation_angle(self.B.rotation))
        if np.degrees(mismatch) > _MAX_ANGLE_MISMATCH_DEG:
            raise ValueError(
                f"A/B rotation angles disagree by {np.degrees(mismatch):.2f} deg (limit 1 deg)"
            )

    def residual(self, x: RigidTransform) -> float:
        return float(np.linalg.norm(compose(self.A, x).matrix() - compose(x, self.B).matrix()))


@dataclass(frozen=True)
class HandEyeSolution:
    """Rotation and in-plane translation of the mount; the component of the
    translation along the rotation axis (alpha) is unobservable here."""

    R_X: np.ndarray
    t_perp: np.ndarray
    n_z: np.ndarray
    alpha: float | None = None
    residual: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.n_z, dtype=np.float64).reshape(3)
        n = n / np.linalg.norm(n)
        t = np.asarray(self.t_perp, dtype=np.float64).reshape(3)
        t = t - (t @ n) * n
        object.__setattr__(self, "n_z", n)
        object.__setattr__(self, "t_perp", t)
        object.__setattr__(self, "R_X", np.asarray(self.R_X, dtype=np.float64))

    def transform(self, alpha: float | None = None) -> RigidTransform:
        a = self.alpha if alpha is None else alpha
        if a is None:
            a = 0.0
        return RigidTransform(self.R_X, self.t_perp + a * self.n_z)


@dataclass(frozen=True)
class BaseCameraSolution:
    transform: RigidTransform
    residual: float
    count: int


@dataclass(frozen=True)
class IcpResult:
    alpha: float
    beta: float
    rms: float
    iterations: int
    correspondences: int


def make_motion_pairs(
    observations,
    *,
    all_pairs: bool = False,
    min_angle_deg: float = _MIN_PAIR_ANGLE_DEG,
) -> list[MotionPair]:
    """Build motion pairs from pose observations.

    Consecutive observations by default, every i<j combination with
    ``all_pairs``. Pairs whose joint rotation is below ``min_angle_deg`` are
    discarded as ill conditioned.

    Raises:
        CalibrationError: fewer than one usable pair.
    """
    obs = list(observations)
    if len(obs) < 2:
        raise CalibrationError("need at least two observations")
    if all_pairs:
        index_pairs = itertools.combinations(range(len(obs)), 2)
    else:
        index_pairs = zip(range(len(obs) - 1), range(1, len(obs)))

    pairs = []
    for i, j in index_pairs:
        a = compose(invert(obs[i].T), obs[j].T)
        if np.degrees(rotation_angle(a.rotation)) < min_angle_deg:
            continue
        b = compose(obs[i].S, invert(obs[j].S))
        pairs.append(MotionPair(A=a, B=b))
    if not pairs:
        raise CalibrationError(
            f"no usable motion pairs (all joint rotations below {min_angle_deg} deg)"
        )
    return pairs


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _closest_about_axis(r, gauge, axis):
    """Rotate ``r`` about ``axis`` to be as close to ``gauge`` as possible."""
    z = r @ gauge.T
    c = np.trace(z) - axis @ z @ axis
    s = np.trace(_skew(axis) @ z)
    beta = float(np.arctan2(s, c))
    return rotation_about_axis(axis, beta) @ r


def solve_rotation(pairs, n_z, gauge=None) -> np.ndarray:
    """Least-squares rotation of the hand-eye problem for single-axis motion.

    Minimizes ``sum |R_A R - R R_B|_F^2`` on the Kronecker-vectorized linear
    system. Because every A rotates about the same axis the system has a
    three-dimensional linear nullspace (scale plus the one-parameter family
    of rotations about ``n_z``); the returned rotation is the family member
    closest to ``gauge`` (identity when omitted).

    Raises:
        CalibrationError: empty input or rank collapse beyond the expected
            single-axis degeneracy.
    """
    pairs = list(pairs)
    if not pairs:
        raise CalibrationError("no motion pairs")
    n_z = np.asarray(n_z, dtype=np.float64).reshape(3)
    n_z = n_z / np.linalg.norm(n_z)
    gauge = np.eye(3) if gauge is None else np.asarray(gauge, dtype=np.float64)

    eye = np.eye(3)
    rows = [np.kron(p.A.rotation, eye) - np.kron(eye, p.B.rotation.T) for p in pairs]
    k = np.vstack(rows)
    _, s, vt = np.linalg.svd(k)
    # single-axis data leaves a 3-dim nullspace; anything wider means the
    # motions themselves were degenerate (e.g. all angles ~0)
    if s[5] < 1e-6 * s[0]:
        raise CalibrationError("rank deficiency beyond the single-axis nullspace")
    null = vt[6:].T  # 9 x 3

    candidates = []
    # projection of the gauge onto the solution span
    proj = (null @ (null.T @ gauge.reshape(9))).reshape(3, 3)
    if abs(np.linalg.det(proj)) > 1e-12:
        candidates.append(nearest_rotation(proj))
    # constructive estimate from the observed rotation axes
    axis_sum = np.zeros(3)
    for p in pairs:
        ang = rotation_angle(p.B.rotation)
        ax_b = rotation_axis(p.B.rotation)
        ax_a = rotation_axis(p.A.rotation)
        ax_b = ax_b * np.sign(ax_a @ n_z) if ax_a @ n_z != 0 else ax_b
        axis_sum += ang * ax_b
    if np.linalg.norm(axis_sum) > 1e-12:
        m = axis_sum / np.linalg.norm(axis_sum)
        v = np.cross(m, n_z)
        sv, cv = np.linalg.norm(v), float(m @ n_z)
        if sv < 1e-12:
            base = eye if cv > 0 else rotation_about_axis(_any_perpendicular(n_z), np.pi)
        else:
            base = rotation_about_axis(v / sv, np.arctan2(sv, cv))
        candidates.append(base)

    def residual_of(r):
        return float(
            np.sqrt(np.mean([np.sum((p.A.rotation @ r - r @ p.B.rotation) ** 2) for p in pairs]))
        )

    best = min(candidates, key=residual_of)
    best = _closest_about_axis(best, gauge, n_z)
    return best


def _any_perpendicular(v):
    w = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    w = w - (w @ v) * v
    return w / np.linalg.norm(w)


def solve_translation_perp(pairs, r_x, n_z) -> np.ndarray:
    """Translation component of X in the plane orthogonal to the motion axis.

    Solves ``(R_A - I) t = R_X t_B - t_A`` by least squares restricted to the
    two-dimensional subspace perpendicular to ``n_z``; the axis component is
    unobservable and set to zero.
    """
    pairs = list(pairs)
    if not pairs:
        raise CalibrationError("no motion pairs")
    n_z = np.asarray(n_z, dtype=np.float64).reshape(3)
    n_z = n_z / np.linalg.norm(n_z)
    e1 = _any_perpendicular(n_z)
    e2 = np.cross(n_z, e1)
    basis = np.column_stack([e1, e2])

    lhs = np.vstack([(p.A.rotation - np.eye(3)) @ basis for p in pairs])
    rhs = np.concatenate([r_x @ p.B.translation - p.A.translation for p in pairs])
    y, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return basis @ y


def solve_hand_eye(observations, n_z, *, gauge=None, all_pairs: bool = True) -> HandEyeSolution:
    """Full single-axis hand-eye solve: pairs, rotation, in-plane translation."""
    pairs = make_motion_pairs(observations, all_pairs=all_pairs)
    r_x = solve_rotation(pairs, n_z, gauge=gauge)
    t_perp = solve_translation_perp(pairs, r_x, n_z)
    sol = HandEyeSolution(R_X=r_x, t_perp=t_perp, n_z=n_z)
    res = float(np.sqrt(np.mean([p.residual(sol.transform(0.0)) ** 2 for p in pairs])))
    return HandEyeSolution(R_X=r_x, t_perp=t_perp, n_z=n_z, residual=res)


def solve_base_camera(obs_op, obs_base, x_op: RigidTransform) -> BaseCameraSolution:
    """Static-camera extrinsics chained through an already-calibrated camera.

    Each synchronized sample yields one estimate ``T_op X_op S_op S_base^-1``;
    rotations are averaged by the chordal L2 mean and translations
    arithmetically.

    Args:
        obs_op: list of (T_op, S_op) for the calibrated moving camera.
        obs_base: list of S_base for the static camera, same timestamps.
        x_op: calibrated moving-camera extrinsics (camera to joint).
    """
    obs_op = list(obs_op)
    obs_base = list(obs_base)
    if len(obs_op) != len(obs_base):
        raise CalibrationError("observation lists are not time-aligned (length mismatch)")
    if not obs_op:
        raise CalibrationError("no observations")

    estimates = []
    for (t_op, s_op), s_base in zip(obs_op, obs_base):
        estimates.append(compose(compose(compose(t_op, x_op), s_op), invert(s_base)))
    r_mean = nearest_rotation(np.mean([e.rotation for e in estimates], axis=0))
    t_mean = np.mean([e.translation for e in estimates], axis=0)
    x_base = RigidTransform(r_mean, t_mean)
    res = float(
        np.sqrt(np.mean([np.sum((e.matrix() - x_base.matrix()) ** 2) for e in estimates]))
    )
    return BaseCameraSolution(transform=x_base, residual=res, count=len(estimates))


def icp_refine(
    camera_cloud: PointCloud,
    reference_model: PointCloud,
    x_init: RigidTransform,
    axis,
    *,
    mode: str = "translation",
    gating: float = 0.20,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> IcpResult:
    """Resolve the unobservable motion-axis freedom against a reference cloud.

    ``mode="translation"`` is the 1-DOF point-to-point ICP: nearest neighbors
    under the current offset, then the closed-form update
    ``alpha = mean((q - p) . axis)``. ``mode="screw"`` additionally solves the
    rotation about the axis (through the reference-frame origin), which is
    needed when the warm start's orientation about the axis is only nominal.

    Args:
        camera_cloud: points in the camera frame.
        reference_model: points in the reference (robot base) frame, at their
            true pose.
        x_init: warm-start camera-to-reference transform.
        axis: motion axis in the reference frame.

    Raises:
        IcpError: empty clouds or no correspondences within ``gating`` meters.
    """
    if mode not in ("translation", "screw"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(camera_cloud) == 0 or len(reference_model) == 0:
        raise IcpError("empty cloud")
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    axis = axis / np.linalg.norm(axis)

    p0 = x_init.apply(camera_cloud.points)
    tree = cKDTree(reference_model.points)
    alpha, beta = 0.0, 0.0
    rms = np.inf
    n_corr = 0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if mode == "screw":
            cur = p0 @ rotation_about_axis(axis, beta).T + alpha * axis
        else:
            cur = p0 + alpha * axis
        dist, idx = tree.query(cur, distance_upper_bound=gating)
        ok = np.isfinite(dist)
        n_corr = int(np.count_nonzero(ok))
        if n_corr == 0:
            raise IcpError(f"no correspondences within gating distance ({gating} m)")
        p = p0[ok]
        q = reference_model.points[idx[ok]]
        new_alpha = float(np.mean((q - p) @ axis))
        new_beta = beta
        if mode == "screw":
            p_perp = p - np.outer(p @ axis, axis)
            q_perp = q - np.outer(q @ axis, axis)
            s = float(np.sum(np.cross(p_perp, q_perp) @ axis))
            c = float(np.sum(p_perp * q_perp))
            new_beta = float(np.arctan2(s, c))
        moved = p @ rotation_about_axis(axis, new_beta).T + new_alpha * axis
        rms = float(np.sqrt(np.mean(np.sum((moved - q) ** 2, axis=1))))
        step = abs(new_alpha - alpha) + abs(new_beta - beta)
        alpha, beta = new_alpha, new_beta
        if step < tol:
            break
    return IcpResult(alpha=alpha, beta=beta, rms=rms, iterations=iterations, correspondences=n_corr)


@dataclass(frozen=True)
class TreReport:
    """Cross-camera fiducial disagreement as a fraction of viewing distance."""

    pair_stats: dict
    mean: float
    std: float
    count: int

    def __post_init__(self):
        if self.mean < 0 or self.std < 0:
            raise ValueError("TRE statistics must be non-negative")


def compute_tre(calibs, observations, kinematics) -> TreReport:
    """Target registration error across all camera pairs.

    For every synchronized sample where two cameras both located the fixture,
    each sphere center is mapped from one camera into the other through the
    robot base frame; the residual distance is normalized by the mean of the
    two object-camera distances (so the pair statistic is symmetric).

    Args:
        calibs: camera name -> camera-to-mount transform (mount = joint for
            moving cameras, robot base for static ones).
        observations: camera name -> list of FixtureObservation or None.
        kinematics: camera name -> list of mount-to-base transforms, aligned
            with ``observations``.

    Raises:
        CalibrationError: no sample is shared by two cameras.
    """
    names = sorted(calibs)
    n_samples = {len(observations[c]) for c in names} | {len(kinematics[c]) for c in names}
    if len(n_samples) != 1:
        raise CalibrationError("observation/kinematics streams are not time-aligned")
    n = n_samples.pop()

    per_pair: dict = {}
    all_values = []
    for i, j in itertools.combinations(names, 2):
        values = []
        for t in range(n):
            oi, oj = observations[i][t], observations[j][t]
            if oi is None or oj is None:
                continue
            cam_i_to_base = compose(kinematics[i][t], calibs[i])
            cam_j_to_base = compose(kinematics[j][t], calibs[j])
            to_j = compose(invert(cam_j_to_base), cam_i_to_base)
            ci = oi.centers
            cj = oj.centers
            mapped = to_j.apply(ci)
            resid = np.linalg.norm(mapped - cj, axis=1)
            dist = 0.5 * (np.linalg.norm(ci, axis=1) + np.linalg.norm(cj, axis=1))
            values.extend((resid / dist).tolist())
        if values:
            arr = np.asarray(values)
            per_pair[(i, j)] = (float(arr.mean()), float(arr.std()), len(arr))
            all_values.extend(values)

    if not all_values:
        raise CalibrationError("no common fixture observations between any camera pair")
    arr = np.asarray(all_values)
    return TreReport(
        pair_stats=per_pair, mean=float(arr.mean()), std=float(arr.std()), count=len(arr)
    )
