"""Odometry-to-ECEF alignment and antenna lever-arm calibration.

Solves, over matched (GNSS position, interpolated odometry pose) pairs,

    min_{T_eo, t_ia}  sum_i || T_eo * T_oi_i * [t_ia; 1] - p_i ||^2

with a two-pass scheme: closed-form rigid registration with the lever arm
fixed at zero, then a joint Gauss-Newton refinement of the 6-DoF transform
and the 3-DoF lever arm. Excitation of the trajectory is gated with the
first-eigenvalue ratio (FER) of the position cloud before optimizing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import frames
from .frames import Pose

FER_THRESHOLD = 0.97
REALIGN_RMSE_THRESHOLD = 0.1  # meters
REALIGN_WINDOW = 30.0  # seconds of trailing matched samples
_JOINT_COND_LIMIT = 1e8


class InterpolationGapError(ValueError):
    """Requested time outside the trajectory or across too large a gap."""


class ExcitationError(ValueError):
    """Trajectory too degenerate (FER gate failed) for alignment."""


class NoConvergenceError(RuntimeError):
    """Joint refinement diverged."""


@dataclass(frozen=True)
class TrajectoryPair:
    """Time-matched GNSS positions and interpolated odometry poses."""

    times: np.ndarray
    gnss_positions: np.ndarray  # (k, 3) ECEF
    vio_poses: Tuple[Pose, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.gnss_positions, dtype=float)
        if len(t) < 3 or p.shape != (len(t), 3) or len(self.vio_poses) != len(t):
            raise ValueError("trajectory pair needs >= 3 consistent samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory pair timestamps must strictly increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "gnss_positions", p)
        object.__setattr__(self, "vio_poses", tuple(self.vio_poses))

    @property
    def k(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class AlignmentResult:
    t_eo: Pose
    t_ia: np.ndarray  # lever arm, IMU frame, meters
    rmse: float
    fer: float

    def __post_init__(self):
        object.__setattr__(self, "t_ia", np.asarray(self.t_ia, dtype=float))


def interpolate_pose(times: Sequence[float], poses: Sequence[Pose],
                     t: float, max_gap: float = 0.5) -> Pose:
    """Interpolate a pose trajectory: linear translation, geodesic rotation."""
    times = np.asarray(times, dtype=float)
    if t < times[0] or t > times[-1]:
        raise InterpolationGapError(f"t={t} outside [{times[0]}, {times[-1]}]")
    i = int(np.searchsorted(times, t, side="right")) - 1
    if i >= len(times) - 1:
        return poses[-1]
    if times[i] == t:
        return poses[i]
    gap = times[i + 1] - times[i]
    if gap > max_gap:
        raise InterpolationGapError(f"gap {gap:.3f}s at t={t} exceeds {max_gap}s")
    alpha = (t - times[i]) / gap
    p0, p1 = poses[i], poses[i + 1]
    w = frames.log_so3(p0.rotation.T @ p1.rotation)
    R = p0.rotation @ frames.exp_so3(alpha * w)
    trans = (1.0 - alpha) * p0.translation + alpha * p1.translation
    return Pose(R, trans)


def excitation_fer(positions: np.ndarray) -> float:
    """First-eigenvalue ratio of the mean-removed position covariance.

    1.0 for collinear spread, 1/3 for isotropic spread. Zero total variance
    (all positions identical) returns the degenerate value 1/3; callers must
    use excitation_sufficient, which treats that case as insufficient.
    """
    p = np.asarray(positions, dtype=float)
    if p.shape[0] < 3:
        raise ValueError("FER needs at least 3 positions")
    centered = p - p.mean(axis=0)
    eigs = np.linalg.eigvalsh(centered.T @ centered / p.shape[0])
    total = eigs.sum()
    if total <= 0.0:
        return 1.0 / 3.0
    return float(eigs.max() / total)


def excitation_sufficient(positions: np.ndarray,
                          threshold: float = FER_THRESHOLD) -> bool:
    p = np.asarray(positions, dtype=float)
    centered = p - p.mean(axis=0)
    if np.linalg.eigvalsh(centered.T @ centered / p.shape[0]).sum() <= 0.0:
        return False
    return excitation_fer(p) < threshold


def _kabsch(source: np.ndarray, target: np.ndarray) -> Pose:
    """Closed-form rigid registration minimizing ||R s_i + t - p_i||^2."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    H = (source - sc).T @ (target - tc)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ S @ U.T
    return Pose(R, tc - R @ sc)


def _cost_and_residuals(pairs: TrajectoryPair, t_eo: Pose,
                        t_ia: np.ndarray) -> Tuple[float, np.ndarray]:
    res = np.empty((pairs.k, 3))
    for i, pose in enumerate(pairs.vio_poses):
        antenna_o = pose.rotation @ t_ia + pose.translation
        res[i] = t_eo.transform(antenna_o) - pairs.gnss_positions[i]
    return float(np.sum(res * res)), res


def align_two_pass(pairs: TrajectoryPair,
                   fer_threshold: float = FER_THRESHOLD,
                   estimate_lever_arm: bool = True,
                   t_ia_prior: Optional[np.ndarray] = None,
                   max_iters: int = 100) -> AlignmentResult:
    """Two-pass alignment: closed-form seed, then joint Gauss-Newton.

    Pass 1 registers the odometry translations to the GNSS positions with the
    lever arm fixed (zero, or the supplied prior). Pass 2 refines the rigid
    transform on its tangent space jointly with the lever arm. If the joint
    normal matrix is too ill-conditioned for the lever arm to be observable,
    it is held at its prior value.
    """
    if pairs.k < 10:
        raise ValueError(f"alignment needs >= 10 samples, got {pairs.k}")
    fer = excitation_fer(pairs.gnss_positions)
    if not excitation_sufficient(pairs.gnss_positions, fer_threshold):
        raise ExcitationError(f"insufficient excitation: FER={fer:.4f}")

    t_ia = np.zeros(3) if t_ia_prior is None else np.asarray(t_ia_prior, float)

    # work in a centered ECEF frame to keep the rotation Jacobians small
    center = pairs.gnss_positions.mean(axis=0)
    centered = TrajectoryPair(pairs.times, pairs.gnss_positions - center,
                              pairs.vio_poses)

    # pass 1: closed-form registration with the lever arm fixed
    source = np.array([p.rotation @ t_ia + p.translation
                       for p in centered.vio_poses])
    t_eo = _kabsch(source, centered.gnss_positions)
    cost, _ = _cost_and_residuals(centered, t_eo, t_ia)

    # pass 2: joint Gauss-Newton with simple step damping
    solve_lever = estimate_lever_arm
    n_params = 9 if solve_lever else 6
    bad_steps = 0
    for _ in range(max_iters):
        J = np.zeros((3 * centered.k, n_params))
        _, res = _cost_and_residuals(centered, t_eo, t_ia)
        for i, pose in enumerate(centered.vio_poses):
            q = t_eo.transform(pose.rotation @ t_ia + pose.translation)
            rows = slice(3 * i, 3 * i + 3)
            J[rows, 0:3] = -frames.hat(q)
            J[rows, 3:6] = np.eye(3)
            if solve_lever:
                J[rows, 6:9] = t_eo.rotation @ pose.rotation
        JtJ = J.T @ J
        if solve_lever and np.linalg.cond(JtJ) > _JOINT_COND_LIMIT:
            # lever arm unobservable (e.g. rotation-free motion): hold it
            solve_lever = False
            n_params = 6
            continue
        delta = np.linalg.solve(JtJ, -J.T @ res.ravel())

        scale = 1.0
        stepped = False
        for _ in range(12):
            step = scale * delta
            cand_t_eo = frames.compose(frames.exp(np.concatenate([step[0:3],
                                                                  step[3:6]])),
                                       t_eo)
            cand_t_ia = t_ia + step[6:9] if solve_lever else t_ia
            cand_cost, _ = _cost_and_residuals(centered, cand_t_eo, cand_t_ia)
            if cand_cost <= cost:
                stepped = True
                break
            scale *= 0.5
        if not stepped:
            bad_steps += 1
            if bad_steps >= 10:
                raise NoConvergenceError("joint refinement diverged")
            continue
        bad_steps = 0
        improvement = cost - cand_cost
        t_eo, t_ia, cost = cand_t_eo, cand_t_ia, cand_cost
        if improvement < 1e-10 * max(cost, 1.0):
            break

    rmse = np.sqrt(cost / pairs.k)
    # undo the centering: T_eo_full = trans(center) * T_eo
    t_eo_full = Pose(t_eo.rotation, t_eo.translation + center)
    return AlignmentResult(t_eo=t_eo_full, t_ia=t_ia, rmse=float(rmse), fer=fer)


def realign_policy(current: AlignmentResult, window: TrajectoryPair,
                   rmse_threshold: float = REALIGN_RMSE_THRESHOLD,
                   fer_threshold: float = FER_THRESHOLD) -> AlignmentResult:
    """Re-align over a trailing window with the lever arm held fixed.

    The new transform is adopted only when the window is well excited and the
    re-fit is tight; otherwise the current alignment is kept.
    """
    fer = excitation_fer(window.gnss_positions)
    if fer >= fer_threshold or not excitation_sufficient(window.gnss_positions,
                                                         fer_threshold):
        return current
    # with t_ia fixed the problem is exactly rigid registration
    source = np.array([p.rotation @ current.t_ia + p.translation
                       for p in window.vio_poses])
    center = window.gnss_positions.mean(axis=0)
    t_eo_local = _kabsch(source, window.gnss_positions - center)
    t_eo = Pose(t_eo_local.rotation, t_eo_local.translation + center)
    res = np.array([t_eo.transform(s) for s in source]) - window.gnss_positions
    rmse = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    if rmse < rmse_threshold:
        return AlignmentResult(t_eo=t_eo, t_ia=current.t_ia, rmse=rmse, fer=fer)
    return current
