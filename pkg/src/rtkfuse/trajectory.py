"""Time-indexed pose trajectory shared by the simulator, filter, and file IO."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .align_calib import interpolate_pose
from .frames import Pose


@dataclass
class VioTrajectory:
    """Odometry pose stream with per-pose 6x6 tangent covariances."""

    times: np.ndarray
    poses: Tuple[Pose, ...]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.poses = tuple(self.poses)
        if len(self.times) != len(self.poses):
            raise ValueError("trajectory times and poses differ in length")
        if len(self.times) >= 2 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must strictly increase")

    def __len__(self) -> int:
        return len(self.poses)

    def covers(self, t: float) -> bool:
        return len(self.times) > 0 and self.times[0] <= t <= self.times[-1]

    def at(self, t: float, max_gap: float = 0.5) -> Pose:
        """Interpolated pose at time t, with the nearest sample's covariance."""
        pose = interpolate_pose(self.times, self.poses, t, max_gap=max_gap)
        i = int(np.argmin(np.abs(self.times - t)))
        return Pose(pose.rotation, pose.translation,
                    covariance=self.poses[i].covariance)


def joint_pose_covariance(pose_i: Pose, pose_j: Pose,
                          cross_corr: float = 0.9) -> np.ndarray:
    """Assemble the 12x12 joint covariance of two consecutive poses.

    Pose streams carry only marginal covariances; the cross block between
    consecutive poses is reconstructed as cross_corr times the earlier
    marginal, which matches a random-walk error model and keeps the joint
    matrix PSD whenever the later marginal dominates the earlier one.
    """
    Si = pose_i.covariance if pose_i.covariance is not None else np.zeros((6, 6))
    Sj = pose_j.covariance if pose_j.covariance is not None else np.zeros((6, 6))
    C = cross_corr * Si
    joint = np.block([[Si, C], [C.T, Sj]])
    return 0.5 * (joint + joint.T)
