"""Rigid-body geometry: ECEF positions, SE(3) poses, tangent-space tools.

Conventions used throughout the package:
  - Tangent vectors are ordered [rotation; translation] (radians, meters).
  - Perturbations are left-multiplicative: a perturbed pose is exp(xi) * T.
    Under this convention the translation block of the incremental-translation
    Jacobians is a constant +/- identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# Sanity bounds for any receiver or satellite ECEF position (meters).
ECEF_MIN_RADIUS = 6.2e6
ECEF_MAX_RADIUS = 2.7e7

_ROT_TOL = 1e-9
_COV_SYM_TOL = 1e-12
_COV_EIG_FLOOR = -1e-12


class SingularRotationError(ValueError):
    """Rotation log requested too close to the pi singularity."""


def ecef_position(x, y, z, validate: bool = True) -> np.ndarray:
    """Build a validated ECEF position vector."""
    p = np.array([x, y, z], dtype=float)
    if validate:
        validate_ecef(p)
    return p


def validate_ecef(p: np.ndarray) -> None:
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"ECEF position must be a finite 3-vector, got {p!r}")
    r = float(np.linalg.norm(p))
    if not (ECEF_MIN_RADIUS <= r <= ECEF_MAX_RADIUS):
        raise ValueError(f"ECEF position magnitude {r:.3e} m outside "
                         f"[{ECEF_MIN_RADIUS:.1e}, {ECEF_MAX_RADIUS:.1e}]")


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(w) @ v == cross(w, v)."""
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix from a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-10:
        # 2nd-order series, accurate to O(theta^4)
        return np.eye(3) + K + 0.5 * (K @ K)
    return (np.eye(3)
            + (np.sin(theta) / theta) * K
            + ((1.0 - np.cos(theta)) / theta**2) * (K @ K))


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; rejects angles within 1e-6 of pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta > np.pi - 1e-6:
        raise SingularRotationError(f"rotation angle {theta:.9f} too close to pi")
    axis_vec = np.array([R[2, 1] - R[1, 2],
                         R[0, 2] - R[2, 0],
                         R[1, 0] - R[0, 1]])
    if theta < 1e-10:
        return 0.5 * axis_vec
    return (theta / (2.0 * np.sin(theta))) * axis_vec


def _left_jacobian_so3(w: np.ndarray) -> np.ndarray:
    """V such that the SE(3) exponential translation is V @ rho."""
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3)
            + ((1.0 - np.cos(theta)) / theta**2) * K
            + ((theta - np.sin(theta)) / theta**3) * (K @ K))


def _left_jacobian_inv_so3(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = theta / 2.0
    cot = 1.0 / np.tan(half)
    return (np.eye(3) - 0.5 * K
            + ((1.0 - half * cot) / theta**2) * (K @ K))


@dataclass(frozen=True)
class Pose:
    """Rigid transform with an optional 6x6 tangent-space covariance.

    Covariance ordering matches the package tangent convention:
    rotation block first (indices 0:3), translation block second (3:6).
    """

    rotation: np.ndarray
    translation: np.ndarray
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("Pose needs a 3x3 rotation and a 3-vector translation")
        if np.abs(R.T @ R - np.eye(3)).max() > _ROT_TOL:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
            raise ValueError("rotation matrix determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.covariance is not None:
            P = np.asarray(self.covariance, dtype=float)
            if P.shape != (6, 6):
                raise ValueError("pose covariance must be 6x6")
            if np.abs(P - P.T).max() > _COV_SYM_TOL:
                raise ValueError("pose covariance is not symmetric")
            if np.linalg.eigvalsh(P).min() < _COV_EIG_FLOOR:
                raise ValueError("pose covariance has a significantly negative eigenvalue")
            object.__setattr__(self, "covariance", P)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def transform(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition a * b. Covariances are not composed here."""
    return Pose(a.rotation @ b.rotation,
                a.rotation @ b.translation + a.translation)


def exp(xi: np.ndarray) -> Pose:
    """SE(3) exponential of a twist [rotation; translation]."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError("twist must be a 6-vector")
    w, rho = xi[:3], xi[3:]
    R = exp_so3(w)
    t = _left_jacobian_so3(w) @ rho
    return Pose(R, t)


def log(p: Pose) -> np.ndarray:
    """SE(3) logarithm; inverse of exp away from the pi singularity."""
    w = log_so3(p.rotation)
    rho = _left_jacobian_inv_so3(w) @ p.translation
    return np.concatenate([w, rho])


def perturb(pose: Pose, xi: np.ndarray) -> Pose:
    """Apply a left-multiplicative tangent perturbation: exp(xi) * pose."""
    return compose(exp(xi), pose)


def incremental_translation_jacobians(pose_i: Pose,
                                      pose_j: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """Jacobians of translation(pose_j) - translation(pose_i).

    Derivatives are taken w.r.t. left-multiplicative tangent perturbations of
    each pose, so the translation blocks are exactly -I and +I and the
    rotation blocks are +/- hat(translation).
    """
    J_i = np.hstack([hat(pose_i.translation), -np.eye(3)])
    J_j = np.hstack([-hat(pose_j.translation), np.eye(3)])
    return J_i, J_j
