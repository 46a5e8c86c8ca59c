"""SE(3) and plane algebra shared by the odometry, mapping and graph modules.

Conventions:
    - A twist is a 6-vector [wx wy wz vx vy vz] (rotation first, radians/meters).
    - A plane is (n, d) with unit normal n and offset d such that n.p + d = 0.
    - Poses map sensor-frame points into the parent frame: p' = R p + t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8
_LOG_ANGLE_LIMIT = np.pi - 1e-6


class GeometryError(ValueError):
    """Domain error: log map at pi, antipodal plane normals, zero normal."""


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a series fallback for small angles."""
    theta = float(np.linalg.norm(w))
    k = hat(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * k2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of R. Raises GeometryError for angles at pi."""
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta >= _LOG_ANGLE_LIMIT:
        raise GeometryError("rotation angle too close to pi for the log map")
    if theta < _SMALL_ANGLE:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    scale = theta / (2.0 * np.sin(theta))
    return scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = hat(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * k2


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = hat(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    t2 = theta * theta
    b = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + b * k2


@dataclass(frozen=True)
class Pose:
    """Rigid transform with rotation matrix r (3x3) and translation t (3,)."""

    r: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.r @ other.r, self.r @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.r.T
        return Pose(rt, -rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        return points @ self.r.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        return Pose(np.array(m[:3, :3]), np.array(m[:3, 3]))

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.abs(self.r @ self.r.T - np.eye(3)).max() <= tol
        return bool(ortho and abs(np.linalg.det(self.r) - 1.0) <= tol)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist [w, v]."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Twist [w, v] of a pose. Raises GeometryError near angle pi."""
    w = so3_log(pose.r)
    v = so3_left_jacobian_inv(w) @ pose.t
    return np.concatenate([w, v])


def se3_adjoint(pose: Pose) -> np.ndarray:
    """Adjoint in [w, v] ordering: Exp(Ad_T xi) = T Exp(xi) T^-1."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = pose.r
    ad[3:, 3:] = pose.r
    ad[3:, :3] = hat(pose.t) @ pose.r
    return ad


def _se3_q_matrix(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Translation block of the SE(3) left Jacobian (Barfoot's Q)."""
    theta = float(np.linalg.norm(w))
    vh = hat(v)
    wh = hat(w)
    wv = wh @ vh
    vw = vh @ wh
    wvw = wv @ wh
    if theta < 1e-4:
        c1 = 1.0 / 6.0
        c2 = 1.0 / 24.0
        c3 = 1.0 / 120.0
    else:
        t2 = theta * theta
        t3 = t2 * theta
        c1 = (theta - np.sin(theta)) / t3
        c2 = (1.0 - 0.5 * t2 - np.cos(theta)) / (t2 * t2)
        c3 = c2 - 3.0 * (theta - np.sin(theta) - t3 / 6.0) / (t2 * t3)
    q = 0.5 * vh
    q += c1 * (wv + vw + wh @ vh @ wh)
    q -= c2 * (wh @ wv + vw @ wh - 3.0 * wh @ vh @ wh)
    q -= 0.5 * c3 * (wvw @ wh + wh @ wvw)
    return q


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    jw = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = jw
    out[3:, 3:] = jw
    out[3:, :3] = _se3_q_matrix(v, w)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    jw_inv = so3_left_jacobian_inv(w)
    q = _se3_q_matrix(v, w)
    out = np.zeros((6, 6))
    out[:3, :3] = jw_inv
    out[3:, 3:] = jw_inv
    out[3:, :3] = -jw_inv @ q @ jw_inv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """ZYX Euler angles to rotation matrix: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def matrix_to_rpy(r: np.ndarray) -> tuple[float, float, float]:
    """Inverse of rpy_to_matrix away from the pitch = +/-90 deg singularity."""
    sp = -r[2, 0]
    cp = np.sqrt(max(0.0, 1.0 - sp * sp))
    pitch = float(np.arctan2(sp, cp))
    if cp > 1e-9:
        roll = float(np.arctan2(r[2, 1], r[2, 2]))
        yaw = float(np.arctan2(r[1, 0], r[0, 0]))
    else:
        roll = 0.0
        yaw = float(np.arctan2(-r[0, 1], r[1, 1]))
    return roll, pitch, yaw


@dataclass(frozen=True)
class Plane:
    """Plane n.p + d = 0 with unit normal, canonical sign (see make_plane)."""

    n: np.ndarray
    d: float


@dataclass(frozen=True)
class PlaneError:
    """Tangent-space plane difference: normal part (2,) and offset part."""

    normal: np.ndarray
    offset: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.normal[0], self.normal[1], self.offset])


def make_plane(n: np.ndarray, d: float) -> Plane:
    """Normalize and fix the (n, d) ~ (-n, -d) sign ambiguity.

    The canonical representative has the largest-magnitude normal component
    non-negative.
    """
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise GeometryError("zero-length plane normal")
    n = n / norm
    d = float(d) / norm
    idx = int(np.argmax(np.abs(n)))
    if n[idx] < 0.0:
        n = -n
        d = -d
    return Plane(n, d)


def orient_up(plane: Plane) -> Plane:
    """Flip a plane so its normal has positive z (water-surface convention)."""
    if plane.n[2] < 0.0:
        return Plane(-plane.n, -plane.d)
    return plane


def transform_plane(pose: Pose, plane: Plane) -> Plane:
    """Map a plane through a rigid transform: n' = R n, d' = d - n'.t."""
    n_new = pose.r @ plane.n
    d_new = plane.d - float(n_new @ pose.t)
    return make_plane(n_new, d_new)


def tangent_basis(n: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis (3x2) of the tangent plane at n.

    Householder construction: the reflection mapping n onto +/-e_z carries
    e_x, e_y into tangent directions.
    """
    s = 1.0 if n[2] >= 0.0 else -1.0
    w = n + s * np.array([0.0, 0.0, 1.0])
    q = float(w @ w)
    b = np.empty((3, 2))
    b[:, 0] = -2.0 * w[0] * w / q
    b[:, 1] = -2.0 * w[1] * w / q
    b[0, 0] += 1.0
    b[1, 1] += 1.0
    return b


def _angle_scale(c: float) -> float:
    """-arccos(c)/sqrt(1-c^2), with its limit -1 near c = 1."""
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    if theta < 1e-6:
        return -(1.0 + theta * theta / 6.0)
    return -theta / np.sqrt(max(1.0 - c * c, 1e-32))


def plane_error(estimate: Plane, predicted: Plane) -> PlaneError:
    """Tangent-space difference between two planes.

    The normal part is the 2D coordinate of the rotation taking the
    predicted normal onto the estimate's normal, expressed in the tangent
    basis at the estimate's normal; the offset part is d_est - d_pred.
    Raises GeometryError for antipodal normals, where the direction of the
    correction is undefined.
    """
    n_w = estimate.n
    n_hat = predicted.n
    c = float(n_w @ n_hat)
    if c < -1.0 + 1e-9:
        raise GeometryError("antipodal plane normals: tangent error undefined")
    xi = _angle_scale(c) * (n_hat - c * n_w)
    e_n = tangent_basis(n_w).T @ xi
    return PlaneError(e_n, estimate.d - predicted.d)
