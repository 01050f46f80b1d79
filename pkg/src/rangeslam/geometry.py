"""Rigid-body transforms, rotations and the pinhole camera.

Conventions:
    * A ``Pose`` maps camera coordinates into the World frame
      (``x_W = R_WC @ x_C + p_WC``).
    * Quaternions are stored scalar-first ``(w, x, y, z)`` internally; file
      I/O uses scalar-last and goes through ``as_xyzw``/``from_xyzw``.
    * Local updates (``retract``) take a 6-vector ``(d_theta, d_t)``. The
      rotation increment is applied on the right (body frame), the
      translation increment is added in the World frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import BehindCameraError

DEPTH_EPSILON = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, batched over leading dimensions."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) scalar-first quaternions."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation vector, batched."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    # sin(theta/2)/theta, series below 1e-8 rad
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    w = np.cos(half)
    return np.concatenate([w[..., None], rotvec * k[..., None]], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of (..., 4) unit quaternions."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    m = np.empty(np.shape(w) + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Rotation:
    """3D rotation stored as a unit quaternion ``(w, x, y, z)``."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.array(self.quat, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion must be finite")
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        # keep bit-exact values when already unit so file round-trips are lossless
        if abs(n - 1.0) > 1e-15:
            q = q / n
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_xyzw(cls, q) -> Rotation:
        x, y, z, w = np.asarray(q, dtype=float)
        return cls(np.array([w, x, y, z]))

    @classmethod
    def from_rotvec(cls, rotvec) -> Rotation:
        return cls(quat_exp(np.asarray(rotvec, dtype=float).reshape(3)))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        """Shepperd's method; ``m`` must be (close to) orthonormal."""
        m = np.asarray(m, dtype=float)
        tr = np.trace(m)
        diag = np.diag(m)
        i = int(np.argmax(np.concatenate([[tr], diag])))
        if i == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif i == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif i == 2:
            s = 2.0 * np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        if q[0] < 0:
            q = -q
        return cls(q)

    @cached_property
    def matrix(self) -> np.ndarray:
        m = quat_to_matrix(self.quat)
        m.setflags(write=False)
        return m

    def as_xyzw(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array([x, y, z, w])

    def as_rotvec(self) -> np.ndarray:
        q = self.quat if self.quat[0] >= 0 else -self.quat
        v = q[1:]
        s = np.linalg.norm(v)
        if s < 1e-12:
            return 2.0 * v / q[0]
        return v / s * 2.0 * np.arctan2(s, q[0])

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix.T

    def inverse(self) -> Rotation:
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation(_normalize(quat_multiply(self.quat, other.quat)))

    def angle_to(self, other: Rotation) -> float:
        """Geodesic distance in radians."""
        d = abs(float(np.dot(self.quat, other.quat)))
        return 2.0 * np.arccos(min(1.0, d))

    def __repr__(self) -> str:
        return f"Rotation(wxyz={np.array2string(self.quat, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-World rigid transform."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, x) -> np.ndarray:
        """Camera coordinates to World coordinates."""
        return self.rotation.apply(x) + self.translation

    camera_to_world = apply

    def world_to_camera(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.translation) @ self.rotation.matrix

    def inverse(self) -> Pose:
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def scaled(self, alpha: float) -> Pose:
        return Pose(self.rotation, alpha * self.translation)

    def __repr__(self) -> str:
        return f"Pose({self.rotation!r}, t={np.array2string(self.translation, precision=6)})"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose with ``compose(a, b).apply(x) == a.apply(b.apply(x))``."""
    return Pose(a.rotation * b.rotation, a.rotation.apply(b.translation) + a.translation)


def retract(pose: Pose, delta) -> Pose:
    """Apply a local 6-vector update ``(d_theta, d_t)``."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    q = _normalize(quat_multiply(pose.rotation.quat, quat_exp(delta[:3])))
    return Pose(Rotation(q), pose.translation + delta[3:])


def poses_allclose(a: Pose, b: Pose, atol: float = 1e-9) -> bool:
    return bool(
        np.allclose(a.translation, b.translation, rtol=0.0, atol=atol)
        and np.allclose(a.rotation.matrix, b.rotation.matrix, rtol=0.0, atol=atol)
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0.0)
            & (uv[..., 0] <= self.width)
            & (uv[..., 1] >= 0.0)
            & (uv[..., 1] <= self.height)
        )


def project(K: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Pixel coordinates of a World-frame point.

    Raises:
        BehindCameraError: if the camera-frame depth is at most 1e-6 m.
    """
    xc = pose.world_to_camera(point)
    if xc[2] <= DEPTH_EPSILON:
        raise BehindCameraError(f"point at depth {xc[2]:.3g} m is behind the camera")
    return np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy])


def project_points(K: CameraIntrinsics, rotations: np.ndarray, translations: np.ndarray, points: np.ndarray):
    """Vectorized projection.

    ``rotations`` is (..., 3, 3) camera-to-World, ``translations`` and
    ``points`` broadcast to (..., 3). Returns ``(uv, depth)``; pixels of
    points at or behind ``DEPTH_EPSILON`` are NaN.
    """
    xc = np.einsum("...ji,...j->...i", rotations, points - translations)
    z = xc[..., 2]
    ok = z > DEPTH_EPSILON
    zs = np.where(ok, z, np.nan)
    uv = np.stack([K.fx * xc[..., 0] / zs + K.cx, K.fy * xc[..., 1] / zs + K.cy], axis=-1)
    return uv, z
