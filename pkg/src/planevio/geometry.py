"""Rigid-transform and pinhole-camera primitives shared by all modules.

Conventions
-----------
A ``Pose`` maps points from its ``from_frame`` into its ``to_frame``:
``p_to = R @ p_from + t``.  Rotations are stored as 3x3 matrices;
quaternions appear only at file-I/O boundaries.  Frame labels are
optional metadata: composition checks them only when both sides carry
one, so hot loops can pass unlabeled poses at zero cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class FrameMismatchError(ValueError):
    """Composing poses whose shared frame labels disagree."""


class BehindCameraError(ValueError):
    """Projecting a point with non-positive camera-frame depth."""


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)
    from_frame: str | None = None
    to_frame: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must be length 3, got {self.translation.shape}")

    @staticmethod
    def identity(from_frame=None, to_frame=None) -> "Pose":
        return Pose(np.eye(3), np.zeros(3), from_frame, to_frame)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) block of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T: np.ndarray, from_frame=None, to_frame=None) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3].copy(), T[:3, 3].copy(), from_frame, to_frame)

    def __repr__(self):
        tag = ""
        if self.from_frame or self.to_frame:
            tag = f" {self.from_frame}->{self.to_frame}"
        return f"Pose({tag} t={np.array2string(self.translation, precision=4)})"


def compose(a_to_b: Pose, b_to_c: Pose) -> Pose:
    """Chain two poses: result maps frame a directly into frame c."""
    if (a_to_b.to_frame is not None and b_to_c.from_frame is not None
            and a_to_b.to_frame != b_to_c.from_frame):
        raise FrameMismatchError(
            f"cannot chain {a_to_b.from_frame}->{a_to_b.to_frame} "
            f"with {b_to_c.from_frame}->{b_to_c.to_frame}")
    return Pose(b_to_c.rotation @ a_to_b.rotation,
                b_to_c.rotation @ a_to_b.translation + b_to_c.translation,
                a_to_b.from_frame, b_to_c.to_frame)


def inverse(pose: Pose) -> Pose:
    """Rigid inverse: R' = R^T, t' = -R^T t, frame labels swapped."""
    Rt = pose.rotation.T
    return Pose(Rt, -Rt @ pose.translation, pose.to_frame, pose.from_frame)


def to_homogeneous(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.append(v, 1.0)


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, series fallback below 1e-8 rad."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation-vector log; handles the theta -> 0 and theta -> pi branches."""
    R = np.asarray(R, dtype=float)
    trace = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(trace)
    if theta < 1e-8:
        # first-order: R ~ I + skew(phi)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta > math.pi - 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from
        # the symmetric part R ~ 2 n n^T - I
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        k = int(np.argmax(axis))
        axis = A[:, k] / max(axis[k], 1e-12)
        axis /= np.linalg.norm(axis)
        # fix the sign using the off-diagonal antisymmetric residue
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if w @ axis < 0.0:
            axis = -axis
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * w


def so3_right_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): d/d(delta) log(exp(phi)exp(delta)) at 0."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-5:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        c = 1.0 / (theta * theta) - math.cos(half) / (2.0 * theta * math.sin(half))
    return np.eye(3) + 0.5 * W + c * (W @ W)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): exp(phi + d) ~ exp(phi) exp((J_r d)^)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * W + b * (W @ W)


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def ray(self, px: Pixel) -> np.ndarray:
        """K^-1 [u, v, 1]: unit-depth camera ray through a pixel."""
        return np.array([(px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0])


def project(intr: CameraIntrinsics, p_cam: np.ndarray) -> Pixel:
    """Pinhole projection of a camera-frame point; depth must be positive."""
    x, y, z = p_cam
    if z <= 0.0:
        raise BehindCameraError(f"non-positive depth {z}")
    return Pixel(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def backproject(intr: CameraIntrinsics, px: Pixel, depth: float) -> np.ndarray:
    """Camera-frame point at the given depth along the pixel's ray."""
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    return depth * intr.ray(px)
