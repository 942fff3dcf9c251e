"""Rigid-body poses, quaternion utilities, and pinhole ray generation.

Conventions used throughout the package:
  camera frame  : +z forward (optical axis), +x right, +y down
  pose          : camera-to-world transform (rotation q, translation x)
  quaternion    : (w, x, y, z), unit norm, canonicalized to w >= 0
  units         : meters for translation, degrees for reported angles
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_EPS = 1e-12


def normalize_quat(q) -> np.ndarray:
    """Unit quaternion with non-negative w; rejects near-zero input."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    n = float(np.linalg.norm(q))
    if n < 1e-9:
        raise ValueError("quaternion norm is numerically zero")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_mul(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion q; v is (3,) or (N, 3)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w, u = q[0], q[1:]
    single = v.ndim == 1
    vv = v[None, :] if single else v
    t = 2.0 * np.cross(u, vv)
    out = vv + w * t + np.cross(u, t)
    return out[0] if single else out


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's branch selection)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return normalize_quat(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle_rad
    return normalize_quat(np.concatenate([[math.cos(h)], math.sin(h) * axis]))


def slerp(q0, q1, alpha: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc; alpha in [0, 1]."""
    q0 = normalize_quat(q0)
    q1 = normalize_quat(q1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    d = min(d, 1.0)
    if d > 1.0 - 1e-10:
        return normalize_quat(q0 + alpha * (q1 - q0))
    theta = math.acos(d)
    s = math.sin(theta)
    return normalize_quat((math.sin((1 - alpha) * theta) / s) * q0 +
                          (math.sin(alpha * theta) / s) * q1)


class Pose:
    """Camera-to-world rigid transform: rotation quaternion q, translation x."""

    __slots__ = ("q", "x")

    def __init__(self, q, x):
        self.q = normalize_quat(q)
        self.x = np.asarray(x, dtype=np.float64).reshape(3).copy()

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.x
        return m

    def __repr__(self):
        return f"Pose(q={np.round(self.q, 6)}, x={np.round(self.x, 6)})"


# relative sensor mounting is just another rigid transform
Extrinsic = Pose


def compose_pose(a: Pose, b: Pose) -> Pose:
    """a then b applied in a's frame: world_from_b = a * b."""
    return Pose(quat_mul(a.q, b.q), a.x + quat_rotate(a.q, b.x))


def invert_pose(a: Pose) -> Pose:
    qi = quat_conj(a.q)
    return Pose(qi, -quat_rotate(qi, a.x))


def rgb_to_depth_pose(rgb_pose: Pose, extrinsic: Pose) -> Pose:
    """World pose of the depth sensor given the RGB pose and rig extrinsic."""
    return compose_pose(rgb_pose, extrinsic)


def pose_error(est: Pose, gt: Pose) -> tuple:
    """(rotation error degrees, translation error meters); symmetric in args."""
    trans = float(np.linalg.norm(est.x - gt.x))
    d = abs(float(np.dot(est.q, gt.q)))
    d = min(d, 1.0)
    rot = math.degrees(2.0 * math.acos(d))
    return rot, trans


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    near: float = 0.0
    far: float = math.inf

    def __post_init__(self):
        if not (0 <= self.near < self.far):
            raise ValueError(f"require 0 <= near < far, got ({self.near}, {self.far})")


def ray_from_pixel(pose: Pose, k: Intrinsics, u, v, near: float = 0.0, far: float = math.inf) -> Ray:
    """World-space ray through the center of pixel (u, v)."""
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise ValueError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d_cam = np.array([(u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0])
    d_cam /= np.linalg.norm(d_cam)
    d = quat_rotate(pose.q, d_cam)
    return Ray(pose.x.copy(), d, near, far)


def camera_dirs(k: Intrinsics) -> np.ndarray:
    """Unit camera-frame directions for all pixel centers, row-major (H*W, 3)."""
    u = np.arange(k.width) + 0.5
    v = np.arange(k.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d.reshape(-1, 3)


def camera_rays(pose: Pose, k: Intrinsics) -> tuple:
    """(origin (3,), world unit directions (H*W, 3)) for all pixels."""
    d = quat_rotate(pose.q, camera_dirs(k))
    return pose.x.copy(), d


# ---------------------------------------------------------------------------
# CSV pose serialization: one row per sample, t,x,y,z,qw,qx,qy,qz


def pose_row(t: float, pose: Pose) -> list:
    return [repr(float(t))] + [repr(float(v)) for v in pose.x] + [repr(float(v)) for v in pose.q]


def parse_pose_row(row) -> tuple:
    if len(row) != 8:
        raise ValueError(f"pose row needs 8 fields t,x,y,z,qw,qx,qy,qz, got {len(row)}")
    vals = [float(v) for v in row]
    return vals[0], Pose(np.array(vals[4:8]), np.array(vals[1:4]))


def save_pose_csv(path, times, poses):
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y", "z", "qw", "qx", "qy", "qz"])
        for t, p in zip(times, poses):
            w.writerow(pose_row(t, p))


def load_pose_csv(path) -> tuple:
    path = Path(path)
    times, poses = [], []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header is None or header[0] != "t":
            raise ValueError(f"{path}: missing pose CSV header")
        for i, row in enumerate(r):
            if not row:
                continue
            try:
                t, p = parse_pose_row(row)
            except ValueError as e:
                raise ValueError(f"{path}:{i + 2}: {e}") from None
            times.append(t)
            poses.append(p)
    return np.array(times), poses
