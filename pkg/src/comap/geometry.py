"""Rigid transforms, pinhole cameras, AABB helpers and orbit trajectories.

Conventions: world is right-handed with z up; camera follows the OpenCV
convention (x right, y down, z forward), poses are 4x4 camera-to-world;
depth images store camera-z depth, not ray length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


def identity_pose() -> np.ndarray:
    return np.eye(4, dtype=np.float64)


def make_pose(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    pose = np.eye(4, dtype=np.float64)
    pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def rotation_xyz(degrees: tuple[float, float, float] | np.ndarray) -> np.ndarray:
    """Intrinsic x-y-z Euler rotation matrix from degrees."""
    ax, ay, az = (math.radians(float(a)) for a in degrees)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def invert_pose(pose: np.ndarray) -> np.ndarray:
    r = pose[:3, :3]
    t = pose[:3, 3]
    inv = np.eye(4, dtype=np.float64)
    inv[:3, :3] = r.T
    inv[:3, 3] = -r.T @ t
    return inv


def transform_points(pose: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ pose[:3, :3].T + pose[:3, 3]


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None) -> np.ndarray:
    """Camera-to-world pose with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ContractError("look_at eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # forward parallel to up: pick any orthogonal right vector
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return make_pose(rotation, eye)


def orbit_poses(
    center: np.ndarray,
    radius: float,
    height: float,
    azimuth_deg: tuple[float, float],
    n_frames: int,
) -> list[np.ndarray]:
    """Look-at poses along a horizontal circular arc around center."""
    if n_frames < 1:
        raise ContractError("orbit needs at least one frame")
    center = np.asarray(center, dtype=np.float64)
    a0, a1 = (math.radians(a) for a in azimuth_deg)
    ts = np.linspace(a0, a1, n_frames) if n_frames > 1 else np.array([0.5 * (a0 + a1)])
    poses = []
    for a in ts:
        eye = center + np.array([radius * math.cos(a), radius * math.sin(a), height])
        poses.append(look_at(eye, center))
    return poses


def pixel_rays(intr: Intrinsics, width: int, height: int, pose: np.ndarray):
    """World-space ray origin and per-pixel unnormalized directions.

    Directions have unit camera-z so the ray parameter equals camera-z depth.
    Returns (origin (3,), dirs (H, W, 3)).
    """
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    )
    dirs_world = dirs_cam @ pose[:3, :3].T
    return pose[:3, 3].copy(), dirs_world


def pixel_ray(intr: Intrinsics, pose: np.ndarray, u: float, v: float):
    """Single-pixel world ray: (origin, unit direction, z-to-ray-length factor)."""
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    norm = float(np.linalg.norm(d_cam))
    d_world = pose[:3, :3] @ (d_cam / norm)
    return pose[:3, 3].copy(), d_world, norm


def aabb_union(aabbs: list[np.ndarray]) -> np.ndarray:
    if not aabbs:
        raise ContractError("aabb_union of nothing")
    lo = np.min([a[0] for a in aabbs], axis=0)
    hi = np.max([a[1] for a in aabbs], axis=0)
    return np.stack([lo, hi])


def aabb_contains(outer: np.ndarray, inner: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.all(inner[0] >= outer[0] - tol) and np.all(inner[1] <= outer[1] + tol))


def points_aabb(points: np.ndarray, pad: float = 0.0) -> np.ndarray:
    lo = points.min(axis=0) - pad
    hi = points.max(axis=0) + pad
    return np.stack([lo, hi])


def ray_aabb_clip(
    origin: np.ndarray, direction: np.ndarray, aabb: np.ndarray
) -> tuple[float, float] | None:
    """Slab intersection of a ray with an AABB; returns (t0, t1) with t0 >= 0, or None."""
    parallel = direction == 0.0
    outside = parallel & ((origin < aabb[0]) | (origin > aabb[1]))
    if np.any(outside):
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t_lo = (aabb[0] - origin) * inv
        t_hi = (aabb[1] - origin) * inv
    t0 = float(np.max(np.where(parallel, -np.inf, np.minimum(t_lo, t_hi))))
    t1 = float(np.min(np.where(parallel, np.inf, np.maximum(t_lo, t_hi))))
    t0 = max(t0, 0.0)
    if t1 <= t0:
        return None
    return t0, t1
