"""Pinhole camera models, ray generation, projection and bilinear sampling.

Conventions (used everywhere in this package):
  * right-handed world frame, camera looks down its local -z axis,
    image y grows downward;
  * poses are camera-to-world;
  * pixel coordinate (0, 0) is the *center* of the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_EPS = 1e-6
ROTATION_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid geometric input (bad intrinsics, non-orthonormal rotation, ...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: rotation (3x3) and camera center (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > ROTATION_TOL or abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def extrinsic3x4(self) -> np.ndarray:
        """3x4 world-to-camera matrix [R^T | -R^T t]."""
        rt = self.rotation.T
        return np.concatenate([rt, (-rt @ self.translation)[:, None]], axis=1)

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """World points -> camera frame. Accepts (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points -> world frame. Accepts (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(rotation=m[:3, :3].copy(), translation=m[:3, 3].copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose(rotation=np.eye(3), translation=np.zeros(3))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise GeometryError(f"ray direction must be unit length, |d| = {n}")
        if not (0 <= self.t_near < self.t_far):
            raise GeometryError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class PixelCoord:
    """Continuous pixel coordinate; may lie outside the image."""

    u: float
    v: float


def ray_for_pixel(intr: CameraIntrinsics, pose: Pose, u: float, v: float,
                  t_near: float = 0.1, t_far: float = 10.0) -> Ray:
    """Ray from the camera center through pixel (u, v)."""
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, -1.0])
    d_world = pose.rotation @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=pose.translation.copy(), direction=d_world,
               t_near=t_near, t_far=t_far)


def pixel_directions(intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Unit world-space ray directions for every pixel, shape (H, W, 3)."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - intr.cx) / intr.fx,
                  (vv - intr.cy) / intr.fy,
                  -np.ones_like(uu)], axis=-1)
    d = d @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project(point: np.ndarray, intr: CameraIntrinsics, pose: Pose):
    """Project a world point.

    Returns (PixelCoord, depth, valid). depth is distance along the optical
    axis; valid requires depth > DEPTH_EPS and the coordinate inside
    [0, W-1] x [0, H-1]. Behind-camera / out-of-frame points are reported
    with valid=False, never clamped.
    """
    p_cam = pose.inverse_apply(np.asarray(point, dtype=np.float64).reshape(3))
    depth = -p_cam[2]
    if depth > DEPTH_EPS:
        u = intr.cx + intr.fx * p_cam[0] / depth
        v = intr.cy + intr.fy * p_cam[1] / depth
    else:
        # direction is degenerate at the camera plane; still report something
        u = intr.cx + intr.fx * p_cam[0]
        v = intr.cy + intr.fy * p_cam[1]
    valid = (depth > DEPTH_EPS
             and 0.0 <= u <= intr.width - 1
             and 0.0 <= v <= intr.height - 1)
    return PixelCoord(u=float(u), v=float(v)), float(depth), bool(valid)


def project_points(points: np.ndarray, intr: CameraIntrinsics, pose: Pose):
    """Vectorized `project` over (N, 3) points -> (uv (N,2), depth (N,), valid (N,))."""
    p_cam = pose.inverse_apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = -p_cam[:, 2]
    safe = np.where(depth > DEPTH_EPS, depth, 1.0)
    u = intr.cx + intr.fx * p_cam[:, 0] / safe
    v = intr.cy + intr.fy * p_cam[:, 1] / safe
    valid = ((depth > DEPTH_EPS)
             & (u >= 0.0) & (u <= intr.width - 1)
             & (v >= 0.0) & (v <= intr.height - 1))
    return np.stack([u, v], axis=-1), depth, valid


def bilinear_sample(grid: np.ndarray, coord: PixelCoord) -> np.ndarray:
    """Bilinear blend of the four texels surrounding `coord` on an (H, W, C) grid.

    The coordinate must lie inside [0, W-1] x [0, H-1]; callers gate on
    projection validity.
    """
    h, w = grid.shape[0], grid.shape[1]
    u, v = coord.u, coord.v
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise GeometryError(f"sample coordinate ({u}, {v}) outside [0,{w - 1}]x[0,{h - 1}]")
    u0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    du, dv = u - u0, v - v0
    top = (1 - du) * grid[v0, u0] + du * grid[v0, u1]
    bot = (1 - du) * grid[v1, u0] + du * grid[v1, u1]
    return (1 - dv) * top + dv * bot
