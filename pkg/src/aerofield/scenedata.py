"""Synthetic multi-altitude scenes and dataset manifest I/O.

The toy scene (checkerboard ground + colored boxes) has an analytic
ray-trace oracle, so generated images double as ground truth for tests.
Manifests use a "frames + transform_matrix" JSON layout so external
multi-scale captures can be mapped onto it with a field renaming.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose, Ray, pixel_directions, project

LOAD_ROTATION_TOL = 1e-3


class DatasetError(ValueError):
    """Malformed manifest, missing image, or invalid generation config."""


@dataclass(frozen=True)
class SceneSpec:
    checker_colors: tuple = ((0.85, 0.85, 0.85), (0.15, 0.15, 0.15))
    checker_period: float = 1.0
    boxes: tuple = ()
    sky_color: tuple = (0.6, 0.8, 1.0)
    ground_extent: float | None = None  # half-size of the checker patch; None = infinite

    def __post_init__(self):
        if self.checker_period <= 0:
            raise DatasetError("checker_period must be positive")
        for lo, hi, color in self.boxes:
            if not np.all(np.asarray(lo) < np.asarray(hi)):
                raise DatasetError(f"box min {lo} must be < max {hi} componentwise")
            _check_color(color)
        for c in self.checker_colors:
            _check_color(c)
        _check_color(self.sky_color)


def _check_color(c):
    if len(c) != 3 or not all(0.0 <= x <= 1.0 for x in c):
        raise DatasetError(f"colors must be RGB triples in [0,1], got {c}")


def default_scene() -> SceneSpec:
    """6x6 checker cells of period 1 plus three boxes of distinct color/height."""
    return SceneSpec(
        checker_colors=((0.9, 0.9, 0.85), (0.12, 0.12, 0.15)),
        checker_period=1.0,
        boxes=(
            ((-1.8, -1.2, 0.0), (-0.8, -0.2, 1.6), (0.85, 0.25, 0.2)),
            ((0.4, 0.6, 0.0), (1.6, 1.8, 0.9), (0.2, 0.6, 0.9)),
            ((0.8, -1.9, 0.0), (2.2, -0.7, 0.5), (0.25, 0.8, 0.3)),
        ),
        sky_color=(0.6, 0.8, 1.0),
        ground_extent=3.0,
    )


def default_intrinsics(size: int = 64) -> CameraIntrinsics:
    """Square pinhole camera; the narrow field of view keeps the whole
    scene inside the frustum from every default ring."""
    f = 1.5 * size
    c = (size - 1) / 2.0
    return CameraIntrinsics(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


def default_rings(count: int = 15):
    """Canonical three-altitude camera layout: (radius, elevation, count)."""
    return [(4.0, 45.0, count), (8.0, 50.0, count), (16.0, 55.0, count)]


def default_bounds(scene: SceneSpec) -> np.ndarray:
    """Axis-aligned scene bounds: ground patch footprint plus box tops."""
    ext = scene.ground_extent if scene.ground_extent is not None else 3 * scene.checker_period
    zmax = max([hi[2] for _, hi, _ in scene.boxes], default=0.0)
    zmax = max(zmax, 0.5)
    return np.array([[-ext, -ext, 0.0], [ext, ext, zmax]])


@dataclass(frozen=True)
class CameraFrame:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    intrinsics: CameraIntrinsics
    pose: Pose
    altitude_tag: int

    def __post_init__(self):
        h, w = self.image.shape[0], self.image.shape[1]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise DatasetError(
                f"image size {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}")


@dataclass
class LoadedDataset:
    frames: list
    intrinsics: CameraIntrinsics
    bounds: np.ndarray  # (2, 3) after normalization
    t_near: float
    t_far: float
    train_indices: list
    test_indices: list
    scale: float  # world units -> normalized units
    center: np.ndarray
    sky_color: tuple | None = None
    fingerprint: str = ""


# ---------------------------------------------------------------------------
# analytic tracer


def _trace_batch(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray,
                 t_near: float, t_far: float) -> np.ndarray:
    """Flat-shaded nearest-hit colors for a batch of rays, shape (N, 3)."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    colors = np.tile(np.asarray(scene.sky_color, dtype=np.float64), (n, 1))

    # ground plane z = 0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = -origins[:, 2] / dz
    hit = (np.abs(dz) > 1e-12) & (t_plane >= t_near) & (t_plane <= t_far)
    if scene.ground_extent is not None:
        px = origins[:, 0] + t_plane * dirs[:, 0]
        py = origins[:, 1] + t_plane * dirs[:, 1]
        hit &= (np.abs(px) <= scene.ground_extent) & (np.abs(py) <= scene.ground_extent)
    idx = np.where(hit)[0]
    if idx.size:
        px = origins[idx, 0] + t_plane[idx] * dirs[idx, 0]
        py = origins[idx, 1] + t_plane[idx] * dirs[idx, 1]
        parity = (np.floor(px / scene.checker_period).astype(np.int64)
                  + np.floor(py / scene.checker_period).astype(np.int64)) % 2
        cc = np.asarray(scene.checker_colors, dtype=np.float64)
        colors[idx] = cc[parity]
        best_t[idx] = t_plane[idx]

    # axis-aligned boxes (slab test)
    for lo, hi, color in scene.boxes:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        t_hit = np.where(tmin > t_near, tmin, tmax)  # allow origins inside the box
        hit = (tmax >= tmin) & (t_hit >= t_near) & (t_hit <= t_far) & (t_hit < best_t)
        colors[hit] = np.asarray(color, dtype=np.float64)
        best_t[hit] = t_hit[hit]

    return colors


def trace_ray(scene: SceneSpec, ray: Ray) -> np.ndarray:
    """Color of the nearest hit along `ray`, sky color if nothing is hit."""
    return _trace_batch(scene, ray.origin[None], ray.direction[None],
                        ray.t_near, ray.t_far)[0]


def render_scene_image(scene: SceneSpec, intr: CameraIntrinsics, pose: Pose,
                       t_near: float = 1e-3, t_far: float = 1e6) -> np.ndarray:
    """Trace every pixel; returns (H, W, 3) in [0, 1]."""
    dirs = pixel_directions(intr, pose).reshape(-1, 3)
    origins = np.tile(pose.translation, (dirs.shape[0], 1))
    img = _trace_batch(scene, origins, dirs, t_near, t_far)
    return np.clip(img.reshape(intr.height, intr.width, 3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# generation


def look_at_pose(position: np.ndarray, target: np.ndarray,
                 up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at `position` looking at `target`, image y pointing down."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f = f / np.linalg.norm(f)
    x = np.cross(np.asarray(up, dtype=np.float64), f)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DatasetError("look direction parallel to up vector")
    x /= nx
    z = -f
    y = np.cross(z, x)
    return Pose(rotation=np.stack([x, y, z], axis=1), translation=position)


def generate_dataset(scene: SceneSpec, rings, intr: CameraIntrinsics,
                     out_dir: str, seed: int = 0, test_every: int = 4,
                     bounds: np.ndarray | None = None) -> str:
    """Render ring cameras looking at the origin and write manifest + PNGs.

    `rings` is a list of (radius, elevation_degrees, count); radii must be
    strictly increasing. Every `test_every`-th frame of each ring goes to
    the test split. Returns the manifest path.
    """
    radii = [r for r, _, _ in rings]
    if any(r <= 0 for r in radii):
        raise DatasetError("ring radius must be positive")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise DatasetError("ring radii must be strictly increasing")
    if any(c < 1 for _, _, c in rings):
        raise DatasetError("every ring needs at least one camera")

    rng = np.random.default_rng(seed)
    if bounds is None:
        bounds = default_bounds(scene)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    frames = []
    max_radius = max(radii)
    for ring_idx, (radius, elev_deg, count) in enumerate(rings):
        phase = rng.uniform(0.0, 2 * math.pi)
        elev = math.radians(elev_deg)
        for j in range(count):
            az = phase + 2 * math.pi * j / count
            pos = np.array([radius * math.cos(elev) * math.cos(az),
                            radius * math.cos(elev) * math.sin(az),
                            radius * math.sin(elev)])
            pose = look_at_pose(pos, np.zeros(3))
            img = render_scene_image(scene, intr, pose)
            name = f"images/r{ring_idx}_{j:03d}.png"
            Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(
                os.path.join(out_dir, name))
            frames.append({
                "file": name,
                "transform": [float(x) for x in pose.matrix.reshape(-1)],
                "ring": ring_idx,
                "split": "test" if j % test_every == 0 else "train",
            })

    diag = float(np.linalg.norm(bounds[1] - bounds[0]))
    manifest = {
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                       "cy": intr.cy, "w": intr.width, "h": intr.height},
        "scale": 1.0,
        "bounds": [list(map(float, bounds[0])), list(map(float, bounds[1]))],
        "t_near": 0.05,
        "t_far": max_radius + diag,
        "sky_color": list(map(float, scene.sky_color)),
        "frames": frames,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return path


def save_dataset(ds: LoadedDataset, out_dir: str) -> str:
    """Write a LoadedDataset back to disk in manifest form (normalized units)."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    frames = []
    for i, frame in enumerate(ds.frames):
        name = f"images/f{i:04d}.png"
        Image.fromarray(np.round(frame.image * 255.0).astype(np.uint8)).save(
            os.path.join(out_dir, name))
        frames.append({
            "file": name,
            "transform": [float(x) for x in frame.pose.matrix.reshape(-1)],
            "ring": frame.altitude_tag,
            "split": "test" if i in set(ds.test_indices) else "train",
        })
    intr = ds.intrinsics
    manifest = {
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                       "cy": intr.cy, "w": intr.width, "h": intr.height},
        "scale": ds.scale,
        "bounds": [list(map(float, ds.bounds[0])), list(map(float, ds.bounds[1]))],
        "t_near": ds.t_near,
        "t_far": ds.t_far,
        "frames": frames,
    }
    if ds.sky_color is not None:
        manifest["sky_color"] = list(map(float, ds.sky_color))
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return path


# ---------------------------------------------------------------------------
# loading


def _orthonormalize(r: np.ndarray, name: str) -> np.ndarray:
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > LOAD_ROTATION_TOL or np.linalg.det(r) < 0:
        raise DatasetError(f"frame {name}: rotation block is not orthonormal "
                           f"(error {err:.2e}, det {np.linalg.det(r):.3f})")
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def load_manifest(path: str) -> LoadedDataset:
    """Load a manifest, decode images, and normalize the scene into [-1, 1]^3."""
    if not os.path.exists(path):
        raise DatasetError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    for key in ("intrinsics", "bounds", "frames"):
        if key not in data:
            raise DatasetError(f"manifest missing required field '{key}'")
    ii = data["intrinsics"]
    intr = CameraIntrinsics(fx=ii["fx"], fy=ii["fy"], cx=ii["cx"], cy=ii["cy"],
                            width=int(ii["w"]), height=int(ii["h"]))
    if not data["frames"]:
        raise DatasetError("manifest has no frames")

    bounds = np.asarray(data["bounds"], dtype=np.float64)
    center = bounds.mean(axis=0)
    half = (bounds[1] - bounds[0]) / 2.0
    scale = 1.0 / max(float(half.max()), 1e-12)

    base = os.path.dirname(os.path.abspath(path))
    frames, train_idx, test_idx = [], [], []
    for i, rec in enumerate(data["frames"]):
        name = rec.get("file", f"#{i}")
        for key in ("file", "transform", "split"):
            if key not in rec:
                raise DatasetError(f"frame {name}: missing required field '{key}'")
        m = np.asarray(rec["transform"], dtype=np.float64)
        if m.size != 16:
            raise DatasetError(f"frame {name}: transform must have 16 entries")
        m = m.reshape(4, 4)
        rot = _orthonormalize(m[:3, :3], name)
        pose = Pose(rotation=rot, translation=(m[:3, 3] - center) * scale)
        img_path = os.path.join(base, rec["file"])
        if not os.path.exists(img_path):
            raise DatasetError(f"frame {name}: image file missing: {img_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        frames.append(CameraFrame(image=img, intrinsics=intr, pose=pose,
                                  altitude_tag=int(rec.get("ring", 0))))
        (test_idx if rec["split"] == "test" else train_idx).append(i)
    if not train_idx or not test_idx:
        raise DatasetError("manifest needs at least one train and one test frame")

    norm_bounds = (bounds - center) * scale
    fp = hashlib.sha256(
        json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()[:16]
    return LoadedDataset(
        frames=frames,
        intrinsics=intr,
        bounds=norm_bounds,
        t_near=float(data.get("t_near", 0.05)) * scale,
        t_far=float(data.get("t_far", 2 * np.linalg.norm(bounds[1] - bounds[0]))) * scale,
        train_indices=train_idx,
        test_indices=test_idx,
        scale=scale * float(data.get("scale", 1.0)),
        center=center,
        sky_color=tuple(data["sky_color"]) if "sky_color" in data else None,
        fingerprint=fp,
    )
