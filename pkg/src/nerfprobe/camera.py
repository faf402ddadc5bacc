"""Pinhole cameras, hemisphere pose sampling, and ray generation.

Camera convention: right-handed, camera looks down -z, y up, x right.
Pixel (row, col) indexes from the top-left; ray directions go through pixel
centers (row + 0.5, col + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

DEFAULT_RESOLUTION = 64
DEFAULT_FOV_DEG = 55.0
BOUNDS_INFLATE = 1.10  # near/far come from a +10% inflated scene box


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass
class CameraPose:
    position: Array            # (3,)
    rotation: Array            # (3,3) world-from-camera
    intrinsics: Intrinsics


@dataclass
class Ray:
    origin: Array
    direction: Array
    pixel: tuple[int, int]
    near: float
    far: float


@dataclass
class RayBundle:
    """Flat batch of rays from one pose."""

    origins: Array     # (n,3)
    directions: Array  # (n,3) unit
    rows: Array        # (n,) int
    cols: Array        # (n,) int
    near: Array        # (n,)
    far: Array         # (n,)

    def __len__(self) -> int:
        return len(self.directions)


def default_intrinsics(width: int = DEFAULT_RESOLUTION, height: int | None = None,
                       fov_deg: float = DEFAULT_FOV_DEG) -> Intrinsics:
    height = width if height is None else height
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def _camera_dirs(intr: Intrinsics, rows: Array, cols: Array) -> Array:
    u = cols + 0.5
    v = rows + 0.5
    d = np.stack([
        (u - intr.cx) / intr.fx,
        -(v - intr.cy) / intr.fy,
        -np.ones_like(u, dtype=np.float64),
    ], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _inflated_bounds(bounds_min: Array, bounds_max: Array) -> tuple[Array, Array]:
    center = 0.5 * (bounds_min + bounds_max)
    half = 0.5 * (bounds_max - bounds_min) * BOUNDS_INFLATE
    return center - half, center + half


def _slab_near_far(origin: Array, dirs: Array, bmin: Array, bmax: Array) -> tuple[Array, Array]:
    """Entry/exit distances of rays through an AABB; misses get a fallback span."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (bmin[None, :] - origin[None, :]) * inv
    t1 = (bmax[None, :] - origin[None, :]) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(tmin, 0.0)
    far = tmax
    miss = far <= near
    if miss.any():
        center = 0.5 * (bmin + bmax)
        span = float(np.linalg.norm(origin - center) + np.linalg.norm(bmax - bmin))
        near[miss] = 0.0
        far[miss] = span
    return near, far


def ray_for_pixel(pose: CameraPose, row: int, col: int,
                  bounds: tuple[Array, Array] | None = None) -> Ray:
    """Back-project one pixel center into a world ray."""
    intr = pose.intrinsics
    if not (0 <= row < intr.height and 0 <= col < intr.width):
        raise ValueError(f"pixel ({row}, {col}) outside {intr.height}x{intr.width} image")
    bundle = rays_for_pixels(pose, np.array([row]), np.array([col]), bounds)
    return Ray(origin=bundle.origins[0], direction=bundle.directions[0],
               pixel=(row, col), near=float(bundle.near[0]), far=float(bundle.far[0]))


def rays_for_pixels(pose: CameraPose, rows: Array, cols: Array,
                    bounds: tuple[Array, Array] | None = None) -> RayBundle:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    intr = pose.intrinsics
    if rows.size and (rows.min() < 0 or rows.max() >= intr.height
                      or cols.min() < 0 or cols.max() >= intr.width):
        raise ValueError("pixel indices outside image")
    d_cam = _camera_dirs(intr, rows.astype(np.float64), cols.astype(np.float64))
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    if bounds is not None:
        bmin, bmax = _inflated_bounds(np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        near, far = _slab_near_far(pose.position, d_world, bmin, bmax)
    else:
        near = np.zeros(len(rows))
        far = np.full(len(rows), 10.0)
    origins = np.broadcast_to(pose.position, d_world.shape).copy()
    return RayBundle(origins=origins, directions=d_world, rows=rows, cols=cols,
                     near=near, far=far)


def rays_for_view(pose: CameraPose, bounds=None) -> RayBundle:
    """All pixel rays of a pose, row-major."""
    intr = pose.intrinsics
    rows, cols = np.mgrid[0:intr.height, 0:intr.width]
    return rays_for_pixels(pose, rows.ravel(), cols.ravel(), bounds)


def project(pose: CameraPose, point: Array) -> tuple[float, float]:
    """World point -> fractional (row, col); inverse of ray_for_pixel at centers."""
    p_cam = pose.rotation.T @ (np.asarray(point, float) - pose.position)
    z = -p_cam[2]
    if z <= 0:
        raise ValueError("point behind camera")
    intr = pose.intrinsics
    u = intr.cx + intr.fx * (p_cam[0] / z)
    v = intr.cy - intr.fy * (p_cam[1] / z)
    return v - 0.5, u - 0.5


def look_at(position: Array, target: Array, up=(0.0, 0.0, 1.0)) -> Array:
    """World-from-camera rotation with -z pointing from position to target."""
    position = np.asarray(position, float)
    target = np.asarray(target, float)
    z_cam = position - target
    z_cam = z_cam / np.linalg.norm(z_cam)
    up = np.asarray(up, float)
    x_cam = np.cross(up, z_cam)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-9:  # looking straight down: pick arbitrary horizontal x
        x_cam = np.array([1.0, 0.0, 0.0])
    else:
        x_cam = x_cam / nx
    y_cam = np.cross(z_cam, x_cam)
    return np.stack([x_cam, y_cam, z_cam], axis=1)


def sample_poses(scene, n: int, seed: int, *,
                 elevation_deg: tuple[float, float] = (15.0, 75.0),
                 radius_scale: float = 1.25,
                 intrinsics: Intrinsics | None = None) -> list[CameraPose]:
    """Poses on an upper hemisphere around the scene center, all looking at it.

    Radius is radius_scale times the bounds diagonal; elevation stays in a
    band that avoids grazing and top-down degenerate views.
    """
    if n < 1:
        raise ValueError("need at least one pose")
    rng = np.random.default_rng(seed)
    center = 0.5 * (scene.bounds_min + scene.bounds_max)
    radius = radius_scale * float(np.linalg.norm(scene.bounds_max - scene.bounds_min))
    intr = intrinsics or default_intrinsics()
    ground_h = scene.ground.height

    poses = []
    for i in range(n):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        elev = np.deg2rad(rng.uniform(*elevation_deg))
        offset = radius * np.array([
            np.cos(elev) * np.cos(azimuth),
            np.cos(elev) * np.sin(azimuth),
            np.sin(elev),
        ])
        position = center + offset
        if position[2] <= ground_h:
            position[2] = ground_h + 0.1 * radius
        poses.append(CameraPose(position=position, rotation=look_at(position, center),
                                intrinsics=intr))
    return poses


def pose_to_dict(pose: CameraPose) -> dict:
    intr = pose.intrinsics
    return {
        "position": pose.position.tolist(),
        "rotation": pose.rotation.reshape(-1).tolist(),
        "intrinsics": {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
        },
    }


def pose_from_dict(doc: dict) -> CameraPose:
    intr = doc["intrinsics"]
    return CameraPose(
        position=np.asarray(doc["position"], dtype=np.float64),
        rotation=np.asarray(doc["rotation"], dtype=np.float64).reshape(3, 3),
        intrinsics=Intrinsics(fx=float(intr["fx"]), fy=float(intr["fy"]),
                              cx=float(intr["cx"]), cy=float(intr["cy"]),
                              width=int(intr["width"]), height=int(intr["height"])),
    )
