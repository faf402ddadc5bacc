"""Condense density-weighted ray samples into a surface point cloud.

Four filters run in sequence: scene-bound filtering, density filtering,
surface sampling (first sample past an eta fraction of accumulated weight),
and RANSAC ground removal. Ray bookkeeping (weights, residual mass, ray ids)
is preserved so the cloud still supports volumetric rendering.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import camera as cam
from . import field as fld
from . import render as rnd

Array = np.ndarray


@dataclass
class ProbeConfig:
    eta: float = 0.2              # surface threshold; 0.5 suits cluttered scenes
    sigma_min: float = 1.0
    d_plane: float = 0.005        # ground removal band, sd(x, plane) < d_plane
    mode: str = "surface"         # "surface" keeps one point per ray, "proposal" keeps all
    n_coarse: int = 32
    n_fine: int = 8
    bounds_filter: bool = True
    ground_removal: bool = True
    ransac_planes: int = 100
    ransac_inlier_eps: float = 0.005


@dataclass
class GroundPlane:
    normal: Array  # unit, normal[2] > 0
    offset: float  # plane is normal . x = offset
    inlier_count: int

    def signed_distance(self, points: Array) -> Array:
        return np.atleast_2d(points) @ self.normal - self.offset


@dataclass
class SurfaceCloud:
    """Filtered per-point data plus enough per-ray state to keep rendering valid."""

    points: Array      # (n, 3)
    ray_id: Array      # (n,)
    t: Array           # (n,)
    weight: Array      # (n,)
    view_dir: Array    # (n, 3)
    rgb: Array         # (n, 3)
    sigma: Array       # (n,)
    class_id: Array    # (n,) field class at the point
    normal: Array      # (n, 3)
    survived: Array    # (n_rays * n_samples,) bool over the pre-filter sample set
    residual: Array    # (n_rays,) ray mass assigned to the background class
    ray_far: Array     # (n_rays,)
    ray_gt_class: Array  # (n_rays,) argmax of the ground-truth semantic render
    n_rays: int
    n_classes: int

    def __len__(self) -> int:
        return len(self.points)


def filter_points(points: Array, sigma: Array,
                  bounds: tuple[Array, Array] | None, sigma_min: float) -> Array:
    """Scene-bound and density filters: keep points inside bounds with sigma >= sigma_min."""
    points = np.atleast_2d(points)
    sigma = np.asarray(sigma, dtype=np.float64)
    mask = sigma >= sigma_min
    if bounds is not None:
        bmin = np.asarray(bounds[0], dtype=np.float64)
        bmax = np.asarray(bounds[1], dtype=np.float64)
        if (bmin > bmax).any():
            raise ValueError(f"inverted bounds: {bmin} > {bmax}")
        inside = ((points >= bmin) & (points <= bmax)).all(axis=1)
        mask = mask & inside
    return mask


def surface_select(weights: Array, eta: float) -> int | None:
    """Smallest 1-based j with cumsum(w)[j] > eta * sum(w); None when sum is 0."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must be in (0, 1), got {eta}")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0.0:
        return None
    accum = np.cumsum(w)
    return int(np.searchsorted(accum, eta * total, side="right")) + 1


def ransac_ground(points: Array, n_planes: int = 100, inlier_eps: float = 0.005,
                  d_plane: float = 0.005, seed: int = 0) -> tuple[GroundPlane, Array]:
    """Best-of-n_planes RANSAC plane fit, then mask points close to and below it.

    Each candidate plane comes from a random point triple (sampled without
    replacement); the winner maximizes |signed distance| < inlier_eps inliers.
    The returned plane normal points up (normal.z > 0) and the removal mask is
    true where sd(x, plane) < d_plane.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if n < 3:
        raise ValueError(f"RANSAC needs at least 3 points, got {n}")
    rng = np.random.default_rng(seed)

    best: tuple[Array, float] | None = None
    best_count = -1
    for _ in range(n_planes):
        tri = points[rng.choice(n, size=3, replace=False)]
        nrm = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        length = np.linalg.norm(nrm)
        if length < 1e-12:
            continue
        nrm = nrm / length
        offset = float(nrm @ tri[0])
        count = int((np.abs(points @ nrm - offset) < inlier_eps).sum())
        if count > best_count:
            best_count = count
            best = (nrm, offset)
    if best is None:
        raise ValueError("all RANSAC candidate triples were collinear")

    nrm, offset = best
    if nrm[2] < 0:
        nrm, offset = -nrm, -offset
    plane = GroundPlane(normal=nrm, offset=offset, inlier_count=best_count)
    removal = plane.signed_distance(points) < d_plane
    return plane, removal


def probe_rays(scene: fld.SceneSpec, bundle: cam.RayBundle,
               config: ProbeConfig, seed: int = 0) -> SurfaceCloud:
    """Run sampling plus the four filters over an explicit ray bundle."""
    batch, pts = rnd.sample_rays(scene, bundle, config.n_coarse, config.n_fine, seed=seed)
    R, K = batch.weight.shape
    flat_pts = pts.reshape(-1, 3)
    flat_sigma = batch.sigma.reshape(-1)
    flat_w = batch.weight.reshape(-1)
    flat_t = batch.t.reshape(-1)
    ray_ids = batch.ray_ids.reshape(-1)

    _, colors, classes, _ = fld.sample_field(scene, flat_pts, with_normals=False)

    # ground-truth ray label from the unfiltered render
    n_classes = scene.n_classes
    onehot = np.zeros((R * K, n_classes))
    onehot[np.arange(R * K), classes] = 1.0
    gt_dist = rnd.render_semantic(batch, onehot.reshape(R, K, n_classes))
    ray_gt = gt_dist.argmax(axis=1).astype(np.int64)

    bounds = (scene.bounds_min, scene.bounds_max) if config.bounds_filter else None
    keep = filter_points(flat_pts, flat_sigma, bounds, config.sigma_min)

    point_weight = flat_w.copy()
    if config.mode == "surface":
        masked_w = np.where(keep, flat_w, 0.0).reshape(R, K)
        accum = np.cumsum(masked_w, axis=1)
        total = accum[:, -1]
        crossed = accum > (config.eta * total)[:, None]
        sel = crossed.argmax(axis=1)
        has_point = total > 0.0
        surface = np.zeros(R * K, dtype=bool)
        surface[np.arange(R)[has_point] * K + sel[has_point]] = True
        keep = surface
        # the surviving point carries the ray's full accumulated weight
        ray_total = batch.weight.sum(axis=1)
        point_weight = np.repeat(ray_total, K)
    elif config.mode != "proposal":
        raise ValueError(f"unknown probe mode {config.mode!r}")

    if config.ground_removal and keep.sum() >= 3:
        _, removed = ransac_ground(flat_pts[keep], n_planes=config.ransac_planes,
                                   inlier_eps=config.ransac_inlier_eps,
                                   d_plane=config.d_plane, seed=seed)
        kept_idx = np.flatnonzero(keep)
        keep = keep.copy()
        keep[kept_idx[removed]] = False

    idx = np.flatnonzero(keep)
    normals = fld._normals_at(scene, flat_pts[idx]) if len(idx) else np.zeros((0, 3))

    kept_w = np.zeros(R)
    np.add.at(kept_w, ray_ids[idx], point_weight[idx])
    residual = 1.0 - kept_w

    return SurfaceCloud(
        points=flat_pts[idx],
        ray_id=ray_ids[idx],
        t=flat_t[idx],
        weight=point_weight[idx],
        view_dir=bundle.directions[ray_ids[idx]],
        rgb=colors[idx],
        sigma=flat_sigma[idx],
        class_id=classes[idx],
        normal=normals,
        survived=keep,
        residual=residual,
        ray_far=bundle.far.copy(),
        ray_gt_class=ray_gt,
        n_rays=R,
        n_classes=n_classes,
    )


def probe_scene(scene: fld.SceneSpec, poses: list[cam.CameraPose], n_rays: int,
                config: ProbeConfig | None = None, seed: int = 0) -> SurfaceCloud:
    """Probe random pixels across the given poses into a condensed cloud."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    if not poses:
        raise ValueError("need at least one pose")
    config = config or ProbeConfig()
    rng = np.random.default_rng(seed)
    pose_idx = rng.integers(0, len(poses), n_rays)
    bounds = (scene.bounds_min, scene.bounds_max)

    parts: list[cam.RayBundle] = []
    for p, pose in enumerate(poses):
        m = pose_idx == p
        count = int(m.sum())
        if count == 0:
            continue
        rows = rng.integers(0, pose.intrinsics.height, count)
        cols = rng.integers(0, pose.intrinsics.width, count)
        parts.append(cam.rays_for_pixels(pose, rows, cols, bounds))

    bundle = cam.RayBundle(
        origins=np.concatenate([b.origins for b in parts]),
        directions=np.concatenate([b.directions for b in parts]),
        rows=np.concatenate([b.rows for b in parts]),
        cols=np.concatenate([b.cols for b in parts]),
        near=np.concatenate([b.near for b in parts]),
        far=np.concatenate([b.far for b in parts]),
    )
    return probe_rays(scene, bundle, config, seed=seed)


def probe_view(scene: fld.SceneSpec, pose: cam.CameraPose,
               config: ProbeConfig | None = None, seed: int = 0) -> SurfaceCloud:
    """Probe every pixel ray of one pose (row-major ray order)."""
    config = config or ProbeConfig()
    bundle = cam.rays_for_view(pose, bounds=(scene.bounds_min, scene.bounds_max))
    return probe_rays(scene, bundle, config, seed=seed)


def cloud_render_semantic(cloud: SurfaceCloud, probs: Array) -> Array:
    """Per-ray class distribution from per-point probabilities plus residual mass."""
    probs = np.asarray(probs, dtype=np.float64)
    out = np.zeros((cloud.n_rays, probs.shape[1]))
    np.add.at(out, cloud.ray_id, cloud.weight[:, None] * probs)
    out[:, 0] += cloud.residual
    return out


def cloud_render_depth(cloud: SurfaceCloud) -> Array:
    """Per-ray depth from the surviving points; empty rays return far."""
    acc = np.zeros(cloud.n_rays)
    np.add.at(acc, cloud.ray_id, cloud.weight)
    num = np.zeros(cloud.n_rays)
    np.add.at(num, cloud.ray_id, cloud.weight * cloud.t)
    depth = num / np.maximum(acc, rnd.EMPTY_RAY_WEIGHT)
    return np.where(acc > rnd.EMPTY_RAY_WEIGHT, depth, cloud.ray_far)


# ---------------------------------------------------------------------------
# PLY export (ASCII). The trailing sigma / view-dir properties let field-head
# queries rebuild the exact training features from a file round trip.

_PLY_PROPS = [
    ("float", "x"), ("float", "y"), ("float", "z"),
    ("uchar", "red"), ("uchar", "green"), ("uchar", "blue"),
    ("int", "class"), ("float", "weight"), ("int", "ray_id"),
    ("float", "sigma"), ("float", "vx"), ("float", "vy"), ("float", "vz"),
]


def save_ply(path, cloud: SurfaceCloud) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property {typ} {name}" for typ, name in _PLY_PROPS]
    lines.append("end_header")
    rgb8 = np.clip(cloud.rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
    for i in range(len(cloud)):
        x, y, z = cloud.points[i]
        vx, vy, vz = cloud.view_dir[i]
        lines.append(
            f"{x!r} {y!r} {z!r} {rgb8[i, 0]} {rgb8[i, 1]} {rgb8[i, 2]} "
            f"{cloud.class_id[i]} {cloud.weight[i]!r} {cloud.ray_id[i]} "
            f"{cloud.sigma[i]!r} {vx!r} {vy!r} {vz!r}"
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ply(path) -> dict[str, Array]:
    """Read an ASCII PLY written by save_ply; returns column arrays by name."""
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().splitlines()
    if not text or text[0] != "ply":
        raise ValueError("not a PLY file")
    names: list[str] = []
    count = 0
    body_at = 0
    for i, line in enumerate(text[1:], start=1):
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("property"):
            names.append(line.split()[2])
        elif line == "end_header":
            body_at = i + 1
            break
    rows = [line.split() for line in text[body_at:body_at + count]]
    data = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(names)))
    cols = {name: data[:, j] for j, name in enumerate(names)}
    for name in ("red", "green", "blue", "class", "ray_id"):
        if name in cols:
            cols[name] = cols[name].astype(np.int64)
    return cols
