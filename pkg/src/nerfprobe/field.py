"""Procedural analytic radiance fields with exact density/color/class/normal queries.

A scene is a union of primitives (sphere/box/cylinder) standing on a ground
plane. Density is a smooth logistic of the signed distance to that union, so
surface sampling, normals, and quadrature behave well.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from . import camera

Array = np.ndarray

SHAPES = ("sphere", "box", "cylinder")

# signed distance beyond which a point counts as open background
BACKGROUND_SDF_FACTOR = 3.0

_NORMAL_STEP = 1e-4


@dataclass
class Primitive:
    shape: str
    center: Array
    scale: Array
    z_rotation: float
    color: Array
    class_id: int


@dataclass
class GroundSpec:
    height: float
    color: Array
    class_id: int = 0


@dataclass
class SceneSpec:
    seed: int
    bounds_min: Array
    bounds_max: Array
    primitives: list[Primitive]
    ground: GroundSpec
    background_color: Array
    sigma_max: float = 50.0
    falloff_tau: float = 0.01
    cameras: list[camera.CameraPose] = dc_field(default_factory=list)

    @property
    def n_classes(self) -> int:
        ids = [p.class_id for p in self.primitives] + [self.ground.class_id]
        return int(max(ids)) + 1

    @property
    def center(self) -> Array:
        return 0.5 * (self.bounds_min + self.bounds_max)


@dataclass
class FieldSample:
    sigma: float
    color: Array
    class_id: int
    normal: Array


@dataclass
class SceneConfig:
    """Knobs for the procedural generator."""

    n_primitives: tuple[int, int] = (4, 12)
    n_classes: int = 4  # includes background/floor class 0
    bounds_min: tuple[float, float, float] = (-1.0, -1.0, -0.1)
    bounds_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scale_range: tuple[float, float] = (0.10, 0.22)
    color_jitter: float = 0.12
    sigma_max: float = 50.0
    falloff_tau: float = 0.01


def _class_palette(n_object_classes: int) -> Array:
    """Distinct base colors, one per object class (hue wheel, fixed s/v)."""
    hues = np.arange(n_object_classes) / max(n_object_classes, 1)
    palette = np.zeros((n_object_classes, 3))
    for i, h in enumerate(hues):
        k = h * 6.0
        x = 1.0 - abs(k % 2 - 1.0)
        sector = int(k) % 6
        rgb = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][sector]
        palette[i] = rgb
    return 0.15 + 0.7 * palette


def make_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    """Generate a deterministic scene: colored primitives resting on a gray plane.

    Object classes (1..C-1) map to shape families; colors are class-correlated
    with per-object jitter. Rejects class counts < 2 and empty object ranges.
    """
    config = config or SceneConfig()
    lo, hi = config.n_primitives
    if config.n_classes < 2:
        raise ValueError(f"need at least 2 classes (got {config.n_classes})")
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid primitive range {config.n_primitives}")

    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    n_obj_classes = config.n_classes - 1
    palette = _class_palette(n_obj_classes)

    bmin = np.asarray(config.bounds_min, dtype=np.float64)
    bmax = np.asarray(config.bounds_max, dtype=np.float64)
    ground_height = 0.0

    # near-balanced class assignment so every class appears when n >= C-1
    class_ids = np.array([1 + (i % n_obj_classes) for i in range(n)])
    rng.shuffle(class_ids)

    primitives: list[Primitive] = []
    placed_xy: list[tuple[Array, float]] = []
    for class_id in class_ids:
        shape = SHAPES[(class_id - 1) % len(SHAPES)]
        s = rng.uniform(*config.scale_range)
        if shape == "sphere":
            scale = np.array([s, s, s])
        elif shape == "cylinder":
            scale = np.array([s * 0.8, s * 0.8, s * rng.uniform(0.8, 1.4)])
        else:
            scale = np.array([s, s * rng.uniform(0.6, 1.2), s * rng.uniform(0.6, 1.2)])
        footprint = float(np.max(scale[:2]))
        lo_xy = bmin[:2] + footprint
        hi_xy = bmax[:2] - footprint
        center_xy = None
        for _ in range(64):
            cand = rng.uniform(lo_xy, hi_xy)
            if all(np.linalg.norm(cand - p) > 0.85 * (footprint + r) for p, r in placed_xy):
                center_xy = cand
                break
        if center_xy is None:
            center_xy = rng.uniform(lo_xy, hi_xy)
        placed_xy.append((center_xy, footprint))
        center = np.array([center_xy[0], center_xy[1], ground_height + scale[2]])
        color = palette[class_id - 1] + rng.uniform(-config.color_jitter, config.color_jitter, 3)
        primitives.append(Primitive(
            shape=shape,
            center=center,
            scale=scale,
            z_rotation=float(rng.uniform(0.0, 2.0 * np.pi)),
            color=np.clip(color, 0.0, 1.0),
            class_id=int(class_id),
        ))

    return SceneSpec(
        seed=seed,
        bounds_min=bmin,
        bounds_max=bmax,
        primitives=primitives,
        ground=GroundSpec(height=ground_height, color=np.array([0.5, 0.5, 0.5])),
        background_color=np.array([0.92, 0.92, 0.92]),
        sigma_max=config.sigma_max,
        falloff_tau=config.falloff_tau,
    )


# ---------------------------------------------------------------------------
# signed distance and field queries


def _primitive_sdf(prim: Primitive, x: Array) -> Array:
    p = x - prim.center
    c, s = np.cos(-prim.z_rotation), np.sin(-prim.z_rotation)
    local = np.empty_like(p)
    local[:, 0] = c * p[:, 0] - s * p[:, 1]
    local[:, 1] = s * p[:, 0] + c * p[:, 1]
    local[:, 2] = p[:, 2]
    sc = prim.scale
    if prim.shape == "sphere":
        # exact for uniform scale; scaled approximation otherwise
        return (np.linalg.norm(local / sc, axis=1) - 1.0) * float(np.min(sc))
    if prim.shape == "box":
        q = np.abs(local) - sc
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if prim.shape == "cylinder":
        radial = np.hypot(local[:, 0], local[:, 1]) - sc[0]
        axial = np.abs(local[:, 2]) - sc[2]
        d = np.stack([radial, axial], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside
    raise ValueError(f"unknown primitive shape {prim.shape!r}")


def scene_sdf(scene: SceneSpec, x: Array) -> tuple[Array, Array]:
    """Signed distance to the scene union and index of the nearest part.

    Index is the primitive position in scene.primitives, or -1 for the ground.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    best = x[:, 2] - scene.ground.height
    idx = np.full(len(x), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        d = _primitive_sdf(prim, x)
        closer = d < best
        best = np.where(closer, d, best)
        idx[closer] = i
    return best, idx


def sigma_at(scene: SceneSpec, x: Array) -> Array:
    sdf, _ = scene_sdf(scene, x)
    return scene.sigma_max * expit(-sdf / scene.falloff_tau)


def _normals_at(scene: SceneSpec, x: Array) -> Array:
    """Unit normals -grad(sigma)/|grad(sigma)| by central differences.

    Falls back to the sdf gradient direction where the density gradient
    underflows (deep in free space), and to +z when even that vanishes.
    """
    x = np.atleast_2d(x)
    n = len(x)
    h = _NORMAL_STEP
    offsets = np.zeros((6, 3))
    for axis in range(3):
        offsets[2 * axis, axis] = h
        offsets[2 * axis + 1, axis] = -h
    probe = (x[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    sdf, _ = scene_sdf(scene, probe)
    sig = scene.sigma_max * expit(-sdf / scene.falloff_tau)
    sig = sig.reshape(n, 6)
    sdf = sdf.reshape(n, 6)

    grad_sig = np.stack([(sig[:, 0] - sig[:, 1]),
                         (sig[:, 2] - sig[:, 3]),
                         (sig[:, 4] - sig[:, 5])], axis=1) / (2 * h)
    grad_sdf = np.stack([(sdf[:, 0] - sdf[:, 1]),
                         (sdf[:, 2] - sdf[:, 3]),
                         (sdf[:, 4] - sdf[:, 5])], axis=1) / (2 * h)

    normals = -grad_sig
    norm_sig = np.linalg.norm(normals, axis=1)
    norm_sdf = np.linalg.norm(grad_sdf, axis=1)
    use_sdf = norm_sig <= 1e-9
    normals[use_sdf] = grad_sdf[use_sdf]
    scale = np.where(use_sdf, norm_sdf, norm_sig)
    degenerate = scale <= 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    scale = np.where(degenerate, 1.0, scale)
    return normals / scale[:, None]


def sample_field(scene: SceneSpec, x: Array, with_normals: bool = True):
    """Vectorized field query: (sigma, color, class_id, normal) arrays."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sdf, idx = scene_sdf(scene, x)
    sigma = scene.sigma_max * expit(-sdf / scene.falloff_tau)

    colors = np.empty((len(x), 3))
    classes = np.empty(len(x), dtype=np.int64)
    ground_mask = idx < 0
    colors[ground_mask] = scene.ground.color
    classes[ground_mask] = scene.ground.class_id
    for i, prim in enumerate(scene.primitives):
        m = idx == i
        if m.any():
            colors[m] = prim.color
            classes[m] = prim.class_id

    open_space = sdf > BACKGROUND_SDF_FACTOR * scene.falloff_tau
    colors[open_space] = scene.background_color
    classes[open_space] = scene.ground.class_id

    normals = _normals_at(scene, x) if with_normals else None
    return sigma, colors, classes, normals


def query_field(scene: SceneSpec, x, d=None) -> FieldSample:
    """Single-point field query. d (the view direction) does not affect the
    analytic field but is part of the query signature for callers that carry it."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    sigma, color, class_id, normal = sample_field(scene, x)
    return FieldSample(sigma=float(sigma[0]), color=color[0],
                       class_id=int(class_id[0]), normal=normal[0])


# ---------------------------------------------------------------------------
# JSON serialization (keys mirror the dataclass fields; cameras ride along)


def scene_to_json(scene: SceneSpec) -> str:
    doc = {
        "seed": scene.seed,
        "bounds": {"min": scene.bounds_min.tolist(), "max": scene.bounds_max.tolist()},
        "primitives": [
            {
                "shape": p.shape,
                "center": p.center.tolist(),
                "scale": p.scale.tolist(),
                "z_rotation": p.z_rotation,
                "color": p.color.tolist(),
                "class_id": p.class_id,
            }
            for p in scene.primitives
        ],
        "ground": {
            "height": scene.ground.height,
            "color": scene.ground.color.tolist(),
            "class_id": scene.ground.class_id,
        },
        "background_color": scene.background_color.tolist(),
        "sigma_max": scene.sigma_max,
        "falloff_tau": scene.falloff_tau,
        "cameras": [camera.pose_to_dict(p) for p in scene.cameras],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def scene_from_json(text: str) -> SceneSpec:
    doc = json.loads(text)
    return SceneSpec(
        seed=int(doc["seed"]),
        bounds_min=np.asarray(doc["bounds"]["min"], dtype=np.float64),
        bounds_max=np.asarray(doc["bounds"]["max"], dtype=np.float64),
        primitives=[
            Primitive(
                shape=p["shape"],
                center=np.asarray(p["center"], dtype=np.float64),
                scale=np.asarray(p["scale"], dtype=np.float64),
                z_rotation=float(p["z_rotation"]),
                color=np.asarray(p["color"], dtype=np.float64),
                class_id=int(p["class_id"]),
            )
            for p in doc["primitives"]
        ],
        ground=GroundSpec(
            height=float(doc["ground"]["height"]),
            color=np.asarray(doc["ground"]["color"], dtype=np.float64),
            class_id=int(doc["ground"]["class_id"]),
        ),
        background_color=np.asarray(doc["background_color"], dtype=np.float64),
        sigma_max=float(doc["sigma_max"]),
        falloff_tau=float(doc["falloff_tau"]),
        cameras=[camera.pose_from_dict(c) for c in doc.get("cameras", [])],
    )


def save_scene(path, scene: SceneSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_json(scene))


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_json(fh.read())
