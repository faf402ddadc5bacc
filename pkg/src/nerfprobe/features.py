"""Per-point input features and point-cloud canonicalization.

Feature layout per point: [xyz, PE(xyz), SH(view_dir), rgb, density] where PE
uses L sine/cosine bands per coordinate and SH is the real spherical-harmonics
basis of the viewing direction. Density is min-max normalized over the cloud.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass
class FeatureConfig:
    pe_bands: int = 4
    sh_degree: int = 3
    include_rgb: bool = True
    include_density: bool = True

    def __post_init__(self):
        if self.pe_bands < 0:
            raise ValueError("pe_bands must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")


def feature_width(cfg: FeatureConfig) -> int:
    width = 3 + 6 * cfg.pe_bands + (cfg.sh_degree + 1) ** 2
    if cfg.include_rgb:
        width += 3
    if cfg.include_density:
        width += 1
    return width


def positional_encoding(x: Array, bands: int) -> Array:
    """[sin(2^l pi x), cos(2^l pi x)] per coordinate for l = 0..bands-1."""
    x = np.atleast_2d(x)
    parts = []
    for l in range(bands):
        arg = (2.0 ** l) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros((len(x), 0))
    return np.concatenate(parts, axis=1)


def sh_basis(dirs: Array, degree: int) -> Array:
    """Real spherical harmonics up to degree 3 evaluated at unit directions."""
    d = np.atleast_2d(dirs)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [np.full(len(d), 0.28209479177387814)]
    if degree >= 1:
        out += [0.4886025119029199 * y, 0.4886025119029199 * z, 0.4886025119029199 * x]
    if degree >= 2:
        out += [
            1.0925484305920792 * x * y,
            1.0925484305920792 * y * z,
            0.31539156525252005 * (3.0 * z * z - 1.0),
            1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y),
        ]
    if degree >= 3:
        out += [
            0.5900435899266435 * y * (3.0 * x * x - y * y),
            2.890611442640554 * x * y * z,
            0.4570457994644658 * y * (4.0 * z * z - x * x - y * y),
            0.3731763325901154 * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y),
            0.4570457994644658 * x * (4.0 * z * z - x * x - y * y),
            1.445305721320277 * z * (x * x - y * y),
            0.5900435899266435 * x * (x * x - 3.0 * y * y),
        ]
    return np.stack(out, axis=1)


def normalize_cloud(points: Array) -> tuple[Array, Array, float]:
    """Map a cloud into [0,1]^3 by translation and one uniform scale.

    Returns (points01, translation, scale) with points = points01 * scale + translation.
    A cloud with zero extent on every axis maps to the origin with scale 1.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) < 1:
        raise ValueError("cannot normalize an empty cloud")
    lo = points.min(axis=0)
    extent = float((points.max(axis=0) - lo).max())
    scale = extent if extent > 0.0 else 1.0
    return (points - lo) / scale, lo, scale


def denormalize(points01: Array, translation: Array, scale: float) -> Array:
    return points01 * scale + translation


def encode_features(points01: Array, view_dirs: Array, rgb: Array, sigma: Array,
                    cfg: FeatureConfig) -> Array:
    """Concatenate [xyz, PE(xyz), SH(view), rgb, minmax density] per point.

    Expects points already normalized to [0,1]^3. A constant-density cloud maps
    to 0.5 in the density slot.
    """
    points01 = np.atleast_2d(points01)
    if len(points01) == 0:
        raise ValueError("cannot encode an empty cloud")
    parts = [points01, positional_encoding(points01, cfg.pe_bands),
             sh_basis(view_dirs, cfg.sh_degree)]
    if cfg.include_rgb:
        parts.append(np.atleast_2d(rgb))
    if cfg.include_density:
        s = np.asarray(sigma, dtype=np.float64)
        span = s.max() - s.min()
        dens = (s - s.min()) / span if span > 0 else np.full_like(s, 0.5)
        parts.append(dens[:, None])
    return np.concatenate(parts, axis=1)


def rotate_z(points: Array, view_dirs: Array, theta: float,
             center: Array | None = None) -> tuple[Array, Array]:
    """Rotate points about a vertical axis through `center` (default: centroid);
    view directions rotate about the origin."""
    points = np.atleast_2d(points)
    center = points.mean(axis=0) if center is None else np.asarray(center, float)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    moved = (points - center) @ rot.T + center
    dirs = np.atleast_2d(view_dirs) @ rot.T
    return moved, dirs


def augment_rotate_z(points: Array, view_dirs: Array, seed: int) -> tuple[Array, Array, float]:
    """One random z-rotation of the whole cloud, deterministic per seed."""
    theta = float(np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi))
    moved, dirs = rotate_z(points, view_dirs, theta)
    return moved, dirs, theta
