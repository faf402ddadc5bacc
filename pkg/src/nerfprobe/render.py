"""Quadrature volumetric rendering: transmittance/weights, color/semantic/depth,
inverse-CDF importance resampling, and ground-truth view synthesis."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import camera as cam
from . import field as fld

Array = np.ndarray

DEFAULT_N_COARSE = 64
DEFAULT_N_FINE = 8

EMPTY_RAY_WEIGHT = 1e-8  # below this accumulated weight a ray renders as empty


@dataclass
class RaySampleBatch:
    """Ordered samples along a batch of rays, rectangular (n_rays, n_samples).

    delta[k] = t[k+1] - t[k], with the last delta reaching to far.
    trans is the transmittance at each sample, weight = trans * (1 - exp(-sigma*delta)).
    """

    t: Array       # (R, K)
    delta: Array   # (R, K)
    sigma: Array   # (R, K)
    trans: Array   # (R, K)
    weight: Array  # (R, K)
    near: Array    # (R,)
    far: Array     # (R,)

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    @property
    def ray_ids(self) -> Array:
        """Per-sample ray index, same shape as t."""
        return np.broadcast_to(np.arange(self.n_rays)[:, None], self.t.shape)

    def accumulated(self) -> Array:
        return self.weight.sum(axis=1)


def compute_weights(sigma: Array, delta: Array) -> tuple[Array, Array]:
    """Transmittance and quadrature weights from densities and segment widths.

    T_k = exp(-sum_{j<k} sigma_j delta_j), w_k = T_k (1 - exp(-sigma_k delta_k)).
    Residual identity: 1 - sum w = exp(-sum sigma delta).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if sigma.shape != delta.shape:
        raise ValueError(f"sigma {sigma.shape} vs delta {delta.shape}")
    if (sigma < 0).any():
        raise ValueError("negative density")
    if (delta <= 0).any():
        raise ValueError("non-positive delta")
    tau = sigma * delta
    accum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(accum - tau))  # exclusive prefix sum
    weight = trans * (1.0 - np.exp(-tau))
    return trans, weight


def make_batch(t: Array, sigma: Array, near: Array, far: Array) -> RaySampleBatch:
    """Assemble a batch from sorted per-ray sample distances and densities."""
    t = np.atleast_2d(t)
    sigma = np.atleast_2d(sigma)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    trans, weight = compute_weights(sigma, delta)
    return RaySampleBatch(t=t, delta=delta, sigma=sigma, trans=trans, weight=weight,
                          near=near, far=far)


def render_color(batch: RaySampleBatch, colors: Array, background: Array) -> Array:
    """C(r) = sum_k w_k c_k + (1 - sum w) * background, per ray."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape[:2] != batch.weight.shape:
        raise ValueError(f"colors {colors.shape} vs weights {batch.weight.shape}")
    acc = batch.accumulated()
    out = np.einsum("rk,rkc->rc", batch.weight, colors)
    return out + (1.0 - acc)[:, None] * np.asarray(background, dtype=np.float64)[None, :]


def render_semantic(batch: RaySampleBatch, class_probs: Array) -> Array:
    """L(r) = sum_k w_k s_k with residual ray mass assigned to class 0."""
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.shape[:2] != batch.weight.shape:
        raise ValueError(f"class_probs {probs.shape} vs weights {batch.weight.shape}")
    sums = probs.sum(axis=2)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError("class probability rows must sum to 1")
    out = np.einsum("rk,rkc->rc", batch.weight, probs)
    out[:, 0] += 1.0 - batch.accumulated()
    return out


def render_depth(batch: RaySampleBatch) -> Array:
    """Weight-averaged depth; rays with (near-)zero accumulated weight return far."""
    acc = batch.accumulated()
    depth = (batch.weight * batch.t).sum(axis=1) / np.maximum(acc, EMPTY_RAY_WEIGHT)
    return np.where(acc > EMPTY_RAY_WEIGHT, depth, batch.far)


def importance_resample(coarse: RaySampleBatch, n_fine: int, seed: int,
                        stratified: bool = True) -> Array:
    """Draw fine sample distances by inverse CDF over the coarse weight histogram.

    Bins are [t_k, t_k + delta_k) with mass w_k; rays with zero total weight
    fall back to uniform stratified samples over [near, far]. Sorted per ray.
    """
    if n_fine < 1:
        raise ValueError("n_fine must be >= 1")
    rng = np.random.default_rng(seed)
    R, K = coarse.weight.shape
    if stratified:
        u = (np.arange(n_fine)[None, :] + rng.random((R, n_fine))) / n_fine
    else:
        u = rng.random((R, n_fine))

    total = coarse.weight.sum(axis=1)
    out = np.empty((R, n_fine))

    empty = total <= 0.0
    if empty.any():
        span = (coarse.far[empty] - coarse.near[empty])[:, None]
        base = coarse.near[empty][:, None]
        strat = (np.arange(n_fine)[None, :] + rng.random((int(empty.sum()), n_fine))) / n_fine
        out[empty] = base + strat * span

    live = ~empty
    if live.any():
        w = coarse.weight[live]
        cdf = np.cumsum(w, axis=1)
        cdf = cdf / cdf[:, -1:]
        uu = u[live]
        idx = np.empty_like(uu, dtype=np.int64)
        for i in range(uu.shape[0]):
            idx[i] = np.searchsorted(cdf[i], uu[i], side="right")
        idx = np.clip(idx, 0, K - 1)
        lo = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0), axis=1), 0.0)
        lo[idx == 0] = 0.0
        hi = np.take_along_axis(cdf, idx, axis=1)
        width = np.maximum(hi - lo, 1e-12)
        frac = (uu - lo) / width
        t0 = np.take_along_axis(coarse.t[live], idx, axis=1)
        dt = np.take_along_axis(coarse.delta[live], idx, axis=1)
        out[live] = t0 + frac * dt

    out.sort(axis=1)
    np.clip(out, coarse.near[:, None], coarse.far[:, None], out=out)
    return out


def coarse_t(near: Array, far: Array, n_coarse: int) -> Array:
    """Deterministic midpoint placement of coarse samples."""
    frac = (np.arange(n_coarse) + 0.5) / n_coarse
    return near[:, None] + frac[None, :] * (far - near)[:, None]


def sample_rays(scene: fld.SceneSpec, bundle: cam.RayBundle,
                n_coarse: int = DEFAULT_N_COARSE, n_fine: int = DEFAULT_N_FINE,
                seed: int = 0):
    """Coarse + importance sampling along a ray bundle against the analytic field.

    Returns the merged (coarse U fine, sorted) batch plus per-sample positions.
    """
    t_c = coarse_t(bundle.near, bundle.far, n_coarse)
    pts_c = bundle.origins[:, None, :] + bundle.directions[:, None, :] * t_c[..., None]
    sig_c = fld.sigma_at(scene, pts_c.reshape(-1, 3)).reshape(t_c.shape)
    batch_c = make_batch(t_c, sig_c, bundle.near, bundle.far)

    t_f = importance_resample(batch_c, n_fine, seed=seed)
    t_all = np.concatenate([t_c, t_f], axis=1)
    t_all.sort(axis=1)
    pts = bundle.origins[:, None, :] + bundle.directions[:, None, :] * t_all[..., None]
    sig = fld.sigma_at(scene, pts.reshape(-1, 3)).reshape(t_all.shape)
    batch = make_batch(t_all, sig, bundle.near, bundle.far)
    return batch, pts


@dataclass
class ViewRender:
    rgb: Array       # (H, W, 3) in [0,1]
    semantic: Array  # (H, W) int class ids
    depth: Array     # (H, W)


def render_view(scene: fld.SceneSpec, pose: cam.CameraPose,
                n_coarse: int = DEFAULT_N_COARSE, n_fine: int = DEFAULT_N_FINE,
                seed: int | None = None) -> ViewRender:
    """Ground-truth view synthesis: RGB, argmax semantic map, and depth map."""
    intr = pose.intrinsics
    bundle = cam.rays_for_view(pose, bounds=(scene.bounds_min, scene.bounds_max))
    view_seed = scene.seed if seed is None else seed
    batch, pts = sample_rays(scene, bundle, n_coarse, n_fine, seed=view_seed)

    flat = pts.reshape(-1, 3)
    _, colors, classes, _ = fld.sample_field(scene, flat, with_normals=False)
    colors = colors.reshape(batch.n_rays, batch.n_samples, 3)
    n_classes = scene.n_classes
    onehot = np.zeros((len(flat), n_classes))
    onehot[np.arange(len(flat)), classes] = 1.0
    onehot = onehot.reshape(batch.n_rays, batch.n_samples, n_classes)

    rgb = render_color(batch, colors, scene.background_color)
    sem = render_semantic(batch, onehot)
    depth = render_depth(batch)

    H, W = intr.height, intr.width
    return ViewRender(
        rgb=np.clip(rgb, 0.0, 1.0).reshape(H, W, 3),
        semantic=sem.argmax(axis=1).reshape(H, W).astype(np.int64),
        depth=depth.reshape(H, W),
    )


# ---------------------------------------------------------------------------
# image / depth file formats


def save_rgb_png(path, rgb: Array) -> None:
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_rgb_png(path) -> Array:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_label_png(path, labels: Array) -> None:
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label map does not fit single-channel 8-bit PNG")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def load_label_png(path) -> Array:
    return np.asarray(Image.open(path).convert("L"), dtype=np.int64)


def save_depth(path, depth: Array) -> None:
    """32-bit float binary with an 8-byte header: uint32 width, uint32 height."""
    depth = np.asarray(depth, dtype=np.float32)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.astype("<f4").tobytes())


def load_depth(path) -> Array:
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4")
    return data.reshape(h, w).astype(np.float64)
