"""Masked autoencoding over probed clouds: mask points, reconstruct RGB and/or
normals from the unmasked context, then transfer encoder weights to segmentation.

The encoder is the segmentation backbone; the decoder is a smaller two-layer
kNN-aggregation network sized to roughly 40% of the encoder's parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import features as feat
from . import segnet as sn

Array = np.ndarray

MASK_STRATEGIES = ("random", "patch", "patch_fps")
DECODER_RATIO_RANGE = (0.35, 0.45)


@dataclass
class MaskSpec:
    strategy: str = "random"
    p: float = 0.5
    k_keypoints: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in MASK_STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.strategy!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"masked fraction must be in [0, 1], got {self.p}")
        if self.strategy != "random" and self.k_keypoints < 1:
            raise ValueError("patch strategies need k_keypoints >= 1")


def fps(points: Array, k: int, seed: int = 0) -> Array:
    """Greedy farthest point sampling starting from a seeded random point."""
    points = np.atleast_2d(points)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def make_mask(points: Array, spec: MaskSpec) -> Array:
    """Boolean mask with exactly ceil(p * n) True entries.

    Patch modes mask the points closest to the keypoint set, ties broken by
    point index.
    """
    spec.validate()
    points = np.atleast_2d(points)
    n = len(points)
    if n < 1:
        raise ValueError("need at least one point")
    m = math.ceil(spec.p * n)
    mask = np.zeros(n, dtype=bool)
    if m == 0:
        return mask
    rng = np.random.default_rng(spec.seed)
    if spec.strategy == "random":
        mask[rng.choice(n, size=m, replace=False)] = True
        return mask
    k = min(spec.k_keypoints, n)
    if spec.strategy == "patch":
        keypoints = rng.choice(n, size=k, replace=False)
    else:
        keypoints = fps(points, k, seed=spec.seed)
    dist = np.linalg.norm(points[:, None, :] - points[keypoints][None, :, :], axis=2).min(axis=1)
    order = np.lexsort((np.arange(n), dist))
    mask[order[:m]] = True
    return mask


# ---------------------------------------------------------------------------
# decoder


def encoder_param_count(cfg: sn.SegNetConfig) -> int:
    w = cfg.width
    count = cfg.feature_dim * w + w
    count += cfg.n_layers * ((w + 3) * w + w + w * w + w)
    return count


def decoder_param_count(enc_width: int, dec_width: int) -> int:
    d = dec_width
    count = enc_width * d + d                    # input projection
    count += 2 * ((d + 3) * d + d + d * d + d)   # two aggregation layers (wf+wp+b1+w2+b2)
    count += 2 * (d * 3 + 3)                     # rgb and normal heads
    return count


def decoder_width_for(cfg: sn.SegNetConfig) -> int:
    """Pick the decoder width whose parameter count lands nearest 40% of the encoder."""
    target = 0.40 * encoder_param_count(cfg)
    widths = range(8, cfg.width + 1)
    return min(widths, key=lambda d: abs(decoder_param_count(cfg.width, d) - target))


def init_decoder(cfg: sn.SegNetConfig, seed: int = 0, width: int | None = None) -> dict[str, Array]:
    d = decoder_width_for(cfg) if width is None else width
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    params = {"dec.in.w": dense(cfg.width, d), "dec.in.b": np.zeros(d)}
    for layer in range(2):
        params[f"dec.agg{layer}.wf"] = dense(d + 3, d)[:d]
        params[f"dec.agg{layer}.wp"] = dense(d + 3, d)[:3]
        params[f"dec.agg{layer}.b1"] = np.zeros(d)
        params[f"dec.agg{layer}.w2"] = dense(d, d)
        params[f"dec.agg{layer}.b2"] = np.zeros(d)
    params["dec.rgb.w"] = dense(d, 3)
    params["dec.rgb.b"] = np.zeros(3)
    params["dec.normal.w"] = dense(d, 3)
    params["dec.normal.b"] = np.zeros(3)
    return params


def _decoder_forward(params, h, points01: Array, knn_idx: Array):
    d = params["dec.in.w"].data.shape[1] if isinstance(params["dec.in.w"], ad.Tensor) \
        else params["dec.in.w"].shape[1]
    n, k = knn_idx.shape
    rel = (points01[knn_idx] - points01[:, None, :]).reshape(n * k, 3)
    x = ad.relu(ad.matmul(h, params["dec.in.w"]) + params["dec.in.b"])
    for layer in range(2):
        nb = ad.gather(x, knn_idx.reshape(-1))
        e = ad.matmul(nb, params[f"dec.agg{layer}.wf"]) \
            + ad.matmul(ad.Tensor(rel), params[f"dec.agg{layer}.wp"]) \
            + params[f"dec.agg{layer}.b1"]
        e = ad.matmul(ad.relu(e), params[f"dec.agg{layer}.w2"]) + params[f"dec.agg{layer}.b2"]
        x = x + ad.reduce_max(ad.reshape(e, (n, k, d)), axis=1)
    rgb = ad.matmul(x, params["dec.rgb.w"]) + params["dec.rgb.b"]
    raw = ad.matmul(x, params["dec.normal.w"]) + params["dec.normal.b"]
    norm = ad.sqrt(ad.reduce_sum(ad.mul(raw, raw), axis=1, keepdims=True) + 1e-12)
    return rgb, ad.div(raw, norm)


@dataclass
class PretrainBatch:
    points01: Array
    feats: Array       # encoder input with masked rows holding positional slots only
    knn_idx: Array
    mask: Array        # (n,) bool, True = masked (reconstruction target)
    rgb: Array
    normal: Array


def prepare_batch(points01: Array, view_dirs: Array, rgb: Array, sigma: Array,
                  normals: Array, fcfg: feat.FeatureConfig, spec: MaskSpec) -> PretrainBatch:
    """Encode features and zero the non-positional slots of masked points."""
    mask = make_mask(points01, spec)
    feats = feat.encode_features(points01, view_dirs, rgb, sigma, fcfg)
    positional = 3 + 6 * fcfg.pe_bands
    feats = feats.copy()
    feats[mask, positional:] = 0.0
    return PretrainBatch(points01=points01, feats=feats,
                         knn_idx=sn.knn_indices(points01, 16),
                         mask=mask, rgb=np.atleast_2d(rgb), normal=np.atleast_2d(normals))


def pretrain_loss(enc_params, dec_params, batch: PretrainBatch, cfg: sn.SegNetConfig,
                  objectives: tuple[str, ...]):
    """Sum of the selected objectives over masked points (Tensor scalars)."""
    if not objectives:
        raise ValueError("objective set must not be empty")
    for obj in objectives:
        if obj not in ("rgb", "normal"):
            raise ValueError(f"unknown objective {obj!r}")
    h = sn._backbone(enc_params, batch.points01, ad.Tensor(batch.feats),
                     batch.knn_idx, cfg)
    rgb_pred, normal_pred = _decoder_forward(dec_params, h, batch.points01, batch.knn_idx)
    idx = np.flatnonzero(batch.mask)
    losses = {}
    total = None
    if "rgb" in objectives:
        diff = ad.gather(rgb_pred, idx) - batch.rgb[idx]
        losses["rgb_mae"] = ad.reduce_mean(ad.absolute(diff))
        total = losses["rgb_mae"]
    if "normal" in objectives:
        dots = ad.reduce_sum(ad.mul(ad.gather(normal_pred, idx), batch.normal[idx]), axis=1)
        losses["normal_loss"] = ad.reduce_mean(1.0 - dots)
        total = losses["normal_loss"] if total is None else total + losses["normal_loss"]
    return total, losses


def pretrain_step(enc_params: dict[str, Array], dec_params: dict[str, Array],
                  batch: PretrainBatch, cfg: sn.SegNetConfig,
                  objectives: tuple[str, ...], opt_state: dict,
                  tcfg: sn.TrainConfig, step: int) -> dict[str, float]:
    """One masked-autoencoding update over both encoder and decoder."""
    if batch.mask.sum() == 0:
        return {"step": step, "loss": 0.0, "lr": tcfg.lr_at(step)}
    tape = ad.Tape()
    enc_leaves = {n: tape.leaf(v) for n, v in enc_params.items()}
    dec_leaves = {n: tape.leaf(v) for n, v in dec_params.items()}
    total, parts = pretrain_loss(enc_leaves, dec_leaves, batch, cfg, objectives)
    if not np.isfinite(total.data):
        raise sn.TrainingDiverged(f"non-finite pretraining loss at step {step}")
    grads = tape.backward(total)
    lr = tcfg.lr_at(step)
    sgd_update_all = {**{n: grads.get(t) for n, t in enc_leaves.items()},
                      **{n: grads.get(t) for n, t in dec_leaves.items()}}
    sn.sgd_update(enc_params, sgd_update_all, opt_state.setdefault("enc", {}),
                  lr=lr, momentum=tcfg.momentum)
    sn.sgd_update(dec_params, sgd_update_all, opt_state.setdefault("dec", {}),
                  lr=lr, momentum=tcfg.momentum)
    out = {"step": step, "loss": float(total.data), "lr": lr}
    out.update({name: float(v.data) for name, v in parts.items()})
    return out


def transfer_weights(pretrained_encoder: dict[str, Array],
                     segnet_params: dict[str, Array],
                     cfg: sn.SegNetConfig) -> tuple[dict[str, Array], list[str]]:
    """Copy encoder tensors into a fresh segnet by name; the semantic head stays fresh.

    Returns the updated parameters and the list of pretrained names that did
    not match any backbone tensor. A matched name with a different shape is an
    error naming the offending tensor.
    """
    out = dict(segnet_params)
    backbone = set(sn.encoder_param_names(cfg))
    unmatched = []
    for name, value in pretrained_encoder.items():
        if name in backbone:
            if out[name].shape != value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {out[name].shape} vs {value.shape}")
            out[name] = value.copy()
        else:
            unmatched.append(name)
    return out, unmatched
