"""kNN-aggregation point segmentation network trained through volumetric rendering.

Architecture: a linear stem lifts per-point features to the working width,
then each aggregation layer embeds (neighbor feature, relative position) pairs
through a shared two-layer MLP, max-pools over the k neighbors, and adds the
result back residually. A small MLP head maps final features to class logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import features as feat

Array = np.ndarray


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class SegNetConfig:
    n_classes: int
    feature_dim: int
    width: int = 64
    n_layers: int = 3
    knn_k: int = 16


@dataclass
class TrainConfig:
    steps: int = 2000
    lr0: float = 5e-3
    lr1: float = 5e-4
    momentum: float = 0.9
    lambda_proximity: float = 0.01
    jitter_sigma: float = 0.003
    augment: bool = True
    seed: int = 0
    feature: feat.FeatureConfig = dc_field(default_factory=feat.FeatureConfig)

    def lr_at(self, step: int) -> float:
        """Exponential decay lr0 -> lr1 over the configured horizon."""
        if self.steps <= 1:
            return self.lr0
        frac = min(step, self.steps - 1) / (self.steps - 1)
        return float(self.lr0 * (self.lr1 / self.lr0) ** frac)


def init_segnet(cfg: SegNetConfig, seed: int = 0) -> dict[str, Array]:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    w = cfg.width
    params = {"stem.w": dense(cfg.feature_dim, w), "stem.b": np.zeros(w)}
    for layer in range(cfg.n_layers):
        # one logical (feature, rel-position) embed split into two matmuls
        params[f"agg{layer}.wf"] = dense(w + 3, w)[:w]
        params[f"agg{layer}.wp"] = dense(w + 3, w)[:3]
        params[f"agg{layer}.b1"] = np.zeros(w)
        params[f"agg{layer}.w2"] = dense(w, w)
        params[f"agg{layer}.b2"] = np.zeros(w)
    params["sem.w1"] = dense(w, w)
    params["sem.b1"] = np.zeros(w)
    params["sem.w2"] = dense(w, cfg.n_classes)
    params["sem.b2"] = np.zeros(cfg.n_classes)
    return params


def encoder_param_names(cfg: SegNetConfig) -> list[str]:
    """Backbone tensors (everything except the semantic head)."""
    names = ["stem.w", "stem.b"]
    for layer in range(cfg.n_layers):
        names += [f"agg{layer}.wf", f"agg{layer}.wp", f"agg{layer}.b1",
                  f"agg{layer}.w2", f"agg{layer}.b2"]
    return names


def knn_indices(points: Array, k: int) -> Array:
    """Exact k nearest neighbors per point, self excluded; k clamps to n-1."""
    points = np.atleast_2d(points)
    n = len(points)
    if n < 2:
        raise ValueError("need at least 2 points for neighbor aggregation")
    k = min(k, n - 1)
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    idx = np.atleast_2d(idx).astype(np.int64)
    # drop the self column; it is almost always the first hit (distance 0)
    out = idx[:, 1:k + 1].copy()
    odd = np.flatnonzero(idx[:, 0] != np.arange(n))
    for i in odd:
        row = idx[i]
        filtered = row[row != i]
        out[i] = filtered[:k] if len(filtered) >= k else row[:k]
    return out


def _backbone(params, points01: Array, feats, knn_idx: Array, cfg: SegNetConfig):
    """Shared feature trunk; returns per-point features as a Tensor."""
    n, k = knn_idx.shape
    flat_idx = knn_idx.reshape(-1)
    rel = (points01[knn_idx] - points01[:, None, :]).reshape(n * k, 3)  # constant
    h = ad.relu(ad.matmul(feats, params["stem.w"]) + params["stem.b"])
    for layer in range(cfg.n_layers):
        nb = ad.gather(h, flat_idx)  # (n*k, w)
        # (neighbor feature (+) relative position) through one split linear
        e = ad.matmul(nb, params[f"agg{layer}.wf"]) \
            + ad.matmul(ad.Tensor(rel), params[f"agg{layer}.wp"]) \
            + params[f"agg{layer}.b1"]
        e = ad.matmul(ad.relu(e), params[f"agg{layer}.w2"]) + params[f"agg{layer}.b2"]
        pooled = ad.reduce_max(ad.reshape(e, (n, k, cfg.width)), axis=1)
        h = h + pooled
    return h


def _head(params, h):
    z = ad.relu(ad.matmul(h, params["sem.w1"]) + params["sem.b1"])
    return ad.matmul(z, params["sem.w2"]) + params["sem.b2"]


def segnet_forward(params: dict, points01: Array, feats, cfg: SegNetConfig,
                   knn_idx: Array | None = None):
    """Per-point intermediate features and class logits.

    params values may be Tensors (tracked) or arrays (plain evaluation);
    the result is permutation-equivariant in point order.
    """
    points01 = np.atleast_2d(points01)
    if knn_idx is None:
        knn_idx = knn_indices(points01, cfg.knn_k)
    if not isinstance(feats, ad.Tensor):
        feats = ad.Tensor(feats)
    h = _backbone(params, points01, feats, knn_idx, cfg)
    return h, _head(params, h)


# ---------------------------------------------------------------------------
# training losses


def rendered_nll(logits, weight: Array, ray_id: Array, residual: Array,
                 gt_class: Array, n_rays: int, n_classes: int):
    """Cross entropy of the rendered class distribution against per-ray labels.

    softmax per point -> volumetric render per ray -> log(dist + 1e-8) -> NLL.
    """
    probs = ad.softmax(logits, axis=1)
    weighted = ad.mul(probs, weight[:, None])
    dist = ad.segment_sum(weighted, ray_id, n_rays)
    res = np.zeros((n_rays, n_classes))
    res[:, 0] = residual
    dist = dist + ad.Tensor(res)
    logp = ad.log(dist + 1e-8)
    hot = np.zeros((n_rays, n_classes))
    hot[np.arange(n_rays), gt_class] = 1.0
    picked = ad.reduce_sum(ad.mul(logp, hot), axis=1)
    return -ad.reduce_mean(picked)


def jitter_cloud(points01: Array, sigma: float, rng: np.random.Generator) -> Array:
    return points01 + rng.normal(0.0, sigma, points01.shape)


def proximity_loss(params: dict, points01: Array, view_dirs: Array, rgb: Array,
                   sigma: Array, cfg: SegNetConfig, fcfg: feat.FeatureConfig,
                   jitter_sigma: float, seed: int) -> float:
    """Mean squared logit difference between the cloud and a jittered copy.

    Features are re-encoded from the jittered positions; RGB/density/view
    features carry over from the source points.
    """
    rng = np.random.default_rng(seed)
    f0 = feat.encode_features(points01, view_dirs, rgb, sigma, fcfg)
    _, l0 = segnet_forward(params, points01, f0, cfg)
    pj = jitter_cloud(points01, jitter_sigma, rng)
    fj = feat.encode_features(pj, view_dirs, rgb, sigma, fcfg)
    _, lj = segnet_forward(params, pj, fj, cfg)
    d = l0.data - lj.data
    return float((d * d).mean())


# ---------------------------------------------------------------------------
# optimizer


def sgd_update(params: dict[str, Array], grads: dict[str, Array | None],
               state: dict[str, Array], lr: float, momentum: float = 0.9) -> None:
    """In-place SGD with momentum; missing gradients leave parameters alone."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.get(name)
        v = momentum * v - lr * g if v is not None else -lr * g
        state[name] = v
        params[name] = p + v


def train_step(params: dict[str, Array], batch, opt_state: dict, cfg: SegNetConfig,
               tcfg: TrainConfig, step: int) -> dict[str, float]:
    """One optimizer update on a probed scene batch; returns step metrics.

    batch carries: points01, feats, knn_idx, weight, ray_id, residual,
    gt_class, n_rays, and (for the proximity term) jitter_points01/jitter_feats
    with jitter_knn_idx. Raises TrainingDiverged on non-finite loss.
    """
    tape = ad.Tape()
    leaves = {name: tape.leaf(value) for name, value in params.items()}

    _, logits = segnet_forward(leaves, batch.points01, ad.Tensor(batch.feats), cfg,
                               knn_idx=batch.knn_idx)
    ce = rendered_nll(logits, batch.weight, batch.ray_id, batch.residual,
                      batch.gt_class, batch.n_rays, cfg.n_classes)

    prox_value = 0.0
    loss = ce
    if tcfg.lambda_proximity > 0.0 and batch.jitter_points01 is not None:
        _, logits_j = segnet_forward(leaves, batch.jitter_points01,
                                     ad.Tensor(batch.jitter_feats), cfg,
                                     knn_idx=batch.jitter_knn_idx)
        diff = logits - logits_j
        prox = ad.reduce_mean(ad.mul(diff, diff))
        prox_value = float(prox.data)
        loss = ce + tcfg.lambda_proximity * prox

    if not np.isfinite(loss.data):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: ce={float(ce.data)!r} prox={prox_value!r}")

    grads = tape.backward(loss)
    lr = tcfg.lr_at(step)
    sgd_update(params, {name: grads.get(leaf) for name, leaf in leaves.items()},
               opt_state, lr=lr, momentum=tcfg.momentum)
    return {"step": step, "ce_loss": float(ce.data), "prox_loss": prox_value, "lr": lr}
