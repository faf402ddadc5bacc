"""Field-to-field head: cache a neural point cloud once, then answer semantic
queries at arbitrary points via kNN attention around a learnable query token."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import segnet as sn

Array = np.ndarray


@dataclass
class FieldHeadConfig:
    n_classes: int
    dim: int = 64
    heads: int = 4
    layers: int = 2
    ff_width: int = 128
    k: int = 8

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"head count {self.heads} must divide dim {self.dim}")


@dataclass
class NeuralPointCloud:
    """Points in normalized space with cached backbone features and an exact index."""

    points01: Array   # (n, 3)
    features: Array   # (n, dim)
    translation: Array
    scale: float
    tree: cKDTree

    def __len__(self) -> int:
        return len(self.points01)

    def knn(self, queries01: Array, k: int) -> tuple[Array, Array]:
        """Exact k nearest neighbors, sorted by distance."""
        dist, idx = self.tree.query(np.atleast_2d(queries01), k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        return dist, idx.astype(np.int64)


def init_fieldhead(cfg: FieldHeadConfig, seed: int = 0) -> dict[str, Array]:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    d = cfg.dim
    params: dict[str, Array] = {
        "query_token": rng.normal(0.0, 0.5, size=d),
        "tok.w": dense(d + 3, d),
        "tok.b": np.zeros(d),
    }
    for layer in range(cfg.layers):
        p = f"ft{layer}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = dense(d, d)
        params[p + "bo"] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "ff.w1"] = dense(d, cfg.ff_width)
        params[p + "ff.b1"] = np.zeros(cfg.ff_width)
        params[p + "ff.w2"] = dense(cfg.ff_width, d)
        params[p + "ff.b2"] = np.zeros(d)
    params["out_ln.g"] = np.ones(d)
    params["out_ln.b"] = np.zeros(d)
    params["field.w1"] = dense(d, d)
    params["field.b1"] = np.zeros(d)
    params["field.w2"] = dense(d, cfg.n_classes)
    params["field.b2"] = np.zeros(cfg.n_classes)
    return params


def build_neural_pc(seg_params: dict, seg_cfg: sn.SegNetConfig, points01: Array,
                    feats: Array, translation, scale,
                    knn_idx: Array | None = None) -> NeuralPointCloud:
    """Run the backbone once and cache per-point features with a kd-tree index."""
    points01 = np.atleast_2d(points01)
    if len(points01) == 0:
        raise ValueError("cannot build a neural point cloud from an empty cloud")
    h, _ = sn.segnet_forward(seg_params, points01, feats, seg_cfg, knn_idx=knn_idx)
    data = h.data if isinstance(h, ad.Tensor) else h
    return NeuralPointCloud(points01=points01, features=np.asarray(data),
                            translation=np.asarray(translation, dtype=np.float64),
                            scale=float(scale), tree=cKDTree(points01))


def _attention(params, prefix: str, x, cfg: FieldHeadConfig):
    """Pre-norm multi-head self-attention block over (m, T, dim) tokens."""
    m, T, d = x.shape
    h, dh = cfg.heads, d // cfg.heads
    normed = ad.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])

    def heads_of(w):
        y = ad.matmul(normed, w)                  # (m, T, d)
        y = ad.reshape(y, (m, T, h, dh))
        return ad.swapaxes(y, 1, 2)               # (m, h, T, dh)

    q = heads_of(params[prefix + "wq"])
    k = heads_of(params[prefix + "wk"])
    v = heads_of(params[prefix + "wv"])
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=3)
    ctx = ad.matmul(attn, v)                      # (m, h, T, dh)
    ctx = ad.reshape(ad.swapaxes(ctx, 1, 2), (m, T, d))
    out = ad.matmul(ctx, params[prefix + "wo"]) + params[prefix + "bo"]
    x = x + out
    normed2 = ad.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    ff = ad.relu(ad.matmul(normed2, params[prefix + "ff.w1"]) + params[prefix + "ff.b1"])
    ff = ad.matmul(ff, params[prefix + "ff.w2"]) + params[prefix + "ff.b2"]
    return x + ff


def query_points(head_params: dict, cfg: FieldHeadConfig, npc: NeuralPointCloud,
                 queries01: Array, k: int | None = None,
                 npc_features=None, neighbor_idx: Array | None = None):
    """Class logits at arbitrary normalized query points.

    Neighbor tokens are (feature, neighbor - query) pairs with no positional
    order encoding; the learnable query token is prepended and its output slot
    feeds the field MLP. Pass npc_features as a tracked Tensor to flow
    gradients into the backbone during end-to-end training.
    """
    k = cfg.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(npc):
        raise ValueError(f"k={k} exceeds neural cloud size {len(npc)}")
    queries01 = np.atleast_2d(queries01)
    m = len(queries01)
    if neighbor_idx is None:
        _, neighbor_idx = npc.knn(queries01, k)
    feats = npc_features if npc_features is not None else ad.Tensor(npc.features)

    rel = npc.points01[neighbor_idx] - queries01[:, None, :]      # (m, k, 3)
    nb = ad.reshape(ad.gather(feats, neighbor_idx.reshape(-1)), (m, k, cfg.dim))
    tok = ad.concat([nb, ad.Tensor(rel)], axis=2)
    tok = ad.reshape(tok, (m * k, cfg.dim + 3))
    tok = ad.matmul(tok, head_params["tok.w"]) + head_params["tok.b"]
    tok = ad.reshape(tok, (m, k, cfg.dim))

    q = ad.reshape(head_params["query_token"], (1, 1, cfg.dim))
    q = ad.mul(q, np.ones((m, 1, 1)))
    x = ad.concat([q, tok], axis=1)                               # (m, k+1, dim)
    for layer in range(cfg.layers):
        x = _attention(head_params, f"ft{layer}.", x, cfg)

    first = ad.gather(ad.swapaxes(x, 0, 1), np.array([0]))        # (1, m, dim)
    rep = ad.layer_norm(ad.reshape(first, (m, cfg.dim)),
                        head_params["out_ln.g"], head_params["out_ln.b"])
    z = ad.relu(ad.matmul(rep, head_params["field.w1"]) + head_params["field.b1"])
    return ad.matmul(z, head_params["field.w2"]) + head_params["field.b2"]


def train_fieldhead_step(seg_params: dict[str, Array], head_params: dict[str, Array],
                         batch, opt_state: dict, seg_cfg: sn.SegNetConfig,
                         head_cfg: FieldHeadConfig, tcfg: sn.TrainConfig, step: int,
                         freeze_segnet: bool = False) -> dict[str, float]:
    """One end-to-end update: backbone features -> kNN attention -> rendered NLL.

    batch carries the neural cloud side (neural_points01, neural_feats,
    neural_knn_idx) and the query side (query_points01 + ray bookkeeping,
    optionally a jittered copy for the proximity term).
    """
    tape = ad.Tape()
    if freeze_segnet:
        seg_leaves: dict = {name: ad.Tensor(v) for name, v in seg_params.items()}
    else:
        seg_leaves = {name: tape.leaf(v) for name, v in seg_params.items()}
    head_leaves = {name: tape.leaf(v) for name, v in head_params.items()}

    h, _ = sn.segnet_forward(seg_leaves, batch.neural_points01,
                             ad.Tensor(batch.neural_feats), seg_cfg,
                             knn_idx=batch.neural_knn_idx)
    npc = NeuralPointCloud(points01=batch.neural_points01, features=h.data,
                           translation=np.zeros(3), scale=1.0,
                           tree=batch.neural_tree)

    logits = query_points(head_leaves, head_cfg, npc, batch.points01,
                          npc_features=h)
    ce = sn.rendered_nll(logits, batch.weight, batch.ray_id, batch.residual,
                         batch.gt_class, batch.n_rays, seg_cfg.n_classes)

    prox_value = 0.0
    loss = ce
    if tcfg.lambda_proximity > 0.0 and batch.jitter_points01 is not None:
        logits_j = query_points(head_leaves, head_cfg, npc, batch.jitter_points01,
                                npc_features=h)
        diff = logits - logits_j
        prox = ad.reduce_mean(ad.mul(diff, diff))
        prox_value = float(prox.data)
        loss = ce + tcfg.lambda_proximity * prox

    if not np.isfinite(loss.data):
        raise sn.TrainingDiverged(f"non-finite loss at step {step}")

    grads = tape.backward(loss)
    lr = tcfg.lr_at(step)
    if not freeze_segnet:
        sn.sgd_update(seg_params, {n: grads.get(t) for n, t in seg_leaves.items()},
                      opt_state.setdefault("segnet", {}), lr=lr, momentum=tcfg.momentum)
    sn.sgd_update(head_params, {n: grads.get(t) for n, t in head_leaves.items()},
                  opt_state.setdefault("head", {}), lr=lr, momentum=tcfg.momentum)
    return {"step": step, "ce_loss": float(ce.data), "prox_loss": prox_value, "lr": lr}
