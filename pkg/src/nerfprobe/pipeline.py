"""End-to-end orchestration: scene suites, per-view training batches, training
loops for the segmentation network / field head / pretraining, and evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import camera as cam
from . import features as feat
from . import field as fld
from . import fieldhead as fh
from . import metrics as mx
from . import pretrain as pt
from . import probe as pb
from . import render as rnd
from . import segnet as sn

Array = np.ndarray


@dataclass
class RunConfig:
    """Flat experiment configuration; every key is settable from a config file."""

    seed: int = 0
    # scene generation
    n_classes: int = 4
    n_primitives_lo: int = 4
    n_primitives_hi: int = 9
    scale_lo: float = 0.12
    scale_hi: float = 0.24
    color_jitter: float = 0.12
    # cameras
    resolution: int = 48
    fov_deg: float = 55.0
    radius_scale: float = 1.25
    train_views: int = 8
    eval_views: int = 5
    # probing
    eta: float = 0.5
    sigma_min: float = 1.0
    d_plane: float = 0.005
    mode: str = "surface"
    n_coarse: int = 32
    n_fine: int = 8
    ground_removal: bool = True
    # features
    pe_bands: int = 4
    sh_degree: int = 3
    include_rgb: bool = True
    include_density: bool = True
    # network
    width: int = 64
    n_layers: int = 3
    knn_k: int = 8
    # training
    steps: int = 2000
    lr0: float = 5e-3
    lr1: float = 5e-4
    momentum: float = 0.9
    lambda_proximity: float = 0.01
    jitter_sigma: float = 0.003
    augment: bool = True
    # field head
    head_heads: int = 4
    head_layers: int = 2
    head_ff: int = 128
    head_k: int = 8
    head_steps: int = 1000
    neural_rays: int = 4096
    freeze_segnet: bool = False
    # pretraining
    mask_strategy: str = "patch_fps"
    mask_p: float = 0.5
    mask_keypoints: int = 8
    pretrain_steps: int = 600

    def scene_config(self) -> fld.SceneConfig:
        return fld.SceneConfig(
            n_primitives=(self.n_primitives_lo, self.n_primitives_hi),
            n_classes=self.n_classes,
            scale_range=(self.scale_lo, self.scale_hi),
            color_jitter=self.color_jitter,
        )

    def probe_config(self) -> pb.ProbeConfig:
        return pb.ProbeConfig(eta=self.eta, sigma_min=self.sigma_min,
                              d_plane=self.d_plane, mode=self.mode,
                              n_coarse=self.n_coarse, n_fine=self.n_fine,
                              ground_removal=self.ground_removal)

    def feature_config(self) -> feat.FeatureConfig:
        return feat.FeatureConfig(pe_bands=self.pe_bands, sh_degree=self.sh_degree,
                                  include_rgb=self.include_rgb,
                                  include_density=self.include_density)

    def seg_config(self) -> sn.SegNetConfig:
        return sn.SegNetConfig(n_classes=self.n_classes,
                               feature_dim=feat.feature_width(self.feature_config()),
                               width=self.width, n_layers=self.n_layers,
                               knn_k=self.knn_k)

    def train_config(self) -> sn.TrainConfig:
        return sn.TrainConfig(steps=self.steps, lr0=self.lr0, lr1=self.lr1,
                              momentum=self.momentum,
                              lambda_proximity=self.lambda_proximity,
                              jitter_sigma=self.jitter_sigma, augment=self.augment,
                              seed=self.seed, feature=self.feature_config())

    def head_config(self) -> fh.FieldHeadConfig:
        return fh.FieldHeadConfig(n_classes=self.n_classes, dim=self.width,
                                  heads=self.head_heads, layers=self.head_layers,
                                  ff_width=self.head_ff, k=self.head_k)

    def intrinsics(self) -> cam.Intrinsics:
        return cam.default_intrinsics(self.resolution, fov_deg=self.fov_deg)


def config_from_lines(lines, base: RunConfig | None = None) -> RunConfig:
    """Parse flat key=value text into a RunConfig; unknown keys are rejected."""
    cfg = base or RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str,
             "bool": lambda s: s.lower() in ("1", "true", "yes")}
    updates = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"unknown config key: {key!r}")
        updates[key] = casts[known[key]](value)
    return replace(cfg, **updates)


def config_to_lines(cfg: RunConfig) -> list[str]:
    return [f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)]


# ---------------------------------------------------------------------------
# scene suites and training batches


def make_scene(run: RunConfig, seed: int) -> fld.SceneSpec:
    return fld.make_scene(seed, run.scene_config())


def train_poses(run: RunConfig, scene: fld.SceneSpec, n: int | None = None,
                salt: int = 0) -> list[cam.CameraPose]:
    n = run.train_views if n is None else n
    return cam.sample_poses(scene, n, seed=scene.seed * 7919 + 17 + salt,
                            radius_scale=run.radius_scale, intrinsics=run.intrinsics())


@dataclass
class ViewData:
    """One probed view plus caches reused across training steps."""

    cloud: pb.SurfaceCloud
    knn_idx: Array


def prepare_view(run: RunConfig, scene: fld.SceneSpec, pose: cam.CameraPose,
                 seed: int) -> ViewData | None:
    cloud = pb.probe_view(scene, pose, run.probe_config(), seed=seed)
    if len(cloud) < 2:
        return None
    points01, _, _ = feat.normalize_cloud(cloud.points)
    return ViewData(cloud=cloud, knn_idx=sn.knn_indices(points01, run.knn_k))


def prepare_training_views(run: RunConfig, scenes: list[fld.SceneSpec]) -> list[ViewData]:
    views = []
    for scene in scenes:
        for v, pose in enumerate(train_poses(run, scene)):
            view = prepare_view(run, scene, pose, seed=scene.seed * 1009 + v)
            if view is not None:
                views.append(view)
    if not views:
        raise ValueError("no trainable views: every probed cloud was empty")
    return views


@dataclass
class SegBatch:
    points01: Array
    feats: Array
    knn_idx: Array
    weight: Array
    ray_id: Array
    residual: Array
    gt_class: Array
    n_rays: int
    jitter_points01: Array | None = None
    jitter_feats: Array | None = None
    jitter_knn_idx: Array | None = None


def build_seg_batch(view: ViewData, run: RunConfig, rng: np.random.Generator,
                    with_jitter: bool = True) -> SegBatch:
    """Augment (z-rotation), normalize, and encode one view into a step batch.

    Rotation plus uniform rescaling preserves the kNN graph, so the cached
    neighbor indices stay valid; the jittered copy gets a fresh graph.
    """
    cloud = view.cloud
    pts, dirs = cloud.points, cloud.view_dir
    if run.augment:
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        pts, dirs = feat.rotate_z(pts, dirs, theta)
    points01, _, _ = feat.normalize_cloud(pts)
    fcfg = run.feature_config()
    feats = feat.encode_features(points01, dirs, cloud.rgb, cloud.sigma, fcfg)

    jp = jf = jk = None
    if with_jitter and run.lambda_proximity > 0.0:
        jp = points01 + rng.normal(0.0, run.jitter_sigma, points01.shape)
        jf = feat.encode_features(jp, dirs, cloud.rgb, cloud.sigma, fcfg)
        jk = sn.knn_indices(jp, run.knn_k)

    return SegBatch(points01=points01, feats=feats, knn_idx=view.knn_idx,
                    weight=cloud.weight, ray_id=cloud.ray_id, residual=cloud.residual,
                    gt_class=cloud.ray_gt_class, n_rays=cloud.n_rays,
                    jitter_points01=jp, jitter_feats=jf, jitter_knn_idx=jk)


# ---------------------------------------------------------------------------
# segmentation training and evaluation


def train_segmentation(run: RunConfig, scenes: list[fld.SceneSpec],
                       init_params: dict[str, Array] | None = None,
                       metrics_path=None) -> tuple[dict[str, Array], list[dict]]:
    """Train the segmentation network over per-view batches of the given scenes."""
    views = prepare_training_views(run, scenes)
    seg_cfg = run.seg_config()
    tcfg = run.train_config()
    params = dict(init_params) if init_params is not None else sn.init_segnet(seg_cfg, seed=run.seed)
    opt_state: dict = {}
    rng = np.random.default_rng(run.seed + 1)
    order = rng.permutation(len(views))
    history = []
    for step in range(run.steps):
        if step % len(views) == 0:
            order = rng.permutation(len(views))
        view = views[order[step % len(views)]]
        batch = build_seg_batch(view, run, rng)
        history.append(sn.train_step(params, batch, opt_state, seg_cfg, tcfg, step))
    if metrics_path is not None:
        write_metrics_csv(metrics_path, history)
    return params, history


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ce_loss", "prox_loss", "lr"])
        for row in history:
            writer.writerow([row["step"], f"{row['ce_loss']:.6f}",
                             f"{row['prox_loss']:.6f}", f"{row['lr']:.8f}"])


def predict_view_segnet(params: dict[str, Array], run: RunConfig,
                        scene: fld.SceneSpec, pose: cam.CameraPose,
                        seed: int = 0) -> Array:
    """Semantic map for a novel view via probing + the segmentation network."""
    intr = pose.intrinsics
    cloud = pb.probe_view(scene, pose, run.probe_config(), seed=seed)
    if len(cloud) < 2:
        return np.zeros((intr.height, intr.width), dtype=np.int64)
    points01, _, _ = feat.normalize_cloud(cloud.points)
    feats = feat.encode_features(points01, cloud.view_dir, cloud.rgb, cloud.sigma,
                                 run.feature_config())
    _, logits = sn.segnet_forward(params, points01, feats, run.seg_config())
    probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    dist = pb.cloud_render_semantic(cloud, probs)
    return dist.argmax(axis=1).reshape(intr.height, intr.width)


def eval_poses(run: RunConfig, scene: fld.SceneSpec) -> list[cam.CameraPose]:
    return cam.sample_poses(scene, run.eval_views, seed=scene.seed * 6007 + 23,
                            radius_scale=run.radius_scale, intrinsics=run.intrinsics())


def evaluate_segnet(params: dict[str, Array], run: RunConfig, scene: fld.SceneSpec,
                    poses: list[cam.CameraPose] | None = None) -> tuple[float, Array, mx.ConfusionMatrix]:
    poses = poses or eval_poses(run, scene)
    cm = mx.ConfusionMatrix(run.n_classes)
    for v, pose in enumerate(poses):
        gt = rnd.render_view(scene, pose, run.n_coarse, run.n_fine).semantic
        pred = predict_view_segnet(params, run, scene, pose, seed=scene.seed * 31 + v)
        mx.confusion_update(cm, gt, pred)
    iou, mean = mx.miou(cm)
    return mean, iou, cm


# ---------------------------------------------------------------------------
# field head


@dataclass
class FieldBatch:
    neural_points01: Array
    neural_feats: Array
    neural_knn_idx: Array
    neural_tree: cKDTree
    points01: Array
    weight: Array
    ray_id: Array
    residual: Array
    gt_class: Array
    n_rays: int
    jitter_points01: Array | None = None


@dataclass
class SceneFieldData:
    """Per-scene neural cloud plus its query views, all in world space."""

    neural_cloud: pb.SurfaceCloud
    neural_knn_idx: Array
    query_views: list[pb.SurfaceCloud]


def prepare_field_scene(run: RunConfig, scene: fld.SceneSpec) -> SceneFieldData | None:
    poses = train_poses(run, scene)
    neural = pb.probe_scene(scene, poses, run.neural_rays, run.probe_config(),
                            seed=scene.seed * 41 + 5)
    if len(neural) < max(2, run.head_k):
        return None
    points01, _, _ = feat.normalize_cloud(neural.points)
    views = []
    for v, pose in enumerate(poses):
        cloud = pb.probe_view(scene, pose, run.probe_config(), seed=scene.seed * 1009 + v)
        if len(cloud) >= 2:
            views.append(cloud)
    if not views:
        return None
    return SceneFieldData(neural_cloud=neural,
                          neural_knn_idx=sn.knn_indices(points01, run.knn_k),
                          query_views=views)


def build_field_batch(data: SceneFieldData, view_idx: int, run: RunConfig,
                      rng: np.random.Generator) -> FieldBatch:
    """Joint z-rotation of the neural and query clouds, normalized together."""
    neural = data.neural_cloud
    query = data.query_views[view_idx]
    n_pts, n_dirs = neural.points, neural.view_dir
    q_pts = query.points
    if run.augment:
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        center = n_pts.mean(axis=0)
        n_pts, n_dirs = feat.rotate_z(n_pts, n_dirs, theta, center=center)
        q_pts, _ = feat.rotate_z(q_pts, query.view_dir, theta, center=center)
    points01, translation, scale = feat.normalize_cloud(n_pts)
    q01 = (q_pts - translation) / scale
    feats = feat.encode_features(points01, n_dirs, neural.rgb, neural.sigma,
                                 run.feature_config())
    jq = None
    if run.lambda_proximity > 0.0:
        jq = q01 + rng.normal(0.0, run.jitter_sigma, q01.shape)
    return FieldBatch(neural_points01=points01, neural_feats=feats,
                      neural_knn_idx=data.neural_knn_idx, neural_tree=cKDTree(points01),
                      points01=q01, weight=query.weight, ray_id=query.ray_id,
                      residual=query.residual, gt_class=query.ray_gt_class,
                      n_rays=query.n_rays, jitter_points01=jq)


def train_fieldhead(run: RunConfig, scenes: list[fld.SceneSpec],
                    seg_params: dict[str, Array] | None = None
                    ) -> tuple[dict[str, Array], dict[str, Array], list[dict]]:
    """Train the field head (and, unless frozen, the backbone) end to end."""
    data = [d for d in (prepare_field_scene(run, s) for s in scenes) if d is not None]
    if not data:
        raise ValueError("no usable scenes for field-head training")
    seg_cfg = run.seg_config()
    head_cfg = run.head_config()
    tcfg = replace(run.train_config(), steps=run.head_steps)
    seg_params = dict(seg_params) if seg_params is not None else sn.init_segnet(seg_cfg, seed=run.seed)
    head_params = fh.init_fieldhead(head_cfg, seed=run.seed + 7)
    opt_state: dict = {}
    rng = np.random.default_rng(run.seed + 11)
    history = []
    for step in range(run.head_steps):
        d = data[step % len(data)]
        batch = build_field_batch(d, int(rng.integers(len(d.query_views))), run, rng)
        history.append(fh.train_fieldhead_step(
            seg_params, head_params, batch, opt_state, seg_cfg, head_cfg, tcfg, step,
            freeze_segnet=run.freeze_segnet))
    return seg_params, head_params, history


def build_scene_npc(seg_params: dict[str, Array], run: RunConfig,
                    scene: fld.SceneSpec) -> fh.NeuralPointCloud | None:
    poses = train_poses(run, scene)
    neural = pb.probe_scene(scene, poses, run.neural_rays, run.probe_config(),
                            seed=scene.seed * 41 + 5)
    if len(neural) < max(2, run.head_k):
        return None
    points01, translation, scale = feat.normalize_cloud(neural.points)
    feats = feat.encode_features(points01, neural.view_dir, neural.rgb, neural.sigma,
                                 run.feature_config())
    return fh.build_neural_pc(seg_params, run.seg_config(), points01, feats,
                              translation, scale)


def predict_view_fieldhead(seg_params, head_params, npc: fh.NeuralPointCloud,
                           run: RunConfig, scene: fld.SceneSpec, pose: cam.CameraPose,
                           seed: int = 0) -> Array:
    """Semantic map for a novel view: probe query points, ask the cached cloud."""
    intr = pose.intrinsics
    query = pb.probe_view(scene, pose, run.probe_config(), seed=seed)
    if len(query) < 1:
        return np.zeros((intr.height, intr.width), dtype=np.int64)
    q01 = (query.points - npc.translation) / npc.scale
    logits = fh.query_points(head_params, run.head_config(), npc, q01)
    probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    dist = pb.cloud_render_semantic(query, probs)
    return dist.argmax(axis=1).reshape(intr.height, intr.width)


def evaluate_fieldhead(seg_params, head_params, run: RunConfig, scene: fld.SceneSpec,
                       poses: list[cam.CameraPose] | None = None
                       ) -> tuple[float, Array, mx.ConfusionMatrix]:
    poses = poses or eval_poses(run, scene)
    npc = build_scene_npc(seg_params, run, scene)
    cm = mx.ConfusionMatrix(run.n_classes)
    for v, pose in enumerate(poses):
        gt = rnd.render_view(scene, pose, run.n_coarse, run.n_fine).semantic
        if npc is None:
            pred = np.zeros_like(gt)
        else:
            pred = predict_view_fieldhead(seg_params, head_params, npc, run, scene,
                                          pose, seed=scene.seed * 31 + v)
        mx.confusion_update(cm, gt, pred)
    iou, mean = mx.miou(cm)
    return mean, iou, cm


# ---------------------------------------------------------------------------
# pretraining


def pretrain_encoder(run: RunConfig, scenes: list[fld.SceneSpec],
                     objectives: tuple[str, ...] = ("normal",)
                     ) -> tuple[dict[str, Array], dict[str, Array], list[dict]]:
    """Masked-autoencoding pretraining of the backbone over the given scenes."""
    views = prepare_training_views(run, scenes)
    seg_cfg = run.seg_config()
    tcfg = replace(run.train_config(), steps=run.pretrain_steps)
    enc = {name: v for name, v in sn.init_segnet(seg_cfg, seed=run.seed).items()
           if name in sn.encoder_param_names(seg_cfg)}
    dec = pt.init_decoder(seg_cfg, seed=run.seed + 3)
    opt_state: dict = {}
    rng = np.random.default_rng(run.seed + 13)
    fcfg = run.feature_config()
    history = []
    for step in range(run.pretrain_steps):
        view = views[step % len(views)]
        cloud = view.cloud
        points01, _, _ = feat.normalize_cloud(cloud.points)
        spec = pt.MaskSpec(strategy=run.mask_strategy, p=run.mask_p,
                           k_keypoints=run.mask_keypoints,
                           seed=int(rng.integers(2 ** 31)))
        batch = pt.prepare_batch(points01, cloud.view_dir, cloud.rgb, cloud.sigma,
                                 cloud.normal, fcfg, spec)
        history.append(pt.pretrain_step(enc, dec, batch, seg_cfg, objectives,
                                        opt_state, tcfg, step))
    return enc, dec, history
