"""Metrics and experiment harnesses.

Four instruments, all seed-deterministic and numpy-only:

- segmentation metrics (per-class IoU, mIoU, pixel accuracy) computed from
  explicit confusion matrices so batches accumulate exactly;
- a cross-view consistency score that back-projects one view's predicted
  mask through the *analytic* depth and checks agreement in every other
  view — the quantitative form of "do the masks describe one 3D object";
- spatiotemporal line textures (one scanline stacked across a pose sweep)
  for visual consistency audits;
- a pointwise part classifier trained on generated clouds, plus the trend
  and ablation harnesses that produce CSV and aligned-text reports.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import backbone as bb
from . import cameras, factory, nnops, optim, oracle
from . import scene as sc
from . import semantic as sem


# ===========================================================================
# Segmentation metrics
# ===========================================================================

@dataclass(frozen=True)
class SegMetrics:
    """Per-class IoU (NaN for classes absent from both masks), their mean
    over present classes, pixel accuracy, per-class ground-truth pixel
    counts, and the confusion matrix everything was derived from."""
    iou: np.ndarray           # (C,) float, NaN = class absent from gt & pred
    miou: float
    accuracy: float
    pixel_counts: np.ndarray  # (C,) int64 ground-truth pixels per class
    confusion: np.ndarray     # (C, C) int64, rows = gt, cols = predicted


def confusion_matrix(pred: np.ndarray, gt: np.ndarray,
                     num_classes: int = sc.NUM_CLASSES) -> np.ndarray:
    """(C, C) count matrix with ground truth on rows, predictions on columns.

    Summing matrices from several images is exactly the matrix of the pooled
    pixels, so batch evaluation accumulates these and converts once.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    for name, v in (("pred", p), ("gt", g)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} labels fall outside [0, {num_classes})")
    return np.bincount(g * num_classes + p,
                       minlength=num_classes * num_classes
                       ).reshape(num_classes, num_classes)


def metrics_from_confusion(conf: np.ndarray) -> SegMetrics:
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1)
    union = gt_count + conf.sum(axis=0) - tp
    present = union > 0
    iou = np.full(conf.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    total = conf.sum()
    return SegMetrics(
        iou=iou,
        miou=float(iou[present].mean()) if present.any() else float("nan"),
        accuracy=float(tp.sum() / total) if total else float("nan"),
        pixel_counts=gt_count,
        confusion=conf,
    )


def seg_metrics(pred: np.ndarray, gt: np.ndarray,
                num_classes: int = sc.NUM_CLASSES) -> SegMetrics:
    """Standard segmentation scores for one predicted/ground-truth mask pair.

    Classes absent from both masks carry NaN IoU and do not enter the mean;
    a class absent from only one side scores 0 and does.
    """
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes))


# ===========================================================================
# Cross-view consistency
# ===========================================================================

def consistency_tol(pose: cameras.CameraPose, n_samples: int) -> float:
    """Depth agreement slack: two marching steps of the reference renderer."""
    near, far = pose.near_far()
    return 2.0 * (far - near) / n_samples


def view_consistency(masks: np.ndarray, depths: np.ndarray,
                     poses: list[cameras.CameraPose], tol: float) -> float:
    """Agreement of a mask set with itself across viewpoints.

    For every ordered pose pair (a, b): lift view a's labeled pixels through
    the supplied depth maps, project them into view b, keep points whose
    projected z-depth matches view b's depth within ``tol`` (i.e. the same
    surface is visible there, not occluded), and score the fraction whose
    label matches view b's mask.  Returns the mean over pairs that had any
    mutually visible pixels, or NaN when no pair did — callers must treat
    NaN as "undefined", never as zero.

    The depth maps are the *geometric* ones (here: analytic renders), so the
    score isolates label consistency from depth-estimation error.
    """
    masks = [np.asarray(m) for m in masks]
    depths = [np.asarray(d) for d in depths]
    n = len(poses)
    if n < 2 or len(masks) != n or len(depths) != n:
        raise ValueError("need matching masks/depths/poses lists, length >= 2")
    res = masks[0].shape[0]

    fractions = []
    for a in range(n):
        sent_a = poses[a].depth_sentinel - 1e-9
        fg = (masks[a] > 0) & (depths[a] < sent_a)
        rows, cols = np.nonzero(fg)
        if rows.size == 0:
            continue
        labels = masks[a][rows, cols]
        pts = cameras.backproject_pixels(poses[a], res, rows, cols,
                                         depths[a][rows, cols])
        for b in range(n):
            if b == a:
                continue
            r2, c2, z2 = cameras.project_points(poses[b], res, pts)
            ok = (r2 >= 0) & (r2 < res) & (c2 >= 0) & (c2 < res) & (z2 > 0)
            if not ok.any():
                continue
            ri = r2[ok].astype(np.intp)
            ci = c2[ok].astype(np.intp)
            db = depths[b][ri, ci]
            vis = (db < poses[b].depth_sentinel - 1e-9) \
                & (np.abs(db - z2[ok]) <= tol)
            if not vis.any():
                continue
            match = masks[b][ri[vis], ci[vis]] == labels[ok][vis]
            fractions.append(float(match.mean()))
    return float(np.mean(fractions)) if fractions else float("nan")


def oracle_views(z: np.ndarray, poses: list[cameras.CameraPose],
                 resolution: int, n_samples: int = oracle.DENSE_SAMPLES
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth (masks, z-depths) for a pose list, one render pass.

    Depth is gated to the *labeled* surface: background pixels carry the
    sentinel even when a grazing ray accumulated enough opacity for a depth
    estimate.  Ungated, those halo pixels pass the consistency metric's
    depth test with a background label and cap even the ground-truth masks'
    self-consistency near 0.91; gated, the metric compares labels only where
    both views solidly see the surface, and the ceiling is ~1.

    Shared by the consistency metric and its calibration ceiling so the two
    scores are measured against identical geometry.
    """
    params = sc.decode_scene(z)
    masks, depths = [], []
    for p in poses:
        r = oracle.render_gt(params, p, resolution, n_samples)
        masks.append(r.mask)
        depths.append(np.where(r.mask > 0, r.depth,
                               np.float32(p.depth_sentinel)))
    return np.stack(masks), np.stack(depths)


def cross_view_consistency(z, poses: list[cameras.CameraPose],
                           mask_fn=None, resolution: int = 64,
                           n_samples: int = oracle.DENSE_SAMPLES,
                           tol: float | None = None) -> float:
    """3D consistency of predicted masks over a pose sweep of one scene.

    ``mask_fn(index, pose) -> (res, res) uint8`` supplies the prediction for
    each view; passing None scores the ground-truth masks against themselves,
    which calibrates the ceiling the metric's quantization allows.
    """
    masks, depths = oracle_views(z, poses, resolution, n_samples)
    if tol is None:
        tol = consistency_tol(poses[0], n_samples)
    if mask_fn is not None:
        pred = []
        for i, pose in enumerate(poses):
            m = np.asarray(mask_fn(i, pose))
            if m.shape != (resolution, resolution):
                raise ValueError(f"mask_fn returned shape {m.shape}, "
                                 f"expected {(resolution, resolution)}")
            pred.append(m)
        masks = np.stack(pred)
    return view_consistency(masks, depths, poses, tol)


# ===========================================================================
# Spatiotemporal line textures
# ===========================================================================

def colorize_mask(mask: np.ndarray, palette: np.ndarray | None = None
                  ) -> np.ndarray:
    """Class-id mask to an RGB uint8 image via the palette lookup table."""
    pal = sc.MASK_PALETTE if palette is None else np.asarray(palette, np.uint8)
    return pal[np.asarray(mask)]


def epi_texture(masks: np.ndarray, row: int,
                palette: np.ndarray | None = None) -> np.ndarray:
    """Stack scanline ``row`` of each mask frame into a (frames, width, 3)
    RGB image.  Smooth diagonal streaks across an azimuth sweep mean the
    labels track the same 3D surface; ragged rows mean view-dependent flicker.
    """
    arr = np.asarray(masks)
    if arr.ndim != 3:
        raise ValueError("expected a (frames, height, width) mask sequence")
    if not 0 <= row < arr.shape[1]:
        raise ValueError(f"row {row} out of range for height {arr.shape[1]}")
    return colorize_mask(arr[:, row, :], palette)


def epi_rgb_texture(rgbs: np.ndarray, row: int) -> np.ndarray:
    """Companion texture from rendered RGB frames (floats in [0, 1])."""
    arr = np.asarray(rgbs)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError("expected a (frames, height, width, 3) sequence")
    if not 0 <= row < arr.shape[1]:
        raise ValueError(f"row {row} out of range for height {arr.shape[1]}")
    line = np.clip(arr[:, row, :, :], 0.0, 1.0)
    return (line * 255.0 + 0.5).astype(np.uint8)


def save_png(path: str, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image)).save(path)


# ===========================================================================
# Pointwise part classifier
# ===========================================================================

POINT_FEATURES = 5   # xyz, radial distance, height
_PC_HIDDEN = 64


@dataclass
class PointClassifier:
    """Per-point part classifier: 5 -> 64 -> 64 -> 64 -> C, leaky-rectifier.

    Deliberately has no global pooling: at this scale, per-point geometry
    (position, radius, height) separates the four classes, and what the
    trend harness measures is sample-count behaviour, not architecture.
    """
    params: dict[str, np.ndarray]
    num_classes: int = sc.NUM_CLASSES

    def __post_init__(self):
        dims = (POINT_FEATURES, _PC_HIDDEN, _PC_HIDDEN, _PC_HIDDEN,
                self.num_classes)
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            if self.params[f"w{i}"].shape != (fi, fo):
                raise ValueError(f"w{i} must have shape {(fi, fo)}")
            if self.params[f"b{i}"].shape != (fo,):
                raise ValueError(f"b{i} must have shape {(fo,)}")


def point_features(points: np.ndarray) -> np.ndarray:
    """(n, 5) features: xyz, distance from the cloud frame's origin, height."""
    pts = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(pts, axis=-1, keepdims=True)
    return np.concatenate([pts, r, pts[:, 2:3]], axis=1)


def init_point_classifier(seed: int, num_classes: int = sc.NUM_CLASSES
                          ) -> PointClassifier:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    dims = (POINT_FEATURES, _PC_HIDDEN, _PC_HIDDEN, _PC_HIDDEN, num_classes)
    params: dict[str, np.ndarray] = {}
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params[f"w{i}"] = nnops.he_normal(rng, (fi, fo), fi)
        params[f"b{i}"] = np.zeros(fo)
    return PointClassifier(params=params, num_classes=num_classes)


def classifier_forward(clf: PointClassifier, feats: np.ndarray
                       ) -> tuple[np.ndarray, tuple]:
    p = clf.params
    z1 = feats @ p["w1"] + p["b1"]
    h1 = nnops.leaky_relu(z1)
    z2 = h1 @ p["w2"] + p["b2"]
    h2 = nnops.leaky_relu(z2)
    z3 = h2 @ p["w3"] + p["b3"]
    h3 = nnops.leaky_relu(z3)
    logits = h3 @ p["w4"] + p["b4"]
    return logits, (feats, z1, h1, z2, h2, z3, h3)


def classifier_backward(clf: PointClassifier, cache: tuple,
                        grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    feats, z1, h1, z2, h2, z3, h3 = cache
    p = clf.params
    grads = {"w4": h3.T @ grad_logits, "b4": grad_logits.sum(axis=0)}
    d3 = nnops.leaky_relu_grad(z3, grad_logits @ p["w4"].T)
    grads["w3"] = h2.T @ d3
    grads["b3"] = d3.sum(axis=0)
    d2 = nnops.leaky_relu_grad(z2, d3 @ p["w3"].T)
    grads["w2"] = h1.T @ d2
    grads["b2"] = d2.sum(axis=0)
    d1 = nnops.leaky_relu_grad(z1, d2 @ p["w2"].T)
    grads["w1"] = feats.T @ d1
    grads["b1"] = d1.sum(axis=0)
    return grads


def predict_points(clf: PointClassifier, points: np.ndarray) -> np.ndarray:
    """Hard per-point labels, uint8."""
    logits, _ = classifier_forward(clf, point_features(points))
    return logits.argmax(axis=-1).astype(np.uint8)


def train_point_classifier(train_clouds: list, test_clouds: list,
                           seed: int = 0, steps: int = 3000, lr: float = 1e-3,
                           batch_clouds: int = 4,
                           num_classes: int = sc.NUM_CLASSES
                           ) -> tuple[SegMetrics, PointClassifier]:
    """Train on labeled clouds, score per-point metrics on the test clouds.

    Each step draws ``batch_clouds`` distinct clouds (fewer if the split is
    smaller) and takes one Adam step on their pooled cross-entropy.  Test
    clouds carry their own reference labels — the harness is what decides
    whether those came from the analytic scene or a fused prediction.
    """
    if not train_clouds or not test_clouds:
        raise ValueError("both splits must be non-empty")
    feats = [point_features(c.points) for c in train_clouds]
    labels = [np.asarray(c.labels, dtype=np.int64) for c in train_clouds]
    clf = init_point_classifier(seed, num_classes)
    opt = optim.Adam(clf.params, lr=lr)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    take = min(batch_clouds, len(train_clouds))
    for _ in range(steps):
        pick = rng.choice(len(train_clouds), size=take, replace=False)
        x = np.concatenate([feats[i] for i in pick])
        y = np.concatenate([labels[i] for i in pick])
        logits, cache = classifier_forward(clf, x)
        _, dlogits = nnops.softmax_ce(logits, y)
        opt.step(clf.params, classifier_backward(clf, cache, dlogits))

    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for c in test_clouds:
        conf += confusion_matrix(predict_points(clf, c.points), c.labels,
                                 num_classes)
    return metrics_from_confusion(conf), clf


@dataclass(frozen=True)
class TrendRow:
    size: int
    miou: float
    accuracy: float


def point_trend(train_clouds: list, test_clouds: list, sizes,
                seed: int = 0, steps: int = 3000, lr: float = 1e-3,
                batch_clouds: int = 4) -> list[TrendRow]:
    """Fixed classifier and test set, growing training prefix.

    Every cell reuses the same seed, so runs differ only in how much data
    the optimizer saw — the quantity the sample-count table isolates.
    """
    rows = []
    for s in sizes:
        s = int(s)
        if not 0 < s <= len(train_clouds):
            raise ValueError(f"size {s} exceeds the {len(train_clouds)} "
                             "available training clouds")
        m, _ = train_point_classifier(train_clouds[:s], test_clouds,
                                      seed=seed, steps=steps, lr=lr,
                                      batch_clouds=batch_clouds)
        rows.append(TrendRow(size=s, miou=m.miou, accuracy=m.accuracy))
    return rows


def write_trend_csv(path: str, rows: list[TrendRow]) -> None:
    lines = ["train_clouds,miou,accuracy"]
    lines += [f"{r.size},{r.miou:.6f},{r.accuracy:.6f}" for r in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ===========================================================================
# Ablation harness
# ===========================================================================

@dataclass(frozen=True)
class AblationConfig:
    """Scale knobs for the ablation grid.

    Defaults reproduce the full protocol (30 scenes x 3 views, counts
    30/45/90); tests and smoke runs shrink everything together.  The last
    annotation count must equal the full pool, n_scenes * views_per_scene.
    """
    seed: int = 0
    n_scenes: int = 30
    views_per_scene: int = 3
    annotation_counts: tuple[int, ...] = (30, 45, 90)
    raw_resolution: int = 32
    sr_factor: int = 4
    samples_per_ray: int = 48
    steps: int = 2000
    rays_per_step: int = 1024
    lr: float = 1e-3
    azimuth_range: tuple[float, float] = (-np.pi / 6, np.pi / 6)
    elevation: float = 0.12
    radius: float = 2.5
    individual_test: int = 90
    video_latents: int = 10
    video_frames: int = 61
    oracle_samples: int = oracle.DENSE_SAMPLES

    @property
    def mask_resolution(self) -> int:
        return self.raw_resolution * self.sr_factor


@dataclass(frozen=True)
class AblationRow:
    block: str
    cell: str
    multiscale: bool
    density_prior: bool
    annotations: int
    individual_miou: float
    individual_accuracy: float
    video_miou: float
    video_accuracy: float
    train_seconds: float


@dataclass
class AblationReport:
    rows: list[AblationRow]
    notes: list[str]
    config: AblationConfig

    def row(self, block: str, cell: str) -> AblationRow:
        for r in self.rows:
            if r.block == block and r.cell == cell:
                return r
        raise KeyError(f"no row ({block!r}, {cell!r})")


_ABLATION_NOTES = [
    "'w/o density prior' trains an auxiliary density head on the semantic "
    "decoder, supervised only through the segmentation loss.",
    "no transfer-learning comparison: it would require an external "
    "pretrained 2D segmenter, which this package deliberately avoids.",
]


def run_ablation(cfg: AblationConfig = AblationConfig(),
                 progress=None) -> AblationReport:
    """Train and score every ablation cell on fixed test sets.

    Three blocks: multiscale vs finest-level-only tri-plane features,
    frozen density prior vs an independently decoded density head, and
    annotation budget.  Every cell is a fresh seeded training; baseline
    configurations that appear in more than one block are trained once,
    which is exactly equivalent because training is seed-deterministic.

    Scoring pools a confusion matrix over a fixed individual test set
    (held-out scenes, one random pose each) and a fixed video test set
    (held-out scenes swept across the azimuth range), both labeled by the
    analytic renderer at the branch's output resolution.
    """
    counts = tuple(int(c) for c in cfg.annotation_counts)
    full = cfg.n_scenes * cfg.views_per_scene
    if list(counts) != sorted(counts) or counts[-1] != full:
        raise ValueError(f"annotation_counts must ascend to the full pool "
                         f"({full}), got {counts}")
    say = progress if progress is not None else (lambda _msg: None)

    res = cfg.mask_resolution
    say(f"annotations: {cfg.n_scenes} scenes x {cfg.views_per_scene} views "
        f"at {res}px")
    ann = oracle.make_annotations(cfg.seed, cfg.n_scenes,
                                  cfg.views_per_scene,
                                  azimuth_range=cfg.azimuth_range,
                                  resolution=res,
                                  elevation=cfg.elevation,
                                  radius=cfg.radius,
                                  n_samples=cfg.oracle_samples)

    # Fixed test sets from an independent seed stream (training scenes use
    # the annotation stream; continuous latents never collide).
    trng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    lo, hi = cfg.azimuth_range
    specs: list[tuple[str, np.ndarray, cameras.CameraPose]] = []
    for z in sc.sample_latents(trng, cfg.individual_test):
        pose = cameras.orbit_poses(np.array([trng.uniform(lo, hi)]),
                                   elevation=cfg.elevation,
                                   radius=cfg.radius)[0]
        specs.append(("individual", z, pose))
    sweep = np.linspace(lo, hi, cfg.video_frames)
    for z in sc.sample_latents(trng, cfg.video_latents):
        for pose in cameras.orbit_poses(sweep, elevation=cfg.elevation,
                                        radius=cfg.radius):
            specs.append(("video", z, pose))
    say(f"test renders: {len(specs)} ground-truth views")
    items = [(split, z, pose,
              oracle.render_gt(sc.decode_scene(z), pose, res,
                               cfg.oracle_samples).mask)
             for split, z, pose in specs]

    trained: dict[tuple, tuple] = {}

    def get_trained(multiscale: bool, density_prior: bool, count: int):
        key = (multiscale, density_prior, count)
        if key not in trained:
            say(f"training: multiscale={multiscale} "
                f"density_prior={density_prior} annotations={count}")
            sub = oracle.AnnotationSet(ann.annotations[:count],
                                       resolution=ann.resolution,
                                       seed=ann.seed, palette=ann.palette)
            tcfg = sem.TrainConfig(steps=cfg.steps, lr=cfg.lr,
                                   rays_per_step=cfg.rays_per_step,
                                   seed=cfg.seed,
                                   raw_resolution=cfg.raw_resolution,
                                   sr_factor=cfg.sr_factor,
                                   samples_per_ray=cfg.samples_per_ray,
                                   multiscale=multiscale,
                                   density_prior=density_prior)
            t0 = time.perf_counter()
            dec, sr_mod, _ = sem.train(sub, tcfg)
            trained[key] = (dec, sr_mod, time.perf_counter() - t0)
        return trained[key]

    def evaluate(dec, sr_mod, multiscale: bool) -> dict[str, SegMetrics]:
        fcfg = factory.FactoryConfig(raw_resolution=cfg.raw_resolution,
                                     sr_factor=cfg.sr_factor,
                                     samples_per_ray=cfg.samples_per_ray,
                                     multiscale=multiscale,
                                     azimuth_range=cfg.azimuth_range,
                                     elevation=cfg.elevation,
                                     radius=cfg.radius)
        planes: dict[bytes, bb.TriPlane] = {}
        conf = {s: np.zeros((sc.NUM_CLASSES, sc.NUM_CLASSES), np.int64)
                for s in ("individual", "video")}
        for split, z, pose, gt_mask in items:
            kb = z.tobytes()
            if kb not in planes:
                planes[kb] = bb.build_semantic_triplane(
                    bb.synthesize_pyramid(z), multiscale=multiscale)
            mask, _ = factory.predict_view(z, pose, dec, sr_mod, fcfg,
                                           triplane=planes[kb])
            conf[split] += confusion_matrix(mask, gt_mask)
        return {s: metrics_from_confusion(c) for s, c in conf.items()}

    cells = [
        ("multiscale", "w/o multiscale", False, True, full),
        ("multiscale", "w/ multiscale", True, True, full),
        ("density prior", "w/o density prior", True, False, full),
        ("density prior", "w/ density prior", True, True, full),
    ]
    cells += [("annotations", f"{c} annotations", True, True, c)
              for c in counts]

    rows = []
    for block, cell, multiscale, prior, count in cells:
        dec, sr_mod, wall = get_trained(multiscale, prior, count)
        say(f"scoring: {block} / {cell}")
        m = evaluate(dec, sr_mod, multiscale)
        rows.append(AblationRow(
            block=block, cell=cell, multiscale=multiscale,
            density_prior=prior, annotations=count,
            individual_miou=m["individual"].miou,
            individual_accuracy=m["individual"].accuracy,
            video_miou=m["video"].miou,
            video_accuracy=m["video"].accuracy,
            train_seconds=wall,
        ))
    return AblationReport(rows=rows, notes=list(_ABLATION_NOTES), config=cfg)


def format_ablation_report(report: AblationReport) -> str:
    cfg = report.config
    head = [
        "ablation report",
        f"config: seed={cfg.seed} scenes={cfg.n_scenes}x"
        f"{cfg.views_per_scene} raw={cfg.raw_resolution} "
        f"sr={cfg.sr_factor} steps={cfg.steps} "
        f"tests={cfg.individual_test}+{cfg.video_latents}x{cfg.video_frames}",
    ]
    head += [f"note: {n}" for n in report.notes]
    cols = f"{'block':<14} {'cell':<20} {'ind mIoU':>9} {'ind acc':>8} " \
           f"{'vid mIoU':>9} {'vid acc':>8} {'train s':>8}"
    lines = head + ["", cols, "-" * len(cols)]
    last_block = None
    for r in report.rows:
        if last_block is not None and r.block != last_block:
            lines.append("")
        last_block = r.block
        lines.append(f"{r.block:<14} {r.cell:<20} {r.individual_miou:>9.4f} "
                     f"{r.individual_accuracy:>8.4f} {r.video_miou:>9.4f} "
                     f"{r.video_accuracy:>8.4f} {r.train_seconds:>8.1f}")
    return "\n".join(lines) + "\n"


def write_ablation_outputs(report: AblationReport, out_dir: str) -> None:
    """ablation.csv (machine-readable) + ablation.txt (aligned table)."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["block,cell,multiscale,density_prior,annotations,"
             "individual_miou,individual_accuracy,video_miou,"
             "video_accuracy,train_seconds"]
    for r in report.rows:
        lines.append(f"{r.block},{r.cell},{int(r.multiscale)},"
                     f"{int(r.density_prior)},{r.annotations},"
                     f"{r.individual_miou:.6f},{r.individual_accuracy:.6f},"
                     f"{r.video_miou:.6f},{r.video_accuracy:.6f},"
                     f"{r.train_seconds:.2f}")
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
        fh.write(format_ablation_report(report))
