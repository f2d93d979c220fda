"""One executable for the whole pipeline.

Every stage — annotate, train, generate, backproject, fuse, invert, edit,
eval — runs behind a shared config file, a master seed, and a thread cap.
Commands write their artifact plus a JSON run-record (argv, config hash,
seed, wall time); artifacts are write-once and byte-reproducible from the
run-record, so the run-record itself is the only file that may differ
between identical runs (it carries the wall time).

Exit codes: 0 success, 1 numerical failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import yaml

from . import backbone as bb
from . import cameras, evaluation, factory, inversion, oracle
from . import scene as sc
from . import semantic as sem

FORMAT_VERSION = 1
RUN_RECORD = "run_record.json"

# Held-out draws per harness come from spawn keys off the master seed, so
# no evaluation stream can collide with the annotation/training stream.
_STREAM_SEG = 1
_STREAM_CONSISTENCY = 2
_STREAM_EPI = 3
_STREAM_TREND_TRAIN = 4
_STREAM_TREND_TEST = 5


class UsageError(Exception):
    """Bad arguments, bad config, or missing prerequisites (exit 2)."""


class NumericalFailure(Exception):
    """A computation produced an undefined or diverged result (exit 1)."""


# ===========================================================================
# Global configuration
# ===========================================================================

@dataclass(frozen=True)
class GlobalConfig:
    """Every knob a command may need, loadable from one YAML/JSON file.

    Flat on purpose: the file mirrors this dataclass field-for-field and
    unknown keys are rejected, so a config can never silently misspell an
    option.  Command-line ``--seed`` / ``--threads`` override the file.
    """
    format_version: int = FORMAT_VERSION
    seed: int = 0
    threads: int = 1
    out_root: str = "."
    # scene sampling and rendering
    raw_resolution: int = 32          # semantic render; mask = raw * sr
    sr_factor: int = 4
    samples_per_ray: int = 48
    oracle_samples: int = oracle.DENSE_SAMPLES
    radius: float = 2.5
    elevation: float = 0.12
    azimuth_min: float = -float(np.pi / 6)
    azimuth_max: float = float(np.pi / 6)
    # semantic branch training
    train_steps: int = 2000
    train_lr: float = 1e-3
    rays_per_step: int = 1024
    sr_every: int = 8
    multiscale: bool = True
    density_prior: bool = True
    # data factory
    pose_mode: str = "uniform"
    render_rgb: bool = True
    fusion_views: int = 8
    fusion_elevation: float = 0.2
    voxel: float = 0.01
    # inversion and editing
    inv_steps: int = 300
    inv_lr: float = 0.05
    eps_fd: float = 1e-2
    inv_resolution: int = 32
    inv_samples_per_ray: int = 48
    restarts: int = 4
    patience: int = 30
    lambda_label: float = 1.0
    lambda_rgb: float = 10.0
    lambda_perceptual: float = 1.0

    def __post_init__(self):
        if self.format_version != FORMAT_VERSION:
            raise UsageError(f"config format_version {self.format_version} "
                             f"unsupported (this build reads {FORMAT_VERSION})")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")

    @property
    def azimuth_range(self) -> tuple[float, float]:
        return (self.azimuth_min, self.azimuth_max)

    @property
    def mask_resolution(self) -> int:
        return self.raw_resolution * self.sr_factor

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | None, seed: int | None = None,
                threads: int | None = None) -> GlobalConfig:
    """Config file plus command-line overrides; unknown keys are fatal."""
    values: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"missing config file: {path}")
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a mapping")
        known = {f.name for f in fields(GlobalConfig)}
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values = loaded
    if seed is not None:
        values["seed"] = seed
    if threads is not None:
        values["threads"] = threads
    try:
        return GlobalConfig(**values)
    except TypeError as e:
        raise UsageError(f"bad config: {e}") from None


def _stream(cfg: GlobalConfig, key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(cfg.seed, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(seq))


# ===========================================================================
# Artifact plumbing
# ===========================================================================

def _resolve(cfg: GlobalConfig, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(cfg.out_root, path)


def _fresh_dir(path: str) -> str:
    if os.path.isdir(path) and os.listdir(path):
        raise UsageError(f"refusing to overwrite existing artifact: {path}")
    os.makedirs(path, exist_ok=True)
    return path


def _fresh_file(path: str) -> str:
    if os.path.exists(path):
        raise UsageError(f"refusing to overwrite existing artifact: {path}")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"missing {what}: {path}")
    return path


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("segfactory")
    except Exception:
        return "unknown"


def _write_run_record(out: str, cfg: GlobalConfig, argv: list[str],
                      t0: float, outputs: list[str]) -> None:
    """JSON sidecar describing how the artifact came to be.

    Lives at ``<out>/run_record.json`` for directory artifacts and
    ``<out>.run.json`` for file artifacts.  It is the one file excluded
    from byte-identity comparisons — it records the wall time.
    """
    record = {
        "format_version": FORMAT_VERSION,
        "tool_version": _version(),
        "command": argv,
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "wall_time_s": round(time.time() - t0, 3),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out, RUN_RECORD) if os.path.isdir(out) \
        else out + ".run.json"
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(payload: dict, as_json: bool, lines: list[str]) -> None:
    """Print either the human table or the machine payload, never both."""
    if as_json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for ln in lines:
            print(ln)


# --- annotation sets --------------------------------------------------------

_ANN_MANIFEST = "manifest.json"


def _save_annotations(out: str, ann: oracle.AnnotationSet,
                      cfg: GlobalConfig) -> list[str]:
    arrays = {
        "latents.npy": np.stack([a.latent for a in ann.annotations]),
        "masks.npy": np.stack([a.mask for a in ann.annotations]),
        "rgbs.npy": np.stack([a.rgb for a in ann.annotations]
                             ).astype(np.float32),
        "depths.npy": np.stack([a.depth for a in ann.annotations]
                               ).astype(np.float32),
    }
    for name, arr in arrays.items():
        np.save(os.path.join(out, name), arr)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "annotations",
        "seed": ann.seed,
        "resolution": ann.resolution,
        "count": len(ann),
        "palette": [[int(v) for v in row] for row in ann.palette],
        "poses": [a.pose.to_json() for a in ann.annotations],
        "config_hash": cfg.config_hash(),
    }
    _write_json(os.path.join(out, _ANN_MANIFEST), doc)
    return sorted(arrays) + [_ANN_MANIFEST]


def _load_annotations(path: str) -> oracle.AnnotationSet:
    manifest = _require(os.path.join(path, _ANN_MANIFEST),
                        "annotation manifest")
    with open(manifest) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "annotations":
        raise UsageError(f"{manifest} is not an annotation manifest")
    latents = np.load(os.path.join(path, "latents.npy"))
    masks = np.load(os.path.join(path, "masks.npy"))
    rgbs = np.load(os.path.join(path, "rgbs.npy"))
    depths = np.load(os.path.join(path, "depths.npy"))
    annotations = [
        oracle.Annotation(latent=latents[i],
                          pose=cameras.CameraPose.from_json(p),
                          mask=masks[i], rgb=rgbs[i], depth=depths[i])
        for i, p in enumerate(doc["poses"])]
    return oracle.AnnotationSet(annotations=annotations,
                                resolution=doc["resolution"],
                                seed=doc["seed"],
                                palette=np.array(doc["palette"],
                                                 dtype=np.uint8))


# --- image input/output -----------------------------------------------------

def _load_rgb(path: str, resolution: int) -> np.ndarray:
    _require(path, "target image")
    if path.endswith(".npy"):
        img = np.asarray(np.load(path), dtype=np.float64)
    else:
        from PIL import Image
        img = np.asarray(Image.open(path).convert("RGB"),
                         dtype=np.float64) / 255.0
    if img.shape != (resolution, resolution, 3):
        raise UsageError(f"target image {path} has shape {img.shape}, "
                         f"expected {(resolution, resolution, 3)}")
    return np.clip(img, 0.0, 1.0)


def _load_mask(path: str, resolution: int) -> np.ndarray:
    _require(path, "target mask")
    if path.endswith(".npy"):
        mask = np.asarray(np.load(path))
    else:
        from PIL import Image
        rgb = np.asarray(Image.open(path).convert("RGB"))
        match = (rgb[..., None, :] == sc.MASK_PALETTE[None, None]).all(-1)
        if not match.any(-1).all():
            raise UsageError(f"{path} contains colors outside the class "
                             "palette; cannot interpret as a mask")
        mask = match.argmax(-1).astype(np.uint8)
    if mask.shape != (resolution, resolution):
        raise UsageError(f"target mask {path} has shape {mask.shape}, "
                         f"expected {(resolution, resolution)}")
    if mask.max() >= sc.NUM_CLASSES:
        raise UsageError(f"mask labels must be < {sc.NUM_CLASSES}")
    return mask.astype(np.uint8)


def _png_u8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# ===========================================================================
# Commands
# ===========================================================================

def cmd_annotate(cfg: GlobalConfig, args) -> int:
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    ann = oracle.make_annotations(
        seed=cfg.seed, n_scenes=args.scenes, views_per_scene=args.views,
        azimuth_range=cfg.azimuth_range, resolution=cfg.mask_resolution,
        elevation=cfg.elevation, radius=cfg.radius,
        n_samples=cfg.oracle_samples)
    outputs = _save_annotations(out, ann, cfg)
    _write_run_record(out, cfg, args.argv, t0, outputs)
    print(f"annotated {len(ann)} views ({args.scenes} scenes x "
          f"{args.views}) at {ann.resolution}px -> {out}")
    return 0


def cmd_train(cfg: GlobalConfig, args) -> int:
    ann = _load_annotations(_require(_resolve(cfg, args.annotations),
                                     "annotation set"))
    out = _fresh_file(_resolve(cfg, args.out))
    tc = sem.TrainConfig(
        steps=args.steps if args.steps is not None else cfg.train_steps,
        lr=cfg.train_lr, rays_per_step=cfg.rays_per_step,
        sr_every=cfg.sr_every, seed=cfg.seed,
        raw_resolution=cfg.raw_resolution, sr_factor=cfg.sr_factor,
        samples_per_ray=cfg.samples_per_ray, multiscale=cfg.multiscale,
        density_prior=cfg.density_prior)
    if ann.resolution != tc.raw_resolution * tc.sr_factor:
        raise UsageError(
            f"annotation resolution {ann.resolution} does not match "
            f"raw_resolution x sr_factor = "
            f"{tc.raw_resolution * tc.sr_factor}")
    t0 = time.time()
    log_path = out + ".log.csv"
    decoder, sr, log = sem.train(ann, tc, log_path=log_path)
    sem.save_checkpoint(out, decoder, sr, seed=cfg.seed,
                        config_hash=tc.config_hash(),
                        extra={"multiscale": tc.multiscale,
                               "density_prior": tc.density_prior,
                               "raw_resolution": tc.raw_resolution,
                               "samples_per_ray": tc.samples_per_ray})
    _write_run_record(out, cfg, args.argv, t0,
                      [os.path.basename(out), os.path.basename(log_path)])
    print(f"trained {tc.steps} steps on {len(ann)} annotations; "
          f"final loss {log[-1][1]:.4f} -> {out}")
    return 0


def _load_branch(cfg: GlobalConfig, path: str):
    """Checkpoint plus a FactoryConfig matching how the branch was trained."""
    decoder, sr, header = sem.load_checkpoint(
        _require(_resolve(cfg, path), "checkpoint"))
    extra = header.get("extra", {})
    fcfg = factory.FactoryConfig(
        raw_resolution=extra.get("raw_resolution", cfg.raw_resolution),
        sr_factor=sr.factor,
        samples_per_ray=extra.get("samples_per_ray", cfg.samples_per_ray),
        multiscale=extra.get("multiscale", cfg.multiscale),
        azimuth_range=cfg.azimuth_range, elevation=cfg.elevation,
        radius=cfg.radius, render_rgb=cfg.render_rgb,
        fusion_views=cfg.fusion_views,
        fusion_elevation=cfg.fusion_elevation, voxel=cfg.voxel)
    return decoder, sr, fcfg


def cmd_generate(cfg: GlobalConfig, args) -> int:
    decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    manifest = factory.generate_dataset(
        args.n, decoder, sr, out, seed=cfg.seed,
        pose_mode=args.pose_mode or cfg.pose_mode, cfg=fcfg,
        threads=cfg.threads)
    outputs = [factory.MANIFEST_NAME]
    for r in manifest.records:
        outputs += [p for p in (r.rgb_path, r.mask_path, r.depth_path)
                    if p is not None]
    _write_run_record(out, cfg, args.argv, t0, outputs)
    print(f"generated {len(manifest)} samples at "
          f"{fcfg.mask_resolution}px -> {out}")
    return 0


def _parse_ids(text: str, n: int) -> list[int]:
    if text == "all":
        return list(range(n))
    ids: list[int] = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-", 1)
            ids.extend(range(int(lo), int(hi) + 1))
        else:
            ids.append(int(part))
    bad = [i for i in ids if not 0 <= i < n]
    if bad:
        raise UsageError(f"sample ids {bad} outside the dataset "
                         f"(0..{n - 1})")
    return ids


def cmd_backproject(cfg: GlobalConfig, args) -> int:
    root = _resolve(cfg, args.dataset)
    manifest = factory.DatasetManifest.load(
        _require(os.path.join(root, factory.MANIFEST_NAME),
                 "dataset manifest"))
    ids = _parse_ids(args.ids, len(manifest))
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    outputs = []
    total = 0
    for i in ids:
        rec = manifest.records[i]
        mask = np.load(os.path.join(root, rec.mask_path))
        depth = np.load(os.path.join(root, rec.depth_path)
                        ).astype(np.float64)
        rgb = None
        if rec.rgb_path is not None:
            rgb = np.load(os.path.join(root, rec.rgb_path))
        cloud = factory.backproject(mask, depth, rec.pose, view_id=i,
                                    rgb=rgb)
        name = f"cloud_{i:05d}.ply"
        factory.save_ply(os.path.join(out, name), cloud)
        outputs.append(name)
        total += len(cloud)
    _write_run_record(out, cfg, args.argv, t0, outputs)
    print(f"back-projected {len(ids)} views, {total} points -> {out}")
    return 0


def cmd_fuse(cfg: GlobalConfig, args) -> int:
    clouds = [factory.load_ply(_require(p, "point cloud"))
              for p in args.clouds]
    out = _fresh_file(_resolve(cfg, args.out))
    t0 = time.time()
    fused = factory.fuse(clouds, voxel=args.voxel or cfg.voxel)
    factory.save_ply(out, fused)
    _write_run_record(out, cfg, args.argv, t0, [os.path.basename(out)])
    print(f"fused {len(clouds)} clouds "
          f"({sum(len(c) for c in clouds)} points) into {len(fused)} "
          f"voxels -> {out}")
    return 0


# --- inversion and editing --------------------------------------------------

def _inversion_config(cfg: GlobalConfig, args, resolution: int,
                      multiscale: bool) -> inversion.InversionConfig:
    warm = getattr(args, "warm", None)
    warm_z = np.load(_require(warm, "warm-start latent")) \
        if warm is not None else None
    return inversion.InversionConfig(
        steps=args.steps if args.steps is not None else cfg.inv_steps,
        lr=cfg.inv_lr, eps_fd=cfg.eps_fd,
        init="warm" if warm_z is not None else "zero", warm_z=warm_z,
        pose_init=(0.5 * (cfg.azimuth_min + cfg.azimuth_max),
                   cfg.elevation),
        radius=cfg.radius, resolution=resolution,
        samples_per_ray=cfg.inv_samples_per_ray, multiscale=multiscale,
        patience=cfg.patience,
        restarts=getattr(args, "restarts", None) or cfg.restarts,
        seed=cfg.seed, threads=cfg.threads)


def _dump_history(path: str, history: np.ndarray) -> None:
    lines = ["step,loss"] + [f"{i},{v:.10g}" for i, v in enumerate(history)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _inversion_payload(res: inversion.InversionResult) -> dict:
    payload = {
        "z": [float(v) for v in res.z],
        "pose": res.pose.to_json(),
        "best_loss": float(res.best_loss),
        "steps_evaluated": int(len(res.history)),
        "converged": bool(res.converged),
        "stalled": bool(res.stalled),
        "degenerate": bool(res.degenerate),
        "restart": int(res.restart),
    }
    if res.restart_losses is not None:
        payload["restart_losses"] = [float(v) for v in res.restart_losses]
    return payload


def cmd_invert(cfg: GlobalConfig, args) -> int:
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    if args.mode == "rgb":
        target = _load_rgb(_resolve(cfg, args.target), cfg.inv_resolution)
        icfg = _inversion_config(cfg, args, cfg.inv_resolution,
                                 cfg.multiscale)
        res = inversion.invert_rgb(target, icfg)
        recon = bb.render(res.z, res.pose, bb.RenderConfig(
            resolution=icfg.resolution,
            samples_per_ray=icfg.samples_per_ray, stratified=False)).rgb
        evaluation.save_png(os.path.join(out, "recon_rgb.png"),
                            _png_u8(recon))
        quality = inversion.psnr(recon, target)
        extra_line = f"psnr {quality:.2f} dB"
    else:
        decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
        target = _load_mask(_resolve(cfg, args.target), cfg.inv_resolution)
        icfg = _inversion_config(cfg, args, cfg.inv_resolution,
                                 fcfg.multiscale)
        res = inversion.invert_seg(target, decoder, sr, icfg)
        mask, _ = factory.predict_view(
            res.z, res.pose, decoder, sr,
            replace(fcfg, raw_resolution=icfg.resolution // sr.factor,
                    samples_per_ray=icfg.samples_per_ray))
        evaluation.save_png(os.path.join(out, "recon_mask.png"),
                            evaluation.colorize_mask(mask))
        quality = float((mask == target).mean())
        extra_line = f"mask agreement {quality:.4f}"
    if not np.isfinite(res.best_loss):
        raise NumericalFailure("inversion loss is not finite")
    payload = _inversion_payload(res)
    payload["target"] = args.target
    np.save(os.path.join(out, "z.npy"), res.z)
    _write_json(os.path.join(out, "inversion.json"), payload)
    _dump_history(os.path.join(out, "history.csv"), res.history)
    _write_run_record(out, cfg, args.argv, t0,
                      ["inversion.json", "history.csv", "z.npy"])
    print(f"inverted {args.mode}: loss {res.best_loss:.3e}, {extra_line}, "
          f"{len(res.history)} evaluations -> {out}")
    return 0


def cmd_edit(cfg: GlobalConfig, args) -> int:
    decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
    z0 = np.load(_require(_resolve(cfg, args.z), "starting latent"))
    with open(_require(_resolve(cfg, args.pose), "pose file")) as fh:
        pose = cameras.CameraPose.from_json(json.load(fh))
    m_edit = _load_mask(_resolve(cfg, args.medit), cfg.inv_resolution)
    region = np.load(_require(_resolve(cfg, args.region), "region file"))
    i_rgb = _load_rgb(_resolve(cfg, args.rgb), cfg.inv_resolution)
    spec = inversion.EditSpec(
        m_edit=m_edit, roi=region.astype(bool), i_rgb=i_rgb, z0=z0,
        pose=pose, lambdas=(cfg.lambda_label, cfg.lambda_rgb,
                            cfg.lambda_perceptual))
    icfg = _inversion_config(cfg, args, spec.resolution, fcfg.multiscale)
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    z_star, report = inversion.edit(spec, decoder, sr, icfg)
    np.save(os.path.join(out, "z_star.npy"), z_star)
    rows = ["step,total,label,rgb,perceptual"]
    for i, (tot, terms) in enumerate(zip(report.history,
                                         report.term_history)):
        rows.append(f"{i},{tot:.10g}," + ",".join(f"{t:.10g}"
                                                  for t in terms))
    with open(os.path.join(out, "history.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    for name, img in (("before_rgb", report.before_rgb),
                      ("after_rgb", report.after_rgb)):
        evaluation.save_png(os.path.join(out, name + ".png"), _png_u8(img))
    for name, mask in (("before_mask", report.before_mask),
                       ("after_mask", report.after_mask)):
        evaluation.save_png(os.path.join(out, name + ".png"),
                            evaluation.colorize_mask(mask))
    views_dir = os.path.join(out, "views")
    os.makedirs(views_dir, exist_ok=True)
    for i, v in enumerate(report.views):
        evaluation.save_png(os.path.join(views_dir, f"{i}_before_rgb.png"),
                            _png_u8(v.before_rgb))
        evaluation.save_png(os.path.join(views_dir, f"{i}_after_rgb.png"),
                            _png_u8(v.after_rgb))
        evaluation.save_png(os.path.join(views_dir, f"{i}_after_mask.png"),
                            evaluation.colorize_mask(v.after_mask))
    payload = {
        "region_agreement": float(report.region_agreement),
        "outside_psnr_before": float(report.outside_psnr_before),
        "outside_psnr_after": float(report.outside_psnr_after),
        "outside_psnr_drop": float(report.outside_psnr_drop),
        "initial_loss": float(report.history[0]),
        "best_loss": float(report.history.min()),
        "converged": bool(report.converged),
        "stalled": bool(report.stalled),
        "lambdas": list(report.lambdas),
    }
    _write_json(os.path.join(out, "edit_report.json"), payload)
    _write_run_record(out, cfg, args.argv, t0,
                      ["z_star.npy", "edit_report.json", "history.csv"])
    print(f"edit: region agreement {report.region_agreement:.4f}, "
          f"outside psnr {report.outside_psnr_before:.2f} -> "
          f"{report.outside_psnr_after:.2f} dB -> {out}")
    return 0


# --- evaluation harnesses ---------------------------------------------------

def cmd_eval_seg(cfg: GlobalConfig, args) -> int:
    decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    rng = _stream(cfg, _STREAM_SEG)
    latents = sc.sample_latents(rng, args.scenes)
    azims = rng.uniform(cfg.azimuth_min, cfg.azimuth_max, args.scenes)
    conf = np.zeros((sc.NUM_CLASSES, sc.NUM_CLASSES), dtype=np.int64)
    res = fcfg.mask_resolution
    for z, az in zip(latents, azims):
        pose = cameras.CameraPose(azimuth=float(az),
                                  elevation=cfg.elevation,
                                  radius=cfg.radius)
        gt = oracle.render_gt(sc.decode_scene(z), pose, res,
                              cfg.oracle_samples).mask
        pred, _ = factory.predict_view(z, pose, decoder, sr, fcfg)
        conf += evaluation.confusion_matrix(pred, gt)
    metrics = evaluation.metrics_from_confusion(conf)
    payload = {
        "scenes": int(args.scenes),
        "resolution": int(res),
        "miou": float(metrics.miou),
        "accuracy": float(metrics.accuracy),
        "iou": [None if np.isnan(v) else float(v) for v in metrics.iou],
        "pixel_counts": [int(v) for v in metrics.pixel_counts],
    }
    _write_json(os.path.join(out, "seg_metrics.json"), payload)
    np.savetxt(os.path.join(out, "confusion.csv"), conf, fmt="%d",
               delimiter=",")
    _write_run_record(out, cfg, args.argv, t0,
                      ["seg_metrics.json", "confusion.csv"])
    lines = [f"held-out segmentation on {args.scenes} scenes at {res}px",
             f"  mIoU     {metrics.miou:.4f}",
             f"  accuracy {metrics.accuracy:.4f}"]
    lines += [f"  iou[{name}] "
              f"{'nan' if np.isnan(v) else format(v, '.4f')}"
              for name, v in zip(sc.CLASS_NAMES, metrics.iou)]
    _emit(payload, args.json, lines)
    return 0


def _sweep_poses(cfg: GlobalConfig, frames: int) -> list[cameras.CameraPose]:
    azims = np.linspace(cfg.azimuth_min, cfg.azimuth_max, frames)
    return cameras.orbit_poses(azims, elevation=cfg.elevation,
                               radius=cfg.radius)


def _predictor(decoder, sr, fcfg: factory.FactoryConfig, z: np.ndarray):
    """mask_fn(view, pose) with the scene's tri-plane built once."""
    tp = bb.build_semantic_triplane(bb.synthesize_pyramid(z),
                                    multiscale=fcfg.multiscale)

    def mask_fn(_i: int, pose: cameras.CameraPose) -> np.ndarray:
        mask, _ = factory.predict_view(z, pose, decoder, sr, fcfg,
                                       triplane=tp)
        return mask

    return mask_fn


def cmd_eval_consistency(cfg: GlobalConfig, args) -> int:
    decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
    if args.resolution % sr.factor:
        raise UsageError(f"resolution {args.resolution} not divisible by "
                         f"the checkpoint's sr factor {sr.factor}")
    fcfg = replace(fcfg, raw_resolution=args.resolution // sr.factor)
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    latents = sc.sample_latents(_stream(cfg, _STREAM_CONSISTENCY),
                                args.latents)
    poses = _sweep_poses(cfg, args.frames)
    tol = evaluation.consistency_tol(poses[0], cfg.oracle_samples)
    rows = []
    for k, z in enumerate(latents):
        gt_masks, depths = evaluation.oracle_views(
            z, poses, args.resolution, cfg.oracle_samples)
        ceiling = evaluation.view_consistency(gt_masks, depths, poses, tol)
        mask_fn = _predictor(decoder, sr, fcfg, z)
        pred = [mask_fn(i, p) for i, p in enumerate(poses)]
        score = evaluation.view_consistency(pred, depths, poses, tol)
        if np.isnan(score) or np.isnan(ceiling):
            raise NumericalFailure(
                f"latent {k}: no mutually visible pixels in the sweep")
        epi = evaluation.epi_texture(np.stack(pred),
                                     row=args.resolution // 2)
        evaluation.save_png(os.path.join(out, f"epi_{k:02d}.png"), epi)
        rows.append((k, score, ceiling))
    scores = np.array([r[1] for r in rows])
    ceilings = np.array([r[2] for r in rows])
    payload = {
        "latents": int(args.latents),
        "frames": int(args.frames),
        "resolution": int(args.resolution),
        "mean_consistency": float(scores.mean()),
        "min_consistency": float(scores.min()),
        "mean_ceiling": float(ceilings.mean()),
        "per_latent": [{"latent": k, "consistency": float(s),
                        "ceiling": float(c)} for k, s, c in rows],
    }
    _write_json(os.path.join(out, "consistency.json"), payload)
    csv = ["latent,consistency,ceiling"]
    csv += [f"{k},{s:.6f},{c:.6f}" for k, s, c in rows]
    with open(os.path.join(out, "consistency.csv"), "w") as fh:
        fh.write("\n".join(csv) + "\n")
    _write_run_record(out, cfg, args.argv, t0,
                      ["consistency.json", "consistency.csv"])
    lines = [f"cross-view consistency over {args.latents} latents x "
             f"{args.frames} frames at {args.resolution}px",
             f"  mean {scores.mean():.4f} (min {scores.min():.4f}), "
             f"oracle ceiling {ceilings.mean():.4f}"]
    _emit(payload, args.json, lines)
    return 0


def cmd_eval_epi(cfg: GlobalConfig, args) -> int:
    decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
    if args.resolution % sr.factor:
        raise UsageError(f"resolution {args.resolution} not divisible by "
                         f"the checkpoint's sr factor {sr.factor}")
    fcfg = replace(fcfg, raw_resolution=args.resolution // sr.factor)
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    if args.latent_file is not None:
        z = sc.validate_latent(np.load(_require(args.latent_file,
                                                "latent file")))
    else:
        z = sc.sample_latents(_stream(cfg, _STREAM_EPI), 1)[0]
    poses = _sweep_poses(cfg, args.frames)
    row = args.row if args.row is not None else args.resolution // 2
    mask_fn = _predictor(decoder, sr, fcfg, z)
    masks = np.stack([mask_fn(i, p) for i, p in enumerate(poses)])
    rgbs = np.stack([
        bb.render(z, p, bb.RenderConfig(
            resolution=args.resolution,
            samples_per_ray=cfg.samples_per_ray, stratified=False)).rgb
        for p in poses])
    evaluation.save_png(os.path.join(out, "epi_semantic.png"),
                        evaluation.epi_texture(masks, row=row))
    evaluation.save_png(os.path.join(out, "epi_rgb.png"),
                        evaluation.epi_rgb_texture(rgbs, row=row))
    np.save(os.path.join(out, "latent.npy"), z)
    _write_run_record(out, cfg, args.argv, t0,
                      ["epi_semantic.png", "epi_rgb.png", "latent.npy"])
    print(f"emitted scanline textures (row {row}, {args.frames} frames) "
          f"-> {out}")
    return 0


def cmd_eval_trend(cfg: GlobalConfig, args) -> int:
    decoder, sr, fcfg = _load_branch(cfg, args.checkpoint)
    sizes = [int(s) for s in args.sizes.split(",")]
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise UsageError(f"sizes must strictly ascend, got {sizes}")
    out = _fresh_dir(_resolve(cfg, args.out))
    t0 = time.time()
    pool = max(sizes)
    train_latents = sc.sample_latents(_stream(cfg, _STREAM_TREND_TRAIN),
                                      pool)
    test_latents = sc.sample_latents(_stream(cfg, _STREAM_TREND_TEST),
                                     args.test_clouds)
    fusion = factory.fusion_poses(fcfg)
    train_clouds = []
    for i, z in enumerate(train_latents):
        cloud = factory.scene_cloud(z, decoder, sr, fcfg)
        train_clouds.append(factory.sample_fixed_count(cloud, args.points,
                                                       seed=i))
    test_clouds = []
    for i, z in enumerate(test_latents):
        cloud = factory.oracle_cloud(z, fusion, fcfg.mask_resolution,
                                     voxel=fcfg.voxel,
                                     n_samples=cfg.oracle_samples)
        test_clouds.append(factory.sample_fixed_count(cloud, args.points,
                                                      seed=10_000 + i))
    rows = evaluation.point_trend(train_clouds, test_clouds, sizes,
                                  seed=cfg.seed, steps=args.clf_steps)
    evaluation.write_trend_csv(os.path.join(out, "trend.csv"), rows)
    payload = {
        "sizes": sizes,
        "test_clouds": int(args.test_clouds),
        "points_per_cloud": int(args.points),
        "rows": [{"size": r.size, "miou": float(r.miou),
                  "accuracy": float(r.accuracy)} for r in rows],
    }
    _write_json(os.path.join(out, "trend.json"), payload)
    _write_run_record(out, cfg, args.argv, t0,
                      ["trend.csv", "trend.json"])
    lines = ["point classifier vs training-set size "
             f"({args.test_clouds} oracle test clouds)"]
    lines += [f"  {r.size:>5d} clouds: mIoU {r.miou:.4f}, "
              f"accuracy {r.accuracy:.4f}" for r in rows]
    _emit(payload, args.json, lines)
    return 0


def cmd_eval_ablate(cfg: GlobalConfig, args) -> int:
    counts = tuple(int(c) for c in args.counts.split(","))
    out = _fresh_dir(_resolve(cfg, args.out))
    acfg = evaluation.AblationConfig(
        seed=cfg.seed, n_scenes=args.scenes, views_per_scene=args.views,
        annotation_counts=counts, raw_resolution=cfg.raw_resolution,
        sr_factor=cfg.sr_factor, samples_per_ray=cfg.samples_per_ray,
        steps=args.steps if args.steps is not None else cfg.train_steps,
        rays_per_step=cfg.rays_per_step, lr=cfg.train_lr,
        azimuth_range=cfg.azimuth_range, elevation=cfg.elevation,
        radius=cfg.radius, individual_test=args.individual_test,
        video_latents=args.video_latents, video_frames=args.video_frames,
        oracle_samples=cfg.oracle_samples)
    t0 = time.time()
    progress = None if args.json else (lambda msg: print(f"  {msg}"))
    report = evaluation.run_ablation(acfg, progress=progress)
    evaluation.write_ablation_outputs(report, out)
    payload = {
        "rows": [{"block": r.block, "cell": r.cell,
                  "multiscale": r.multiscale,
                  "density_prior": r.density_prior,
                  "annotations": r.annotations,
                  "individual_miou": float(r.individual_miou),
                  "individual_accuracy": float(r.individual_accuracy),
                  "video_miou": float(r.video_miou),
                  "video_accuracy": float(r.video_accuracy)}
                 for r in report.rows],
    }
    _write_json(os.path.join(out, "ablation.json"), payload)
    _write_run_record(out, cfg, args.argv, t0,
                      ["ablation.csv", "ablation.txt", "ablation.json"])
    _emit(payload, args.json,
          evaluation.format_ablation_report(report).splitlines())
    return 0


# ===========================================================================
# Parser
# ===========================================================================

def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=argparse.SUPPRESS,
                        help="YAML/JSON config file")
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="master seed (overrides config)")
    shared.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker cap; never changes results")

    parser = argparse.ArgumentParser(
        prog="segfactory",
        description="3D-aware data factory: annotate, train, generate, "
                    "lift to point clouds, invert, edit, evaluate.",
        parents=[shared])
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_, parents=(shared,)):
        p = sub.add_parser(name, help=help_, parents=list(parents))
        p.set_defaults(func=fn)
        return p

    p = add("annotate", cmd_annotate, "render a few-shot annotation set")
    p.add_argument("--scenes", type=int, default=30)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the semantic branch")
    p.add_argument("--annotations", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("generate", cmd_generate, "emit labeled rgb/mask/depth samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--pose-mode", choices=["uniform", "video", "grid"],
                   default=None)
    p.add_argument("--out", required=True)

    p = add("backproject", cmd_backproject,
            "lift labeled pixels into point clouds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ids", default="all",
                   help="sample ids: 'all', '0,3,9' or '0-7'")
    p.add_argument("--out", required=True)

    p = add("fuse", cmd_fuse, "merge point clouds on a voxel grid")
    p.add_argument("--clouds", nargs="+", required=True)
    p.add_argument("--voxel", type=float, default=None)
    p.add_argument("--out", required=True)

    p = add("invert", cmd_invert, "recover (latent, pose) from an image")
    p.add_argument("mode", choices=["rgb", "seg"])
    p.add_argument("--target", required=True, help=".npy or .png")
    p.add_argument("--checkpoint", help="required for seg mode")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--warm", help=".npy latent to warm-start from")
    p.add_argument("--out", required=True)

    p = add("edit", cmd_edit, "re-optimize a latent toward an edited mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--z", required=True, help=".npy starting latent")
    p.add_argument("--pose", required=True, help="pose JSON file")
    p.add_argument("--medit", required=True, help="edited mask (.npy/.png)")
    p.add_argument("--region", required=True, help="bool region .npy")
    p.add_argument("--rgb", required=True, help="source image (.npy/.png)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluation harnesses",
                        parents=[shared])
    evsub = ev.add_subparsers(dest="eval_cmd", required=True)

    def add_eval(name, fn, help_):
        p = evsub.add_parser(name, help=help_, parents=[shared])
        p.set_defaults(func=fn)
        p.add_argument("--json", action="store_true",
                       help="print a machine-readable payload instead of "
                            "the table")
        p.add_argument("--out", required=True)
        return p

    p = add_eval("seg", cmd_eval_seg, "held-out mask quality")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", type=int, default=20)

    p = add_eval("consistency", cmd_eval_consistency,
                 "cross-view label agreement over pose sweeps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents", type=int, default=10)
    p.add_argument("--frames", type=int, default=61)
    p.add_argument("--resolution", type=int, default=64)

    p = add_eval("epi", cmd_eval_epi, "scanline textures for visual audit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=61)
    p.add_argument("--row", type=int, default=None)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--latent-file", default=None)

    p = add_eval("pointcloud-trend", cmd_eval_trend,
                 "point classifier vs training-set size")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", default="100,200,400")
    p.add_argument("--test-clouds", type=int, default=50)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--clf-steps", type=int, default=3000)

    p = add_eval("ablate", cmd_eval_ablate,
                 "multiscale / density-prior / annotation-count grid")
    p.add_argument("--scenes", type=int, default=30)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--counts", default="30,45,90")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--individual-test", type=int, default=90)
    p.add_argument("--video-latents", type=int, default=10)
    p.add_argument("--video-frames", type=int, default=61)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _build_parser().parse_args(argv)
    args.argv = argv
    try:
        if args.cmd == "invert" and args.mode == "seg" \
                and args.checkpoint is None:
            raise UsageError("invert seg requires --checkpoint")
        cfg = load_config(getattr(args, "config", None),
                          seed=getattr(args, "seed", None),
                          threads=getattr(args, "threads", None))
        return args.func(cfg, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (sc.InvalidLatent, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except sem.TrainingDiverged as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
