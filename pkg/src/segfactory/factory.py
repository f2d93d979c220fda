"""The data factory: unlimited labeled samples from the frozen backbone plus
a trained semantic branch.

Three stages compose here:

1. generate — sample (latent, pose), render RGB, predict the refined semantic
   mask, upsample the shared raw-render depth to the mask resolution, write
   the triple to disk under a JSON manifest;
2. backproject — lift every labeled, surface-hitting pixel through the
   pinhole model into a world-space labeled point;
3. fuse — merge clouds from several viewpoints on a voxel hash with a
   deterministic label vote.

Everything is a pure function of (weights, seed, config): equal seeds give
byte-identical output files regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import backbone as bb
from . import cameras, oracle
from . import scene as sc
from . import semantic as sem

DEFAULT_VOXEL = 0.01
DEFAULT_FUSION_VIEWS = 8
MANIFEST_NAME = "manifest.json"

_POSE_MODES = ("uniform", "video", "grid")


# ===========================================================================
# Labeled point clouds
# ===========================================================================


@dataclass
class LabeledPointCloud:
    """World-space points with part labels and provenance.

    ``tiebreak`` carries each point's depth-gradient magnitude at its source
    pixel — fuse's proxy for how orthogonally the source ray met the surface
    (small = head-on = trustworthy).  It is optional metadata: clouds loaded
    from PLY lose it and fusion falls back to the lowest-label rule on ties.
    """

    points: np.ndarray                  # (n, 3) float64
    labels: np.ndarray                  # (n,) uint8, 1..C-1 (never background)
    view_ids: np.ndarray                # (n,) uint16
    colors: np.ndarray | None = None    # (n, 3) float32 in [0, 1]
    tiebreak: np.ndarray | None = None  # (n,) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(n)
        self.view_ids = np.asarray(self.view_ids, dtype=np.uint16).reshape(n)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if n and self.labels.max() >= sc.NUM_CLASSES:
            raise ValueError(f"labels must be < {sc.NUM_CLASSES}")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float32).reshape(n, 3)
        if self.tiebreak is not None:
            self.tiebreak = np.asarray(self.tiebreak, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.points)


def empty_cloud() -> LabeledPointCloud:
    return LabeledPointCloud(points=np.zeros((0, 3)),
                             labels=np.zeros(0, dtype=np.uint8),
                             view_ids=np.zeros(0, dtype=np.uint16))


def backproject(mask: np.ndarray, depth: np.ndarray, pose: cameras.CameraPose,
                view_id: int = 0, rgb: np.ndarray | None = None
                ) -> LabeledPointCloud:
    """Lift labeled pixels into world space through their depths.

    Background pixels and sentinel depths contribute nothing.  ``mask`` and
    ``depth`` must share a resolution — upsample the raw-render depth first.
    An all-background mask yields an empty cloud, not an error.
    """
    mask = np.asarray(mask)
    depth = np.asarray(depth)
    if mask.shape != depth.shape:
        raise ValueError(f"mask {mask.shape} and depth {depth.shape} must share "
                         "a resolution (upsample depth to the mask first)")
    res = mask.shape[0]
    keep = (mask > 0) & (depth < pose.depth_sentinel - 1e-9)
    rows, cols = np.nonzero(keep)
    if rows.size == 0:
        return empty_cloud()
    pts = cameras.backproject_pixels(pose, res, rows, cols, depth[rows, cols])
    gr, gc = np.gradient(depth)
    grad = np.hypot(gr, gc)[rows, cols]
    return LabeledPointCloud(
        points=pts, labels=mask[rows, cols].astype(np.uint8),
        view_ids=np.full(rows.size, view_id, dtype=np.uint16),
        colors=None if rgb is None else rgb[rows, cols],
        tiebreak=grad)


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    """(n, 3) integer voxel coordinates of each point."""
    return np.floor(np.asarray(points) / voxel).astype(np.int64)


def fuse(clouds: list[LabeledPointCloud], voxel: float = DEFAULT_VOXEL
         ) -> LabeledPointCloud:
    """Merge clouds on a voxel hash: one point per occupied voxel.

    Output point = centroid of the voxel's points.  Label = majority vote;
    vote ties prefer the label whose best point has the smallest
    depth-gradient magnitude (most head-on ray); exact remaining ties take
    the lowest label id.  View id and color come from that winning point.
    Output order is lexicographic in voxel coordinates; for a fixed input
    list the result is bit-reproducible and fuse is idempotent.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return empty_cloud()
    pts = np.concatenate([c.points for c in clouds])
    labels = np.concatenate([c.labels for c in clouds])
    views = np.concatenate([c.view_ids for c in clouds])
    has_colors = all(c.colors is not None for c in clouds)
    colors = np.concatenate([c.colors for c in clouds]) if has_colors else None
    tb = np.concatenate([np.full(len(c), np.inf) if c.tiebreak is None
                         else c.tiebreak for c in clouds])

    keys = voxel_keys(pts, voxel)
    order = np.lexsort((tb, labels, keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, pts, labels, views, tb = (a[order] for a in (keys, pts, labels, views, tb))
    if colors is not None:
        colors = colors[order]
    boundary = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.concatenate([[0], np.nonzero(boundary)[0] + 1])
    ends = np.concatenate([starts[1:], [len(keys)]])

    out_pts = np.empty((len(starts), 3))
    out_labels = np.empty(len(starts), dtype=np.uint8)
    out_views = np.empty(len(starts), dtype=np.uint16)
    out_colors = np.empty((len(starts), 3), dtype=np.float32) if colors is not None else None
    out_tb = np.empty(len(starts))
    for i, (lo, hi) in enumerate(zip(starts, ends)):
        out_pts[i] = pts[lo:hi].mean(axis=0)
        votes = np.bincount(labels[lo:hi])
        tied = np.nonzero(votes == votes.max())[0]
        if len(tied) == 1:
            win = tied[0]
        else:
            # smallest (best depth-gradient, label id) among the tied labels;
            # rows are sorted by (label, tiebreak) within the voxel already
            best = [(tb[lo:hi][labels[lo:hi] == t].min(), t) for t in tied]
            win = min(best)[1]
        sel = lo + np.nonzero(labels[lo:hi] == win)[0][0]  # smallest tb of win
        out_labels[i] = win
        out_views[i] = views[sel]
        out_tb[i] = tb[sel]
        if out_colors is not None:
            out_colors[i] = colors[sel]
    return LabeledPointCloud(points=out_pts, labels=out_labels,
                             view_ids=out_views, colors=out_colors,
                             tiebreak=out_tb)


def sample_fixed_count(cloud: LabeledPointCloud, m: int = 2048, seed: int = 0
                       ) -> LabeledPointCloud:
    """Seeded resample to exactly m points, centered and scaled to the unit
    sphere.  Sampling is uniform without replacement when the cloud has at
    least m points (m = n gives a pure permutation), with replacement below.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot resample an empty cloud")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    idx = rng.choice(n, size=m, replace=n < m)
    pts = cloud.points[idx]
    pts = pts - pts.mean(axis=0)
    norm = np.linalg.norm(pts, axis=1).max()
    if norm > 0:
        pts = pts / norm
    return LabeledPointCloud(
        points=pts, labels=cloud.labels[idx], view_ids=cloud.view_ids[idx],
        colors=None if cloud.colors is None else cloud.colors[idx],
        tiebreak=None if cloud.tiebreak is None else cloud.tiebreak[idx])


# ===========================================================================
# PLY serialization (binary little-endian)
# ===========================================================================


def save_ply(path: str, cloud: LabeledPointCloud) -> None:
    props = ["property float x", "property float y", "property float z",
             "property uchar label", "property ushort view_id"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("label", "u1"), ("view_id", "<u2")]
    if cloud.colors is not None:
        props += [f"property uchar {c}" for c in ("red", "green", "blue")]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0",
         f"element vertex {len(cloud)}"] + props + ["end_header"]) + "\n"
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.points.astype(np.float32).T
    rec["label"] = cloud.labels
    rec["view_id"] = cloud.view_ids
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_ply(path: str) -> LabeledPointCloud:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError("only binary little-endian PLY is supported")
    n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
    typemap = {"float": "<f4", "uchar": "u1", "ushort": "<u2"}
    fields = [(l.split()[2], typemap[l.split()[1]])
              for l in lines if l.startswith("property")]
    rec = np.frombuffer(data[end + len(b"end_header\n"):],
                        dtype=np.dtype(fields), count=n)
    names = [f[0] for f in fields]
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]],
                          axis=1).astype(np.float32) / 255.0
    return LabeledPointCloud(
        points=np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64),
        labels=rec["label"].copy(), view_ids=rec["view_id"].copy(), colors=colors)


# ===========================================================================
# Dataset generation
# ===========================================================================


@dataclass(frozen=True)
class FactoryConfig:
    """Rendering and pose-sampling knobs for the image/mask factory."""

    raw_resolution: int = 32          # semantic branch render resolution
    sr_factor: int = 4                # mask resolution = raw * factor
    samples_per_ray: int = 48
    multiscale: bool = True           # must match how the branch was trained
    azimuth_range: tuple[float, float] = (-np.pi / 6, np.pi / 6)
    elevation: float = 0.12
    radius: float = 2.5
    render_rgb: bool = True           # clouds need only mask + depth
    grid_azimuths: int = 8            # grid mode: azimuths x elevations
    grid_elevations: tuple[float, ...] = (0.12,)
    fusion_views: int = DEFAULT_FUSION_VIEWS
    fusion_elevation: float = 0.2
    voxel: float = DEFAULT_VOXEL

    @property
    def mask_resolution(self) -> int:
        return self.raw_resolution * self.sr_factor

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SampleRecord:
    sample_id: int
    latent: np.ndarray
    pose: cameras.CameraPose
    rgb_path: str | None        # relative to the manifest directory
    mask_path: str
    depth_path: str

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id,
                "latent": [float(v) for v in self.latent],
                "pose": self.pose.to_json(),
                "rgb_path": self.rgb_path,
                "mask_path": self.mask_path,
                "depth_path": self.depth_path}

    @staticmethod
    def from_json(d: dict) -> "SampleRecord":
        return SampleRecord(sample_id=d["sample_id"],
                            latent=np.array(d["latent"]),
                            pose=cameras.CameraPose.from_json(d["pose"]),
                            rgb_path=d["rgb_path"], mask_path=d["mask_path"],
                            depth_path=d["depth_path"])


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    seed: int
    palette: np.ndarray
    config_hash: str
    root: str = "."

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if ids != list(range(len(ids))):
            raise ValueError("sample ids must be dense from 0")

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path: str) -> None:
        doc = {"seed": self.seed,
               "config_hash": self.config_hash,
               "palette": [[int(v) for v in row] for row in self.palette],
               "records": [r.to_json() for r in self.records]}
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=2)
            f.write("\n")

    @staticmethod
    def load(path: str) -> "DatasetManifest":
        with open(path) as f:
            doc = json.load(f)
        return DatasetManifest(
            records=[SampleRecord.from_json(r) for r in doc["records"]],
            seed=doc["seed"], palette=np.array(doc["palette"], dtype=np.uint8),
            config_hash=doc["config_hash"], root=os.path.dirname(path) or ".")

    def validate_files(self) -> None:
        """Every referenced file must exist (manifest invariant)."""
        for r in self.records:
            for p in (r.rgb_path, r.mask_path, r.depth_path):
                if p is not None and not os.path.exists(os.path.join(self.root, p)):
                    raise FileNotFoundError(f"manifest references missing file {p}")


def sample_poses(mode: str, n: int, seed: int, cfg: FactoryConfig
                 ) -> tuple[np.ndarray, list[cameras.CameraPose]]:
    """Seeded (latents, poses) for n samples under the given pose mode.

    uniform — fresh latent per sample, azimuth uniform over the range;
    video   — one latent, azimuths sweeping the range linearly (monotone);
    grid    — fixed azimuth x elevation grid, latent advances per full cycle.
    """
    if mode not in _POSE_MODES:
        raise ValueError(f"pose mode must be one of {_POSE_MODES}, got {mode!r}")
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    lo, hi = cfg.azimuth_range
    make = lambda az, el: cameras.CameraPose(azimuth=float(az), elevation=el,
                                             radius=cfg.radius)
    if mode == "uniform":
        latents = sc.sample_latents(rng, n)
        poses = [make(a, cfg.elevation) for a in rng.uniform(lo, hi, n)]
    elif mode == "video":
        latents = np.repeat(sc.sample_latents(rng, 1), n, axis=0)
        sweep = np.linspace(lo, hi, n) if n > 1 else np.array([(lo + hi) / 2])
        poses = [make(a, cfg.elevation) for a in sweep]
    else:
        grid = [make(a, e)
                for e in cfg.grid_elevations
                for a in np.linspace(lo, hi, cfg.grid_azimuths)]
        uniq = sc.sample_latents(rng, (n + len(grid) - 1) // len(grid))
        latents = uniq[np.arange(n) // len(grid)]
        poses = [grid[i % len(grid)] for i in range(n)]
    return latents, poses


def predict_view(z: np.ndarray, pose: cameras.CameraPose,
                 decoder: sem.SemanticDecoder, sr: sem.SRModule,
                 cfg: FactoryConfig, triplane: bb.TriPlane | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """(mask, depth) at mask resolution for one view.

    The mask is the argmax of the super-resolved semantic output; the depth
    is the shared raw-render depth upsampled to match (soft halos mean the
    two can disagree on a thin silhouette band — backproject drops pixels
    either side rejects).
    """
    rcfg = bb.RenderConfig(resolution=cfg.raw_resolution,
                           samples_per_ray=cfg.samples_per_ray,
                           stratified=False, cache_samples=True)
    rend = sem.render_semantic(z, pose, decoder, rcfg, triplane=triplane,
                               multiscale=cfg.multiscale)
    logits = sem.super_resolve(sr, rend)
    mask = logits.argmax(axis=-1).astype(np.uint8)
    depth = bb.upsample_depth(rend.depth, cfg.sr_factor, pose.depth_sentinel)
    return mask, depth


def generate_dataset(n: int, decoder: sem.SemanticDecoder, sr: sem.SRModule,
                     out_dir: str, seed: int = 0, pose_mode: str = "uniform",
                     cfg: FactoryConfig = FactoryConfig(), threads: int = 1
                     ) -> DatasetManifest:
    """Emit n rgb/mask/depth triples plus a manifest into out_dir.

    A pure function of (weights, seed, config): files and manifest are
    byte-identical across runs and across thread counts (workers only
    parallelize over samples; each sample's pipeline is unchanged).
    """
    if decoder is None or sr is None:
        raise ValueError("generation requires trained semantic weights")
    latents, poses = sample_poses(pose_mode, n, seed, cfg)
    os.makedirs(out_dir, exist_ok=True)
    res = cfg.mask_resolution

    # one tri-plane per distinct latent (video/grid reuse it heavily)
    triplanes: dict[bytes, bb.TriPlane] = {}
    for z in latents:
        key = z.tobytes()
        if key not in triplanes:
            triplanes[key] = bb.build_semantic_triplane(
                bb.synthesize_pyramid(z), multiscale=cfg.multiscale)

    def emit(i: int) -> SampleRecord:
        z, pose = latents[i], poses[i]
        mask, depth = predict_view(z, pose, decoder, sr, cfg,
                                   triplane=triplanes[z.tobytes()])
        paths = {}
        arrays = {"mask": mask, "depth": depth.astype(np.float32)}
        if cfg.render_rgb:
            rgb = bb.render(z, pose, bb.RenderConfig(
                resolution=res, samples_per_ray=cfg.samples_per_ray,
                stratified=False)).rgb
            arrays["rgb"] = rgb
        for kind, arr in arrays.items():
            rel = f"{i:05d}_{kind}.npy"
            np.save(os.path.join(out_dir, rel), arr)
            paths[kind] = rel
        return SampleRecord(sample_id=i, latent=z, pose=pose,
                            rgb_path=paths.get("rgb"), mask_path=paths["mask"],
                            depth_path=paths["depth"])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(emit, range(n)))
    else:
        records = [emit(i) for i in range(n)]
    manifest = DatasetManifest(records=records, seed=seed,
                               palette=sc.MASK_PALETTE.copy(),
                               config_hash=cfg.config_hash(), root=out_dir)
    manifest.save(os.path.join(out_dir, MANIFEST_NAME))
    return manifest


# ===========================================================================
# Fused clouds
# ===========================================================================


def fusion_poses(cfg: FactoryConfig = FactoryConfig()) -> list[cameras.CameraPose]:
    """Default fusion ring: evenly spaced azimuths around the full circle."""
    az = np.linspace(0.0, 2 * np.pi, cfg.fusion_views, endpoint=False)
    return cameras.orbit_poses(az, elevation=cfg.fusion_elevation,
                               radius=cfg.radius)


def scene_cloud(z: np.ndarray, decoder: sem.SemanticDecoder, sr: sem.SRModule,
                cfg: FactoryConfig = FactoryConfig(),
                poses: list[cameras.CameraPose] | None = None,
                voxel: float | None = None) -> LabeledPointCloud:
    """Fused multi-view cloud of one scene using predicted masks."""
    poses = fusion_poses(cfg) if poses is None else poses
    tp = bb.build_semantic_triplane(bb.synthesize_pyramid(z),
                                    multiscale=cfg.multiscale)
    clouds = []
    for i, pose in enumerate(poses):
        mask, depth = predict_view(z, pose, decoder, sr, cfg, triplane=tp)
        clouds.append(backproject(mask, depth, pose, view_id=i))
    return fuse(clouds, voxel=cfg.voxel if voxel is None else voxel)


def oracle_cloud(z: np.ndarray, poses: list[cameras.CameraPose],
                 resolution: int = 128, voxel: float = DEFAULT_VOXEL,
                 n_samples: int = oracle.DENSE_SAMPLES) -> LabeledPointCloud:
    """Fused cloud from ground-truth masks and depths (no learned parts)."""
    params = sc.decode_scene(z)
    clouds = []
    for i, pose in enumerate(poses):
        r = oracle.render_gt(params, pose, resolution, n_samples)
        clouds.append(backproject(r.mask, r.depth, pose, view_id=i, rgb=r.rgb))
    return fuse(clouds, voxel=voxel)


def point_labels(params: sc.SceneParams, points: np.ndarray) -> np.ndarray:
    """Ground-truth part label of world points: the nearest part's class."""
    return (np.argmin(sc.part_sdfs(params, points), axis=-1) + 1).astype(np.uint8)


def oracle_surface_cloud(z: np.ndarray, poses: list[cameras.CameraPose],
                         resolution: int = 128, voxel: float = 0.02
                         ) -> LabeledPointCloud:
    """Geometric surface reference: per view, the exact first level-set
    crossing from bisection search, backprojected on labeled pixels and
    fused.  This is where the surface *is*, as seen by these cameras."""
    params = sc.decode_scene(z)
    clouds = []
    for i, pose in enumerate(poses):
        r = oracle.render_gt(params, pose, resolution)
        bis = oracle.first_hit_depth(params, pose, resolution)
        mask = np.where(bis < pose.depth_sentinel - 1e-9, r.mask, 0).astype(np.uint8)
        clouds.append(backproject(mask, bis, pose, view_id=i))
    return fuse(clouds, voxel=voxel)


def surface_coverage(cloud: LabeledPointCloud, reference: LabeledPointCloud,
                     voxel: float = 0.02, tolerance: int = 1) -> float:
    """Fraction of reference-occupied voxels with a cloud point within
    ``tolerance`` cells (Chebyshev distance on voxel coordinates).

    Volumetric depth sits a soft-shell bias (up to two march steps) off the
    geometric surface, so exact-cell membership tops out near 0.91 at any
    sampling rate; a one-voxel tolerance credits that sub-quantum
    displacement while still failing on actual holes in the cloud.
    """
    if len(reference) == 0:
        return 0.0
    got = {tuple(k) for k in voxel_keys(cloud.points, voxel)}
    want = {tuple(k) for k in voxel_keys(reference.points, voxel)}
    offsets = [(a, b, c)
               for a in range(-tolerance, tolerance + 1)
               for b in range(-tolerance, tolerance + 1)
               for c in range(-tolerance, tolerance + 1)]
    hit = sum(any((k[0] + a, k[1] + b, k[2] + c) in got for a, b, c in offsets)
              for k in want)
    return hit / len(want)


def roundtrip_agreement(cloud: LabeledPointCloud,
                        masks: list[np.ndarray], depths: list[np.ndarray],
                        poses: list[cameras.CameraPose], tol: float) -> float:
    """Fraction of visible (point, view) pairs whose mask label matches.

    A point is visible in a view when it projects in-bounds to a non-background
    pixel and its projected z-depth matches the view's depth within ``tol``
    (occlusion test).  Fused clouds should round-trip into every contributing
    view; this is the factory's own consistency audit.
    """
    agree = total = 0
    for mask, depth, pose in zip(masks, depths, poses):
        res = mask.shape[0]
        rows, cols, z = cameras.project_points(pose, res, cloud.points)
        ok = (z > 0) & (rows >= 0) & (rows < res) & (cols >= 0) & (cols < res)
        r, c = rows[ok].astype(int), cols[ok].astype(int)
        visible = (np.abs(depth[r, c] - z[ok]) <= tol) & (mask[r, c] > 0)
        total += int(visible.sum())
        agree += int((mask[r, c][visible] == cloud.labels[ok][visible]).sum())
    return agree / total if total else 0.0
