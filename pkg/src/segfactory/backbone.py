"""Frozen generator backbone: multiscale feature pyramid, tri-plane
construction and sampling, and volumetric RGB/depth rendering.

Everything here is a deterministic, non-trainable function of the latent
code.  The backbone exposes exactly what the trainable semantic branch
consumes: tri-plane features at sample points, the density (shared
bit-for-bit with the analytic scene), per-ray compositing weights, and the
depth map.

Feature content
---------------
Each pyramid level is a single 24-channel square map: for each of the three
axis planes (XY, XZ, YZ) it rasterizes 8 fields over [-1, 1]^2 — the three
per-part minima of the SDF along the dropped axis, their minimum, a logistic
occupancy of that minimum, and the 3-channel softmin-blended albedo at the
axis-minimizing offset.  The 24 raw channels pass through tanh and then a
fixed seeded orthogonal channel mix, so part identity is not axis-aligned in
the features the semantic decoder sees, while differences confined to a few
raw fields stay rank-limited after mixing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import cameras, imageops, scene as sc, volume

LEVEL_RESOLUTIONS = (8, 16, 32, 64)
LEVEL_CHANNELS = 24
TRIPLANE_RES = 64
TRIPLANE_CHANNELS = 32
_FIELDS_PER_PLANE = 8
_MIX_SEED = 0x7A3D11

_RAW_CHUNK = 4096


def mixing_matrix() -> np.ndarray:
    """Fixed 24x24 orthogonal channel mix (seeded constant, sign-canonical)."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(_MIX_SEED)))
    a = rng.standard_normal((LEVEL_CHANNELS, LEVEL_CHANNELS))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


_MIX = mixing_matrix()


@dataclass(frozen=True)
class FeaturePyramid:
    """Square feature maps at strictly doubling resolutions, 24 channels."""
    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        res = tuple(l.shape[0] for l in self.levels)
        if res != LEVEL_RESOLUTIONS:
            raise ValueError(f"level resolutions {res} != {LEVEL_RESOLUTIONS}")
        for l in self.levels:
            if l.shape != (l.shape[0], l.shape[0], LEVEL_CHANNELS):
                raise ValueError(f"bad level shape {l.shape}")


@dataclass(frozen=True)
class TriPlane:
    """Three (R, R, C_p) feature grids over [-1,1]^2 of each axis pair."""
    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    def __post_init__(self):
        if not (self.xy.shape == self.xz.shape == self.yz.shape):
            raise ValueError("planes must share resolution and channels")

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.xy, self.xz, self.yz)


def _level_raw(params: sc.SceneParams, res: int) -> np.ndarray:
    """(res, res, 24) raw fields before tanh + mixing, float64."""
    axis = np.linspace(-1.0, 1.0, res)           # corner-aligned plane grid
    a, b = np.meshgrid(axis, axis, indexing="ij")
    ab = np.stack([a, b], axis=-1).reshape(-1, 2)
    chans = []
    for plane in range(3):
        sd = sc.projected_part_sdfs(params, plane, ab)      # (res*res, 3)
        smin = sd.min(axis=-1, keepdims=True)
        occ = expit(-smin / sc.SURFACE_TAU)
        alb = sc.albedo_from_sdfs(params, sd)
        chans.append(np.concatenate([sd, smin, occ, alb], axis=-1))
    return np.concatenate(chans, axis=-1).reshape(res, res, LEVEL_CHANNELS)


def synthesize_pyramid(z: np.ndarray) -> FeaturePyramid:
    """Deterministic multiscale feature maps for a latent code."""
    params = sc.decode_scene(z)
    levels = []
    for res in LEVEL_RESOLUTIONS:
        raw = np.tanh(_level_raw(params, res))
        levels.append((raw @ _MIX).astype(np.float32))
    return FeaturePyramid(levels=tuple(levels))


def build_semantic_triplane(p: FeaturePyramid, multiscale: bool = True) -> TriPlane:
    """Upsample all levels to the finest grid, concatenate, split into planes.

    Levels are corner-aligned grids over [-1,1]^2, so upsampling evaluates
    the same field at the finer node positions.  The 4 x 24 = 96 concatenated
    channels split into three contiguous groups of 32 (XY, XZ, YZ).

    With ``multiscale=False`` (single-scale ablation) only the finest level
    contributes: each plane keeps its own 8 finest-level fields and pads the
    remaining 24 channels with zeros, so 3/4 of every plane is zero while the
    tri-plane structure itself is preserved.
    """
    n = TRIPLANE_RES
    if multiscale:
        ups = [imageops.resample_bilinear(l.astype(np.float64), n, half_pixel=False)
               for l in p.levels]
        stack = np.concatenate(ups, axis=-1)
        if stack.shape[-1] != 3 * TRIPLANE_CHANNELS:
            raise ValueError(f"channel total {stack.shape[-1]} not divisible into 3 planes")
        c = TRIPLANE_CHANNELS
        planes = (stack[..., :c], stack[..., c:2 * c], stack[..., 2 * c:])
    else:
        finest = p.levels[-1].astype(np.float64)
        k = _FIELDS_PER_PLANE
        pad = np.zeros((n, n, TRIPLANE_CHANNELS - k))
        planes = tuple(np.concatenate([finest[..., i * k:(i + 1) * k], pad], axis=-1)
                       for i in range(3))
    return TriPlane(*(pl.astype(np.float32) for pl in planes))


_PLANE_COORDS = ((0, 1), (0, 2), (1, 2))  # (XY, XZ, YZ) index pairs into xyz


def sample_triplane(tp: TriPlane, x: np.ndarray) -> np.ndarray:
    """Sum of corner-aligned bilinear samples from the three planes.

    x: (n, 3) points; coordinates outside [-1,1] clamp to the boundary.
    Returns (n, C_p) float64.  Exactly linear in the plane contents.
    """
    x = np.asarray(x, dtype=np.float64)
    n_grid = tp.xy.shape[0]
    out = np.zeros((x.shape[0], tp.xy.shape[-1]))
    for plane, (ia, ib) in zip(tp.planes, _PLANE_COORDS):
        u = (np.clip(x[:, ia], -1.0, 1.0) + 1.0) * 0.5 * (n_grid - 1)
        v = (np.clip(x[:, ib], -1.0, 1.0) + 1.0) * 0.5 * (n_grid - 1)
        u0 = np.floor(u).astype(int).clip(0, n_grid - 2)
        v0 = np.floor(v).astype(int).clip(0, n_grid - 2)
        fu = u - u0
        fv = v - v0
        p = plane.astype(np.float64)
        out += ((1 - fu) * (1 - fv))[:, None] * p[u0, v0]
        out += ((1 - fu) * fv)[:, None] * p[u0, v0 + 1]
        out += (fu * (1 - fv))[:, None] * p[u0 + 1, v0]
        out += (fu * fv)[:, None] * p[u0 + 1, v0 + 1]
    return out


def rgb_density_decode(feat: np.ndarray | None, x: np.ndarray,
                       params: sc.SceneParams) -> tuple[np.ndarray, np.ndarray]:
    """Frozen RGB decoder: (color (..., 3), sigma (...)) at points x.

    The backbone is analytic, so the feature argument is accepted for call
    compatibility but unused; sigma comes from the single shared density
    implementation (the same bits both branches see), color from the
    SDF-softmin albedo blend.
    """
    x = np.asarray(x)
    sd = sc.part_sdfs(params, x)
    smin = sd.min(axis=-1)
    sigma = sc.density_from_min_sdf(smin)
    color = sc.albedo_from_sdfs(params, sd)
    return color, sigma


@dataclass(frozen=True)
class RenderConfig:
    resolution: int = 64
    samples_per_ray: int = 48
    seed: int = 0
    stratified: bool = True
    near: float | None = None          # default: pose.near_far()
    far: float | None = None
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    cache_samples: bool = False

    def __post_init__(self):
        if self.samples_per_ray < 16:
            raise ValueError("samples_per_ray must be >= 16")

    def bounds(self, pose: cameras.CameraPose) -> tuple[float, float]:
        near, far = pose.near_far()
        near = self.near if self.near is not None else near
        far = self.far if self.far is not None else far
        if not near < far:
            raise ValueError(f"near {near} must be < far {far}")
        return near, far


@dataclass
class SampleCache:
    """Per-ray sampling state the semantic branch reuses verbatim."""
    t: np.ndarray            # (rays, n) z-depths
    weights: np.ndarray      # (rays, n) compositing weights (float64)
    trans: np.ndarray        # (rays, n) transmittance entering each sample
    points: np.ndarray       # (rays, n, 3) world sample positions
    deltas: np.ndarray       # (rays, n) euclidean segment lengths
    resolution: int


@dataclass
class RenderOutput:
    rgb: np.ndarray          # (res, res, 3) in [0, 1]
    depth: np.ndarray        # (res, res)
    acc: np.ndarray          # (res, res)
    cache: SampleCache | None = None


def render(z: np.ndarray, pose: cameras.CameraPose, cfg: RenderConfig = RenderConfig()
           ) -> RenderOutput:
    """Volumetric RGB/depth render of the frozen backbone."""
    params = sc.decode_scene(z)
    return render_scene(params, pose, cfg)


def render_scene(params: sc.SceneParams, pose: cameras.CameraPose,
                 cfg: RenderConfig = RenderConfig()) -> RenderOutput:
    near, far = cfg.bounds(pose)
    res = cfg.resolution
    origin, dirs = cameras.ray_grid(pose, res)
    n_rays = dirs.shape[0]
    ns = cfg.samples_per_ray
    if cfg.stratified:
        t = volume.stratified_depths(near, far, ns, n_rays, seed=cfg.seed)
    else:
        t = volume.midpoint_depths(near, far, ns, n_rays)
    points = origin[None, None, :] + t[..., None] * dirs[:, None, :]

    color = np.empty((n_rays, ns, 3))
    sigma = np.empty((n_rays, ns))
    for lo in range(0, n_rays, _RAW_CHUNK):
        hi = min(lo + _RAW_CHUNK, n_rays)
        c, s = rgb_density_decode(None, points[lo:hi].reshape(-1, 3), params)
        color[lo:hi] = c.reshape(hi - lo, ns, 3)
        sigma[lo:hi] = s.reshape(hi - lo, ns)
    volume.check_finite("density", sigma)

    delta = volume.segment_lengths(t, far) * np.linalg.norm(dirs, axis=-1, keepdims=True)
    weights, trans = volume.compute_weights(sigma, delta)
    volume.check_finite("weights", weights)

    rgb = np.clip(volume.composite_colors(weights, color, cfg.background), 0.0, 1.0)
    depth = volume.depth_from_weights(weights, t, pose.depth_sentinel)
    acc = weights.sum(axis=-1)

    cache = None
    if cfg.cache_samples:
        cache = SampleCache(t=t, weights=weights, trans=trans, points=points,
                            deltas=delta, resolution=res)
    return RenderOutput(rgb=rgb.reshape(res, res, 3).astype(np.float32),
                        depth=depth.reshape(res, res),
                        acc=acc.reshape(res, res),
                        cache=cache)


def upsample_depth(depth: np.ndarray, factor: int, sentinel: float) -> np.ndarray:
    """Bilinear depth upsampling that never blends across the sentinel.

    Output pixels whose 2x2 source footprint is entirely valid interpolate
    bilinearly (half-pixel alignment); pixels whose footprint touches the
    sentinel copy their nearest valid source sample (ties resolve in fixed
    corner order); pixels with no valid source stay at the sentinel.
    """
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be one of 1,2,4,8, got {factor}")
    if factor == 1:
        return depth.copy()
    h, w = depth.shape
    ho, wo = h * factor, w * factor

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(h, ho)
    c0, c1, fc = axis(w, wo)
    corners = np.stack([depth[np.ix_(r0, c0)], depth[np.ix_(r0, c1)],
                        depth[np.ix_(r1, c0)], depth[np.ix_(r1, c1)]])
    wgt = np.stack([np.outer(1 - fr, 1 - fc), np.outer(1 - fr, fc),
                    np.outer(fr, 1 - fc), np.outer(fr, fc)])
    valid = corners < sentinel

    blended = (wgt * corners).sum(axis=0)
    # nearest valid corner = the valid corner with the largest bilinear weight
    wgt_valid = np.where(valid, wgt, -1.0)
    pick = wgt_valid.argmax(axis=0)
    nearest = np.take_along_axis(corners, pick[None], axis=0)[0]

    n_valid = valid.sum(axis=0)
    out = np.where(n_valid == 4, blended, np.where(n_valid > 0, nearest, sentinel))
    return out.astype(depth.dtype)
