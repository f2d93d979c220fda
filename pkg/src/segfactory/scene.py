"""Procedural vehicle-like scene family with analytic geometry ground truth.

A 16-dimensional latent code decodes to a composite of three part families —
a rounded-box body, a box roof sitting on top, and four sphere wheels — each
with its own albedo.  Because every part is an exact signed distance field,
the family provides free supervision everywhere: densities for volume
rendering, hard part labels, and closed-form projections used by the feature
backbone.

Latent layout (components clamped to [-1, 1] before the affine map):

    z[0:3]   body half-extents (x, y, z)
    z[3:6]   roof half-extents
    z[6]     roof lift above the body top
    z[7]     wheel radius
    z[8]     wheel center |x| offset
    z[9]     wheel center |y| offset
    z[10:13] body albedo
    z[13:15] roof albedo (two degrees of freedom)
    z[15]    wheel brightness

The geometry map is injective on z[0:10] (each component scales exactly one
parameter, so nearby latents decode to nearby scenes and two latents that
differ only in one geometry component decode to scenes differing only in
that parameter).  Every decoded object fits strictly inside [-1, 1]^3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# ===========================================================================
# Family constants
# ===========================================================================

LATENT_DIM = 16
NUM_CLASSES = 4                      # 0 background, 1 body, 2 roof, 3 wheel
CLASS_NAMES = ("background", "body", "roof", "wheel")

# Soft-surface shaping: sigma = DENSITY_SCALE * logistic(-sdf / SURFACE_TAU)
SURFACE_TAU = 0.02
DENSITY_SCALE = 50.0

BODY_ROUNDING = 0.03                 # corner radius of the body box

# (lo, hi) of each geometry parameter; midpoints define the canonical scene.
_GEOM_RANGES = np.array([
    [0.35, 0.55],   # body half x
    [0.18, 0.30],   # body half y
    [0.10, 0.18],   # body half z
    [0.12, 0.22],   # roof half x
    [0.14, 0.24],   # roof half y
    [0.06, 0.12],   # roof half z
    [0.00, 0.04],   # roof lift
    [0.085, 0.125], # wheel radius
    [0.20, 0.34],   # wheel |x| offset
    [0.14, 0.26],   # wheel |y| offset
])

_ALBEDO_BASE = {
    "body": np.array([0.55, 0.25, 0.25]),
    "roof": np.array([0.25, 0.35, 0.60]),
    "wheel": np.array([0.15, 0.15, 0.15]),
}
_ALBEDO_SPAN = 0.28

# Palette for indexed-color mask images (index == class id).
MASK_PALETTE = np.array([
    [40, 40, 48],      # background
    [205, 92, 92],     # body
    [65, 105, 225],    # roof
    [255, 215, 0],     # wheel
], dtype=np.uint8)

BACKGROUND_RGB = np.array([1.0, 1.0, 1.0])


class InvalidLatent(ValueError):
    pass


def validate_latent(z: np.ndarray) -> np.ndarray:
    """Check shape/finiteness and return z as a float64 vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (LATENT_DIM,):
        raise InvalidLatent(f"latent must have shape ({LATENT_DIM},), got {z.shape}")
    if not np.isfinite(z).all():
        raise InvalidLatent("latent contains non-finite components")
    return z


def sample_latents(rng: np.random.Generator, n: int) -> np.ndarray:
    """n latents uniform over [-1, 1]^16."""
    return rng.uniform(-1.0, 1.0, size=(n, LATENT_DIM))


# ===========================================================================
# Decoded scene parameters
# ===========================================================================


@dataclass(frozen=True)
class SceneParams:
    """Concrete geometry + per-part albedo decoded from a latent."""

    body_half: np.ndarray        # (3,)
    roof_half: np.ndarray        # (3,)
    roof_lift: float
    wheel_radius: float
    wheel_x: float
    wheel_y: float
    albedo: np.ndarray           # (3, 3) rows: body, roof, wheel

    @property
    def roof_center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.body_half[2] + self.roof_lift + self.roof_half[2]])

    @property
    def wheel_centers(self) -> np.ndarray:
        """(4, 3) wheel sphere centers, protruding below the body floor so
        they stay visible from shallow elevations (still intersecting the
        body, so the union surface is connected)."""
        cz = -(self.body_half[2] + 0.45 * self.wheel_radius)
        return np.array([
            [sx * self.wheel_x, sy * self.wheel_y, cz]
            for sx in (1.0, -1.0) for sy in (1.0, -1.0)
        ])


def decode_scene(z: np.ndarray) -> SceneParams:
    """Affine-plus-clamp map from a latent to scene parameters."""
    z = validate_latent(z)
    zc = np.clip(z, -1.0, 1.0)
    lo, hi = _GEOM_RANGES[:, 0], _GEOM_RANGES[:, 1]
    g = 0.5 * (lo + hi) + 0.5 * (hi - lo) * zc[:10]
    body_alb = _ALBEDO_BASE["body"] + _ALBEDO_SPAN * zc[10:13]
    roof_alb = _ALBEDO_BASE["roof"] + _ALBEDO_SPAN * np.array([zc[13], zc[14], -0.5 * zc[13]])
    wheel_alb = _ALBEDO_BASE["wheel"] + 0.10 * np.array([zc[15], zc[15], zc[15]])
    albedo = np.clip(np.stack([body_alb, roof_alb, wheel_alb]), 0.02, 0.98)
    return SceneParams(
        body_half=g[0:3],
        roof_half=g[3:6],
        roof_lift=float(g[6]),
        wheel_radius=float(g[7]),
        wheel_x=float(g[8]),
        wheel_y=float(g[9]),
        albedo=albedo,
    )


def canonical_scene() -> SceneParams:
    return decode_scene(np.zeros(LATENT_DIM))


# ===========================================================================
# Signed distance fields
# ===========================================================================
# All SDF helpers broadcast over leading batch dimensions of p (..., 3) and
# return (...,) float arrays in the same dtype family as the input.


def _sd_round_box(p: np.ndarray, half: np.ndarray, rounding: float) -> np.ndarray:
    q = np.abs(p) - (half - rounding)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - rounding


def _sd_box(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def body_sdf(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    return _sd_round_box(p, np.asarray(scene.body_half, dtype=p.dtype), p.dtype.type(BODY_ROUNDING))


def roof_sdf(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    c = np.asarray(scene.roof_center, dtype=p.dtype)
    return _sd_box(p - c, np.asarray(scene.roof_half, dtype=p.dtype))


def wheel_sdf(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    centers = np.asarray(scene.wheel_centers, dtype=p.dtype)   # (4, 3)
    d = np.linalg.norm(p[..., None, :] - centers, axis=-1)     # (..., 4)
    return np.min(d, axis=-1) - p.dtype.type(scene.wheel_radius)


def part_sdfs(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    """(..., 3) signed distances in class order (body, roof, wheel)."""
    p = np.asarray(p)
    return np.stack([body_sdf(scene, p), roof_sdf(scene, p), wheel_sdf(scene, p)], axis=-1)


def min_sdf(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    return np.min(part_sdfs(scene, p), axis=-1)


def density_from_min_sdf(s: np.ndarray) -> np.ndarray:
    """The single SDF-to-density mapping every renderer shares."""
    s = np.asarray(s)
    return s.dtype.type(DENSITY_SCALE) * expit(-s / s.dtype.type(SURFACE_TAU))


def density(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    """Soft occupancy density: strictly positive, ~DENSITY_SCALE deep inside,
    DENSITY_SCALE/2 exactly on the surface."""
    return density_from_min_sdf(min_sdf(scene, p))


def label(scene: SceneParams, p: np.ndarray) -> np.ndarray:
    """Hard part labels: 0 outside, else 1 + argmin part SDF (ties -> lowest id)."""
    sd = part_sdfs(scene, p)
    inside_part = np.argmin(sd, axis=-1) + 1    # argmin takes the first (lowest id) on ties
    return np.where(np.min(sd, axis=-1) > 0, 0, inside_part).astype(np.uint8)


def albedo_from_sdfs(scene: SceneParams, sd: np.ndarray,
                     blend_tau: float = SURFACE_TAU) -> np.ndarray:
    """Softmin-blend part albedos given per-part signed distances (..., 3)."""
    sd = np.asarray(sd)
    logits = -sd / sd.dtype.type(blend_tau)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ np.asarray(scene.albedo, dtype=sd.dtype)


def part_albedo(scene: SceneParams, p: np.ndarray, blend_tau: float = SURFACE_TAU) -> np.ndarray:
    """(..., 3) smooth per-point albedo: SDF-softmin blend of part albedos.

    Deep inside a part the blend converges to that part's albedo; across
    seams it interpolates smoothly (used by the frozen RGB decoder).
    """
    p = np.asarray(p)
    return albedo_from_sdfs(scene, part_sdfs(scene, p), blend_tau)


# ===========================================================================
# Closed-form axis projections (used by the feature pyramid)
# ===========================================================================
# min over the reduced axis of each part SDF, for grid points of one of the
# three axis planes.  Boxes and spheres admit exact minima over a coordinate
# axis as long as the object's extent along that axis is inside the slab,
# which holds by construction for this family.

_PLANE_AXES = ((0, 1), (0, 2), (1, 2))   # XY, XZ, YZ: kept axes per plane


def _box_axis_min(ab: np.ndarray, center: np.ndarray, half: np.ndarray,
                  keep: tuple[int, int], rounding: float = 0.0) -> np.ndarray:
    """Exact min over the dropped axis of a (rounded) box SDF.

    ab: (..., 2) coordinates of the two kept axes.
    """
    k = 3 - keep[0] - keep[1]
    h = half - rounding
    qa = np.abs(ab[..., 0] - center[keep[0]]) - h[keep[0]]
    qb = np.abs(ab[..., 1] - center[keep[1]]) - h[keep[1]]
    hk = h[k]
    outside = np.sqrt(np.maximum(qa, 0.0) ** 2 + np.maximum(qb, 0.0) ** 2)
    inside = np.minimum(np.maximum(np.maximum(qa, qb), -hk), 0.0)
    return outside + inside - rounding


def _spheres_axis_min(ab: np.ndarray, centers: np.ndarray, radius: float,
                      keep: tuple[int, int]) -> np.ndarray:
    """Exact min over the dropped axis of a union-of-spheres SDF."""
    c = centers[:, keep]                      # (4, 2)
    d = np.linalg.norm(ab[..., None, :] - c, axis=-1)
    return np.min(d, axis=-1) - radius


def projected_part_sdfs(scene: SceneParams, plane: int, ab: np.ndarray) -> np.ndarray:
    """(..., 3) per-part minima over the axis dropped by `plane` (0=XY,1=XZ,2=YZ)."""
    keep = _PLANE_AXES[plane]
    zero = np.zeros(3)
    body = _box_axis_min(ab, zero, np.asarray(scene.body_half), keep, BODY_ROUNDING)
    roof = _box_axis_min(ab, scene.roof_center, np.asarray(scene.roof_half), keep)
    wheel = _spheres_axis_min(ab, scene.wheel_centers, scene.wheel_radius, keep)
    return np.stack([body, roof, wheel], axis=-1)
