"""Pinhole camera model shared by every renderer and the back-projection path.

Conventions (referenced throughout the package):

* World frame: right-handed, ``+z`` up.  Objects live near the origin inside
  the unit cube.
* Camera frame: OpenCV-style — ``+x`` right, ``+y`` down, ``+z`` forward
  (into the scene).  A camera orbits the look-at point at ``radius``,
  parameterized by azimuth (angle in the xy-plane from ``+x``) and elevation
  (angle above the xy-plane).
* Pixels: row ``i`` / column ``j`` with the sample point at the pixel
  *center* ``(j + 0.5, i + 0.5)`` in pixel units.  The principal point
  defaults to the image center ``(res/2, res/2)``.
* Ray parameterization: directions are *unnormalized* ``K^-1 (u, v, 1)``, so
  the ray parameter ``t`` is camera z-depth.  The euclidean length of a
  segment ``dt`` along a ray is ``dt * |dir|``; renderers must scale optical
  depths accordingly.  ``backproject`` is then literally
  ``origin + depth * R @ K^-1 (u, v, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Focal length as a multiple of the image resolution.  With the default
# orbit radius 2.5 the unit-cube scene fills ~80% of the frame.
FOCAL_PER_PIXEL = 1.6

_WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraPose:
    """Orbit pose plus optional intrinsic overrides.

    azimuth/elevation in radians; elevation must stay clear of the poles
    (|elevation| < 1.45) so the look-at frame is well defined.
    """

    azimuth: float = 0.0
    elevation: float = 0.12
    radius: float = 2.5
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal: float | None = None      # pixels; None -> FOCAL_PER_PIXEL * res
    principal: tuple[float, float] | None = None  # (cx, cy) pixels; None -> center

    def __post_init__(self):
        if not np.isfinite([self.azimuth, self.elevation, self.radius]).all():
            raise ValueError("camera pose parameters must be finite")
        if abs(self.elevation) >= 1.45:
            raise ValueError(f"elevation {self.elevation:.3f} too close to the pole")
        if self.radius <= 0:
            raise ValueError("camera radius must be positive")

    # -- derived quantities -------------------------------------------------

    @property
    def origin(self) -> np.ndarray:
        ce, se = np.cos(self.elevation), np.sin(self.elevation)
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        return np.asarray(self.look_at) + self.radius * np.array([ce * ca, ce * sa, se])

    @property
    def rotation(self) -> np.ndarray:
        """3x3 camera-to-world rotation; columns are (right, down, forward)."""
        fwd = np.asarray(self.look_at) - self.origin
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, _WORLD_UP)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd], axis=1)

    def intrinsics(self, res: int) -> tuple[float, float, float]:
        """Return (focal, cx, cy) in pixels for a res x res image."""
        f = self.focal if self.focal is not None else FOCAL_PER_PIXEL * res
        cx, cy = self.principal if self.principal is not None else (res / 2.0, res / 2.0)
        return float(f), float(cx), float(cy)

    def near_far(self, margin: float = 1.2) -> tuple[float, float]:
        """Default z-depth bounds bracketing the orbit sphere.

        The near plane is clamped away from zero so close-in cameras still
        march a valid forward interval.
        """
        return max(self.radius - margin, 0.05 * self.radius), self.radius + margin

    @property
    def depth_sentinel(self) -> float:
        """Depth value written for pixels that saw (almost) nothing."""
        return 2.0 * self.radius

    def to_json(self) -> dict:
        d = {
            "azimuth": float(self.azimuth),
            "elevation": float(self.elevation),
            "radius": float(self.radius),
            "look_at": [float(v) for v in self.look_at],
        }
        if self.focal is not None:
            d["focal"] = float(self.focal)
        if self.principal is not None:
            d["principal"] = [float(v) for v in self.principal]
        return d

    @staticmethod
    def from_json(d: dict) -> "CameraPose":
        return CameraPose(
            azimuth=d["azimuth"],
            elevation=d["elevation"],
            radius=d["radius"],
            look_at=tuple(d.get("look_at", (0.0, 0.0, 0.0))),
            focal=d.get("focal"),
            principal=tuple(d["principal"]) if "principal" in d else None,
        )


# ===========================================================================
# Rays and projections
# ===========================================================================


def ray_grid(pose: CameraPose, res: int) -> tuple[np.ndarray, np.ndarray]:
    """World-space rays for every pixel of a res x res image.

    Returns (origin (3,), dirs (res*res, 3)); dirs are unnormalized
    (camera z component 1), row-major pixel order.
    """
    f, cx, cy = pose.intrinsics(res)
    jj, ii = np.meshgrid(np.arange(res), np.arange(res))  # ii = row, jj = col
    x = (jj + 0.5 - cx) / f
    y = (ii + 0.5 - cy) / f
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    return pose.origin, dirs


def rays_for_pixels(pose: CameraPose, res: int, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rays for an arbitrary subset of pixels (same conventions as ray_grid)."""
    f, cx, cy = pose.intrinsics(res)
    x = (np.asarray(cols) + 0.5 - cx) / f
    y = (np.asarray(rows) + 0.5 - cy) / f
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    return pose.origin, dirs_cam @ pose.rotation.T


def backproject_pixels(pose: CameraPose, res: int, rows: np.ndarray, cols: np.ndarray,
                       depth: np.ndarray) -> np.ndarray:
    """Lift pixels with z-depths to world points: origin + d * R K^-1 (u,v,1)."""
    origin, dirs = rays_for_pixels(pose, res, rows, cols)
    return origin + np.asarray(depth)[..., None] * dirs


def project_points(pose: CameraPose, res: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into a view.

    Returns (rows, cols, zdepth) as float arrays; rows/cols are the floored
    indices of the containing pixel.  Points behind the camera get
    zdepth <= 0 and must be filtered by the caller.
    """
    f, cx, cy = pose.intrinsics(res)
    p_cam = (np.asarray(points) - pose.origin) @ pose.rotation  # R^T (x - o)
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * p_cam[..., 0] / z + cx   # continuous column coordinate
        v = f * p_cam[..., 1] / z + cy   # continuous row coordinate
    # pixel centers sit at (j + 0.5): the containing pixel index is floor(u).
    return np.floor(v), np.floor(u), z


def orbit_poses(azimuths: np.ndarray, elevation: float = 0.2, radius: float = 2.5) -> list[CameraPose]:
    """Convenience: one orbit pose per azimuth, shared elevation/radius."""
    return [CameraPose(azimuth=float(a), elevation=elevation, radius=radius) for a in azimuths]
