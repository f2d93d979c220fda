"""Separable resampling operators used across rendering and training.

Two grid conventions live in this package, chosen per use:

* half-pixel (area-aligned): image resampling — the super-resolution
  upsample, depth upsampling, ground-truth mask downsampling.  Output pixel
  centers map to input coordinates via (i + 0.5)/f - 0.5, which keeps pixel
  centers of different resolutions aligned under the same pinhole camera.
* corner-aligned: feature-plane resampling — pyramid levels are grids over
  [-1, 1]^2 whose first/last nodes sit exactly on the boundary, matching the
  tri-plane sampling convention.

Bilinear resampling is expressed as dense per-axis matrices so the exact
transpose is available for hand-derived backward passes: if y = A x B^T
then dL/dx = A^T g B.
"""

from __future__ import annotations

import numpy as np


def _axis_coords(n_out: int, n_in: int, half_pixel: bool) -> np.ndarray:
    if half_pixel:
        return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resample_matrix(n_in: int, n_out: int, half_pixel: bool) -> np.ndarray:
    """Dense (n_out, n_in) bilinear interpolation matrix along one axis.

    Coordinates outside the grid clamp to the border sample, so constant
    inputs stay constant under either convention.
    """
    src = np.clip(_axis_coords(n_out, n_in, half_pixel), 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def resample_bilinear(img: np.ndarray, n_out: int, half_pixel: bool) -> np.ndarray:
    """Resample (h, w[, c]) to (n_out, n_out[, c]) bilinearly."""
    a = resample_matrix(img.shape[0], n_out, half_pixel)
    b = resample_matrix(img.shape[1], n_out, half_pixel)
    return apply_separable(img, a, b)


def apply_separable(img: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[i,j] = sum_{p,q} a[i,p] b[j,q] img[p,q] over the two leading axes."""
    out = np.tensordot(a, img, axes=(1, 0))
    return np.moveaxis(np.tensordot(b, out, axes=(1, 1)), 0, 1)


def apply_separable_transpose(grad: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact adjoint of apply_separable for backward passes."""
    return apply_separable(grad, a.T, b.T)


def downsample_indices(n_in: int, factor: int) -> np.ndarray:
    """Nearest-source index per output pixel under half-pixel alignment.

    Exact half ties round down, so the map is deterministic.
    """
    src = (np.arange(n_in // factor) + 0.5) * factor - 0.5
    lo = np.floor(src).astype(int)
    return np.where(src - lo > 0.5, lo + 1, lo).clip(0, n_in - 1)


def downsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample of (h, w[, c]) by an integer factor."""
    if img.shape[0] % factor or img.shape[1] % factor:
        raise ValueError(f"image side not divisible by factor {factor}")
    ri = downsample_indices(img.shape[0], factor)
    ci = downsample_indices(img.shape[1], factor)
    return img[np.ix_(ri, ci)]
