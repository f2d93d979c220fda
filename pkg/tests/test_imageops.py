"""Separable resampling: scalar-loop oracle, adjoint identity, conventions."""

import numpy as np
import pytest

from segfactory import imageops


# ---------------------------------------------------------------------------
# Independent oracle: per-pixel scalar bilinear resampling, derived straight
# from the two coordinate conventions (half-pixel vs corner-aligned) without
# any matrix machinery.
# ---------------------------------------------------------------------------

def _oracle_resample(img, n_out, half_pixel):
    h, w = img.shape[:2]
    out = np.zeros((n_out, n_out) + img.shape[2:])
    for i in range(n_out):
        for j in range(n_out):
            if half_pixel:
                y = (i + 0.5) * (h / n_out) - 0.5
                x = (j + 0.5) * (w / n_out) - 0.5
            else:
                y = i * (h - 1) / (n_out - 1) if n_out > 1 and h > 1 else 0.0
                x = j * (w - 1) / (n_out - 1) if n_out > 1 and w > 1 else 0.0
            y = min(max(y, 0.0), h - 1.0)
            x = min(max(x, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0]
                         + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0]
                         + fy * fx * img[y1, x1])
    return out


@pytest.mark.parametrize("half_pixel", [True, False])
@pytest.mark.parametrize("n_in,n_out", [(5, 13), (13, 5), (8, 8), (4, 16)])
def test_resample_matches_scalar_oracle(half_pixel, n_in, n_out):
    rng = np.random.default_rng(2024)
    img = rng.normal(size=(n_in, n_in, 3))
    got = imageops.resample_bilinear(img, n_out, half_pixel=half_pixel)
    want = _oracle_resample(img, n_out, half_pixel)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("half_pixel", [True, False])
def test_resample_matrix_rows_sum_to_one(half_pixel):
    for n_in, n_out in [(3, 7), (7, 3), (8, 64), (64, 8), (1, 5)]:
        m = imageops.resample_matrix(n_in, n_out, half_pixel)
        assert m.shape == (n_out, n_in)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
        assert (m >= 0).all()


@pytest.mark.parametrize("half_pixel", [True, False])
def test_same_resolution_is_identity(half_pixel):
    m = imageops.resample_matrix(9, 9, half_pixel)
    np.testing.assert_array_equal(m, np.eye(9))


def test_corner_aligned_upsample_hits_source_nodes():
    # (n_out - 1) divisible by (n_in - 1): the coarse nodes reappear exactly.
    rng = np.random.default_rng(7)
    img = rng.normal(size=(8, 8, 2))
    up = imageops.resample_bilinear(img, 15, half_pixel=False)
    np.testing.assert_allclose(up[::2, ::2], img, atol=1e-12)


@pytest.mark.parametrize("half_pixel", [True, False])
def test_constant_preserved(half_pixel):
    img = np.full((4, 4), 0.37)
    out = imageops.resample_bilinear(img, 9, half_pixel=half_pixel)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


@pytest.mark.parametrize("half_pixel", [True, False])
def test_transpose_is_exact_adjoint(half_pixel):
    # <A x B^T, y> == <x, A^T y B> for every x, y.
    rng = np.random.default_rng(11)
    a = imageops.resample_matrix(7, 11, half_pixel)
    b = imageops.resample_matrix(5, 9, half_pixel)
    x = rng.normal(size=(7, 5, 2))
    y = rng.normal(size=(11, 9, 2))
    fwd = imageops.apply_separable(x, a, b)
    bwd = imageops.apply_separable_transpose(y, a, b)
    assert bwd.shape == x.shape
    np.testing.assert_allclose(np.vdot(fwd, y), np.vdot(x, bwd), rtol=1e-12)


def test_apply_separable_2d_and_3d_agree():
    rng = np.random.default_rng(3)
    a = imageops.resample_matrix(6, 10, True)
    b = imageops.resample_matrix(6, 10, True)
    img = rng.normal(size=(6, 6))
    flat = imageops.apply_separable(img, a, b)
    chan = imageops.apply_separable(img[..., None], a, b)
    np.testing.assert_allclose(chan[..., 0], flat, atol=1e-14)


def test_downsample_indices_tie_rounds_down():
    # factor 2: source centers land exactly between two pixels; the tie picks
    # the lower index, i.e. the top-left of each 2x2 block.
    np.testing.assert_array_equal(imageops.downsample_indices(8, 2),
                                  np.array([0, 2, 4, 6]))
    # factor 4: centers land between indices 4i+1 and 4i+2.
    np.testing.assert_array_equal(imageops.downsample_indices(8, 4),
                                  np.array([1, 5]))


def test_downsample_nearest_picks_expected_pixels():
    img = np.arange(64, dtype=float).reshape(8, 8)
    out = imageops.downsample_nearest(img, 2)
    np.testing.assert_array_equal(out, img[np.ix_([0, 2, 4, 6], [0, 2, 4, 6])])


def test_downsample_nearest_rejects_non_divisible():
    with pytest.raises(ValueError):
        imageops.downsample_nearest(np.zeros((9, 9)), 2)
