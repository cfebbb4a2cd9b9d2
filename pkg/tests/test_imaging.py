import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdcl.imaging import (ImageFormatError, UnsupportedVariantError, bicubic_resize, cubic,
                          gaussian_window, psnr, read_image, rgb_to_ycbcr, ssim, write_image)


# -- PPM ----------------------------------------------------------------------

def test_read_single_red_pixel(tmp_path):
    p = tmp_path / "r.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    np.testing.assert_array_equal(read_image(p), [[[1.0, 0.0, 0.0]]])


def test_write_header_and_rounding(tmp_path):
    p = tmp_path / "w.ppm"
    write_image(np.array([[[0.5, 1.0, 0.0]]]), p)
    assert p.read_bytes() == b"P6\n1 1\n255\n" + bytes([128, 255, 0])


@given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2 ** 16))
def test_ppm_round_trip_is_lossless(tmp_path_factory, h, w, seed):
    data = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3)).astype(np.float32) / 255
    p = tmp_path_factory.mktemp("rt") / "x.ppm"
    write_image(data, p)
    assert np.array_equal(read_image(p), data)


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 0, 51]))
    assert read_image(p)[0, 0, 2] == pytest.approx(0.2)


def test_read_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.ppm")
    p3 = tmp_path / "a.ppm"
    p3.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
    with pytest.raises(UnsupportedVariantError):
        read_image(p3)
    bad = tmp_path / "b.ppm"
    bad.write_bytes(b"P6\nx 1\n255\n\0\0\0")
    with pytest.raises(ImageFormatError):
        read_image(bad)
    short = tmp_path / "s.ppm"
    short.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ImageFormatError, match="truncated"):
        read_image(short)


def test_write_to_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_image(np.zeros((1, 1, 3)), tmp_path / "no" / "dir" / "x.ppm")


# -- colour -------------------------------------------------------------------

def test_ycbcr_examples():
    np.testing.assert_allclose(rgb_to_ycbcr(np.ones((1, 1, 3)), "full")[0, 0], [1, 0.5, 0.5], atol=1e-6)
    assert rgb_to_ycbcr(np.zeros((1, 1, 3)), "studio")[0, 0, 0] == pytest.approx(16 / 255)
    for rng_name in ("full", "studio"):
        np.testing.assert_allclose(rgb_to_ycbcr(np.full((1, 1, 3), 0.3), rng_name)[0, 0, 1:], 0.5, atol=1e-6)
    with pytest.raises(ValueError):
        rgb_to_ycbcr(np.zeros((2, 2, 1)))


# -- bicubic ------------------------------------------------------------------

def resample_direct(img, scale):
    """Loop-based separable antialiased cubic resampler with edge clamping."""
    def axis(src, n_out):
        n_in = len(src)
        out = np.zeros((n_out,) + src.shape[1:])
        k = min(scale, 1.0)
        for i in range(n_out):
            centre = (i + 1) / scale + 0.5 * (1 - 1 / scale)
            acc, wsum = 0.0, 0.0
            for j in range(int(centre) - 12, int(centre) + 13):
                wt = k * float(cubic(np.array(k * (centre - j))))
                acc = acc + wt * src[min(max(j, 1), n_in) - 1]
                wsum += wt
            out[i] = acc / wsum
        return out

    rows = axis(img.astype(np.float64), int(round(img.shape[0] * scale)))
    return np.swapaxes(axis(np.swapaxes(rows, 0, 1), int(round(img.shape[1] * scale))), 0, 1)


def test_downscale_ramp_matches_direct_summation():
    ramp = np.tile(np.linspace(0, 1, 8), (8, 1))[:, :, None].astype(np.float32)
    np.testing.assert_allclose(bicubic_resize(ramp, 0.5), resample_direct(ramp, 0.5), atol=1e-4)


def test_upscale_matches_direct_summation(rng):
    img = rng.random((5, 7, 3)).astype(np.float32)
    ref = np.clip(resample_direct(img, 3), 0, 1)
    np.testing.assert_allclose(bicubic_resize(img, 3), ref, atol=1e-5)


@given(v=st.floats(0, 1), scale=st.sampled_from([0.25, 1 / 3, 0.5, 2, 3, 4]))
def test_constant_is_fixed_point(v, scale):
    out = bicubic_resize(np.full((12, 12, 3), v, np.float32), scale)
    np.testing.assert_allclose(out, v, atol=1e-5)


def test_scale_one_is_identity(rng):
    img = rng.random((9, 6, 3)).astype(np.float32)
    np.testing.assert_allclose(bicubic_resize(img, 1), img, atol=1e-6)


def test_resize_errors():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4, 3)), 0)
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4, 3)), -2)


# -- PSNR ---------------------------------------------------------------------

def test_psnr_examples():
    a = np.full((8, 8, 3), 100 / 255)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 1 / 255, channel_mode="rgb") == pytest.approx(48.13, abs=0.01)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), channel_mode="rgb") == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), crop=2)


def test_psnr_crop_ignores_border():
    a = np.full((10, 10, 3), 0.5)
    b = a.copy()
    b[0] = 0.0
    assert psnr(a, b, crop=1) == math.inf


def test_psnr_noise_monotone_in_expectation(rng):
    img = rng.random((32, 32, 3))
    levels = [2, 5, 10, 20, 40]
    means = [np.mean([psnr(img, np.clip(img + rng.normal(0, s / 255, img.shape), 0, 1))
                      for _ in range(20)]) for s in levels]
    assert all(x >= y for x, y in zip(means, means[1:]))


# -- SSIM ---------------------------------------------------------------------

def ssim_naive(x, y):
    """Double loop over window positions with explicit weighted moments."""
    x, y = x.astype(np.float64), y.astype(np.float64)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cxy = (win * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_naive_oracle(rng):
    a = rng.random((32, 32, 1))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    qa = np.floor(a[..., 0] * 255 + 0.5)
    qb = np.floor(b[..., 0] * 255 + 0.5)
    assert ssim(a, b) == pytest.approx(ssim_naive(qa, qb), abs=1e-6)


def test_ssim_examples(rng):
    a = rng.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)
    board = np.kron((np.indices((4, 4)).sum(0) % 2), np.ones((4, 4)))[:, :, None].repeat(3, 2)
    assert ssim(board, 1 - board) < 0
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


@given(seed=st.integers(0, 2 ** 16))
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((12, 14, 3)), r.random((12, 14, 3))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_gaussian_window_normalized():
    assert gaussian_window().sum() == pytest.approx(1.0)
