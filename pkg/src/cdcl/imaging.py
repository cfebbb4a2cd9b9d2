"""Image I/O, colour conversion, bicubic resampling and PSNR/SSIM.

Images are ``float32`` numpy arrays of shape ``(H, W, C)`` with ``C`` in
{1, 3} and values in [0, 1].
"""
from __future__ import annotations

import math
import os
from fractions import Fraction
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Number = Union[int, float, Fraction]


class ImageFormatError(ValueError):
    """Malformed or truncated image file."""


class UnsupportedVariantError(ImageFormatError):
    """Valid Netpbm file of a variant other than binary P6/255."""


def as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3) or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"not an image array: shape {a.shape}")
    return np.clip(a, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-half-up to 8-bit levels, as uint8."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_image(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into an ``(H, W, 3)`` image."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P7"):
        raise UnsupportedVariantError(f"{path}: Netpbm variant {buf[:2].decode()} is not supported (P6 only)")
    if buf[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a PPM file")
    tokens, pos = _header_tokens(buf, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise UnsupportedVariantError(f"{path}: maxval {maxval} is not supported (255 only)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed header")
    payload = buf[pos + 1:]
    need = w * h * 3
    if len(payload) < need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    data = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float32) / np.float32(255.0)


def write_image(img: np.ndarray, path: Union[str, os.PathLike]) -> None:
    """Write a P6 file; single-channel images are replicated to RGB."""
    img = as_image(img)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize(img).tobytes())


# ---------------------------------------------------------------------------
# colour
# ---------------------------------------------------------------------------

_FULL = np.array([[0.299, 0.587, 0.114],
                  [-0.168736, -0.331264, 0.5],
                  [0.5, -0.418688, -0.081312]])
_STUDIO = np.array([[65.481, 128.553, 24.966],
                    [-37.797, -74.203, 112.0],
                    [112.0, -93.786, -18.214]]) / 255.0
# chroma centred at exactly 0.5 so achromatic input maps to the midpoint
_STUDIO_OFFSET = np.array([16.0 / 255.0, 0.5, 0.5])


def rgb_to_ycbcr(img: np.ndarray, range: str = "studio") -> np.ndarray:
    """BT.601 RGB -> YCbCr, all planes in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("rgb_to_ycbcr needs a 3-channel image")
    if range == "full":
        out = img @ _FULL.T + np.array([0.0, 0.5, 0.5])
    elif range == "studio":
        out = img @ _STUDIO.T + _STUDIO_OFFSET
    else:
        raise ValueError(f"unknown range {range!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def ycbcr_to_rgb_full(ycc: np.ndarray) -> np.ndarray:
    """Inverse of full-range :func:`rgb_to_ycbcr` (unclamped, float64)."""
    ycc = np.asarray(ycc, dtype=np.float64) - np.array([0.0, 0.5, 0.5])
    return ycc @ np.linalg.inv(_FULL).T


def luma(img: np.ndarray) -> np.ndarray:
    """Studio-swing Y in [16, 235] (8-bit units) of an RGB image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    return 16.0 + img @ np.array([65.481, 128.553, 24.966])


# ---------------------------------------------------------------------------
# bicubic
# ---------------------------------------------------------------------------

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``(out_len, in_len)`` bicubic interpolation matrix, edges clamped."""
    if antialias and scale < 1:
        kernel = lambda x: scale * cubic(scale * x)
        width = 4.0 / scale
    else:
        kernel = cubic
        width = 4.0
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kernel(u[:, None] - idx)
    wts = wts / wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    M = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(M, (rows, idx.reshape(-1)), wts.reshape(-1))
    return M


def output_size(n: int, scale: Number) -> int:
    return int(math.ceil(Fraction(n) * Fraction(scale).limit_denominator(10 ** 6) - Fraction(1, 10 ** 9)))


def bicubic_resize(img: np.ndarray, scale: Number, antialias: bool = True) -> np.ndarray:
    """Resize by ``scale`` with the a=-0.5 cubic kernel (MATLAB ``imresize`` convention)."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    oh, ow = output_size(h, scale), output_size(w, scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"scale {scale} gives empty output for {h}x{w}")
    s = float(scale)
    Mh = resize_matrix(h, oh, s, antialias)
    Mw = resize_matrix(w, ow, s, antialias)
    out = np.einsum("ih,hwc,jw->ijc", Mh, img.astype(np.float64), Mw, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _metric_planes(img: np.ndarray, crop: int, channel_mode: str) -> np.ndarray:
    q = quantize(img).astype(np.float64)
    if channel_mode == "y":
        planes = q[..., :1] if q.shape[2] == 1 else luma(q / 255.0)[..., None]
    elif channel_mode == "rgb":
        planes = q
    else:
        raise ValueError(f"unknown channel mode {channel_mode!r}")
    if crop:
        planes = planes[crop:-crop, crop:-crop]
    return planes


def _check_pair(a, b, crop):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if crop < 0 or 2 * crop >= min(a.shape[:2]):
        raise ValueError(f"crop {crop} too large for {a.shape[0]}x{a.shape[1]}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, crop: int = 0, channel_mode: str = "y") -> float:
    """PSNR in dB on 8-bit-quantized images; ``math.inf`` for identical inputs."""
    a, b = _check_pair(a, b, crop)
    pa, pb = _metric_planes(a, crop, channel_mode), _metric_planes(b, crop, channel_mode)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    k = win.shape[0]

    def filt(z):
        return np.tensordot(sliding_window_view(z, (k, k)), win, axes=([2, 3], [0, 1]))

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, crop: int = 0, channel_mode: str = "y") -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03, L=255)."""
    a, b = _check_pair(a, b, crop)
    pa, pb = _metric_planes(a, crop, channel_mode), _metric_planes(b, crop, channel_mode)
    if min(pa.shape[:2]) < 11:
        raise ValueError(f"image {pa.shape[0]}x{pa.shape[1]} smaller than the 11x11 window")
    win = gaussian_window()
    return float(np.mean([_ssim_plane(pa[..., c], pb[..., c], win) for c in range(pa.shape[2])]))
