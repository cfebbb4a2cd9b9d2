"""Classical degradation model: blur, bicubic downsampling, noise, JPEG.

``I_LR = JPEG(downsample(I_HR * k) + n)``, applied in exactly that order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import signal

from .imaging import bicubic_resize, quantize, resize_matrix

KERNEL_SIZE = 21
MAX_EIGEN = 4.5


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    r = np.arange(size, dtype=np.float64) - size // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    return xx, yy


def iso_gaussian_kernel(size: int = KERNEL_SIZE, sigma: float = 1.0) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xx, yy = _grid(size)
    k = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def aniso_gaussian_kernel(size: int = KERNEL_SIZE, lambda1: float = 1.0, lambda2: float = 1.0,
                          angle: float = 0.0) -> np.ndarray:
    """Gaussian with covariance ``R(angle) diag(lambda1, lambda2) R(angle)^T``.

    The eigenvalues are variances; ``lambda1`` lies along the x (column) axis
    at ``angle = 0``.
    """
    if lambda1 <= 0 or lambda2 <= 0:
        raise ValueError(f"degenerate covariance: eigenvalues {lambda1}, {lambda2}")
    xx, yy = _grid(size)
    c, s = math.cos(angle), math.sin(angle)
    # project onto the rotated principal axes
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * (u ** 2 / lambda1 + v ** 2 / lambda2))
    return k / k.sum()


# ---------------------------------------------------------------------------
# spec / settings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradationSpec:
    blur_kind: str = "none"        # none | iso | aniso
    sigma: float = 0.0             # iso width, or lambda1 for aniso
    lambda2: float = 0.0
    theta: float = 0.0
    noise: float = 0.0             # sigma on the 0-255 scale
    quality: Optional[int] = None  # JPEG quality, None = no compression
    scale: int = 4

    def __post_init__(self):
        if self.blur_kind not in ("none", "iso", "aniso"):
            raise ValueError(f"unknown blur kind {self.blur_kind!r}")
        if self.blur_kind == "iso" and not 0 < self.sigma <= MAX_EIGEN:
            raise ValueError(f"isotropic sigma {self.sigma} outside (0, {MAX_EIGEN}]")
        if self.blur_kind == "aniso":
            if not (0 < self.sigma <= MAX_EIGEN and 0 < self.lambda2 <= MAX_EIGEN):
                raise ValueError(f"eigenvalues ({self.sigma}, {self.lambda2}) outside (0, {MAX_EIGEN}]")
            if not 0 <= self.theta < math.pi:
                raise ValueError(f"angle {self.theta} outside [0, pi)")
        if self.noise < 0:
            raise ValueError(f"negative noise level {self.noise}")
        if self.quality is not None and not 1 <= self.quality <= 100:
            raise ValueError(f"JPEG quality {self.quality} outside [1, 100]")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")

    @classmethod
    def iso(cls, sigma: float, scale: int = 4, noise: float = 0.0, quality: Optional[int] = None):
        return cls("iso", sigma=sigma, noise=noise, quality=quality, scale=scale)

    def kernel(self, size: int = KERNEL_SIZE) -> Optional[np.ndarray]:
        if self.blur_kind == "iso":
            return iso_gaussian_kernel(size, self.sigma)
        if self.blur_kind == "aniso":
            return aniso_gaussian_kernel(size, self.sigma, self.lambda2, self.theta)
        return None

    def label(self) -> str:
        """Short tag in the ``b2.0n20j60`` style; ``bic`` for no degradation."""
        parts = []
        if self.blur_kind == "iso":
            parts.append(f"b{self.sigma:.1f}")
        elif self.blur_kind == "aniso":
            parts.append(f"a{self.sigma:.2f}_{self.lambda2:.2f}_{self.theta:.2f}")
        if self.noise > 0:
            parts.append(f"n{self.noise:g}")
        if self.quality is not None:
            parts.append(f"j{self.quality}")
        return "".join(parts) or "bic"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DegradationSetting:
    """Sampling ranges of one experimental setting.

    ``preset`` 1-3 are the published settings; preset 0 draws isotropic
    widths from the fixed list ``widths``.
    """
    preset: int
    blur_kind: str
    sigma_range: Tuple[float, float] = (0.0, 0.0)
    noise_range: Tuple[float, float] = (0.0, 0.0)
    quality_range: Optional[Tuple[int, int]] = None
    component_prob: float = 1.0
    widths: Tuple[float, ...] = ()

    @classmethod
    def from_preset(cls, preset: int) -> "DegradationSetting":
        if preset == 1:
            return cls(1, "iso", sigma_range=(0.2, 4.0))
        if preset == 2:
            return cls(2, "aniso", sigma_range=(0.2, 4.0), noise_range=(0.0, 25.0))
        if preset == 3:
            return cls(3, "iso", sigma_range=(0.1, 3.0), noise_range=(1.0, 30.0),
                       quality_range=(40, 95), component_prob=0.5)
        raise ValueError(f"unknown degradation preset {preset}")

    @classmethod
    def fixed_widths(cls, widths: Sequence[float]) -> "DegradationSetting":
        if not widths:
            raise ValueError("need at least one width")
        return cls(0, "iso", widths=tuple(float(w) for w in widths))


def sample_spec(setting: DegradationSetting, scale: int, rng: np.random.Generator) -> DegradationSpec:
    if setting.preset == 0:
        sigma = setting.widths[int(rng.integers(len(setting.widths)))]
        return DegradationSpec("iso", sigma=sigma, scale=scale)
    if setting.preset == 1:
        return DegradationSpec("iso", sigma=float(rng.uniform(*setting.sigma_range)), scale=scale)
    if setting.preset == 2:
        l1, l2 = rng.uniform(*setting.sigma_range, size=2)
        theta = float(rng.uniform(0.0, math.pi))
        noise = float(rng.uniform(*setting.noise_range))
        return DegradationSpec("aniso", sigma=float(l1), lambda2=float(l2), theta=theta,
                               noise=noise, scale=scale)
    if setting.preset == 3:
        p = setting.component_prob
        use_blur, use_noise, use_jpeg = rng.random(3) < p
        sigma = float(rng.uniform(*setting.sigma_range))
        noise = float(rng.uniform(*setting.noise_range))
        quality = int(rng.integers(setting.quality_range[0], setting.quality_range[1] + 1))
        return DegradationSpec("iso" if use_blur else "none", sigma=sigma if use_blur else 0.0,
                               noise=noise if use_noise else 0.0,
                               quality=quality if use_jpeg else None, scale=scale)
    raise ValueError(f"unknown degradation preset {setting.preset}")


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution with reflect boundary, per channel.

    Accepts a single ``(H,W,C)`` image or a stack ``(N,H,W,C)``.
    """
    img = np.asarray(img, dtype=np.float64)
    k = kernel.shape[0]
    h, w = img.shape[-3], img.shape[-2]
    if k > min(h, w):
        raise ValueError(f"kernel {k}x{k} larger than image {h}x{w}")
    p = k // 2
    pad = [(0, 0)] * img.ndim
    pad[-3] = pad[-2] = (p, p)
    padded = np.pad(img, pad, mode="reflect")
    kk = kernel.reshape((1,) * (img.ndim - 3) + (k, k, 1))
    out = signal.fftconvolve(padded, kk, mode="valid", axes=(img.ndim - 3, img.ndim - 2))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def downsample(img: np.ndarray, scale: int, method: str = "bicubic") -> np.ndarray:
    """Reduce by an integer factor; ``(H,W,C)`` or ``(N,H,W,C)``."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[-3], img.shape[-2]
    if h % scale or w % scale:
        raise ValueError(f"dims {h}x{w} not divisible by scale {scale}")
    if method == "decimate":
        return np.ascontiguousarray(img[..., ::scale, ::scale, :])
    if method != "bicubic":
        raise ValueError(f"unknown downsampler {method!r}")
    if img.ndim == 3:
        return bicubic_resize(img, 1.0 / scale, antialias=True)
    Mh = resize_matrix(h, h // scale, 1.0 / scale)
    Mw = resize_matrix(w, w // scale, 1.0 / scale)
    out = np.einsum("ih,nhwc,jw->nijc", Mh, img.astype(np.float64), Mw, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def add_gaussian_noise(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    if level < 0:
        raise ValueError(f"negative noise level {level}")
    img = np.asarray(img, dtype=np.float32)
    if level == 0:
        return img.copy()
    noise = rng.standard_normal(img.shape) * (level / 255.0)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


_LUMA_Q = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99], dtype=np.float64).reshape(8, 8)
_CHROMA_Q = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99], dtype=np.float64).reshape(8, 8)

_RGB2YCC = np.array([[0.299, 0.587, 0.114],
                     [-0.168736, -0.331264, 0.5],
                     [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a baseline quantization table."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality {quality} outside [1, 100]")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def block_dct(plane: np.ndarray) -> np.ndarray:
    """Orthonormal 8x8 DCT-II of a plane whose dims are multiples of 8 -> (bh, bw, 8, 8)."""
    h, w = plane.shape
    blocks = plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    return sfft.dctn(blocks, axes=(2, 3), norm="ortho")


def _block_idct(coef: np.ndarray) -> np.ndarray:
    bh, bw = coef.shape[:2]
    blocks = sfft.idctn(coef, axes=(2, 3), norm="ortho")
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def jpeg_degrade(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG round trip (4:4:4, no entropy coding) of an RGB image."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality {quality} outside [1, 100]")
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("jpeg_degrade needs an (H, W, 3) image")
    h, w = img.shape[:2]
    rgb = quantize(img).astype(np.float64)
    ycc = rgb @ _RGB2YCC.T + np.array([0.0, 128.0, 128.0])
    ph, pw = -h % 8, -w % 8
    ycc = np.pad(ycc, ((0, ph), (0, pw), (0, 0)), mode="edge")
    out = np.empty_like(ycc)
    tables = (quant_table(_LUMA_Q, quality), quant_table(_CHROMA_Q, quality))
    for c in range(3):
        q = tables[0] if c == 0 else tables[1]
        coef = block_dct(ycc[..., c] - 128.0)
        coef = np.round(coef / q) * q
        out[..., c] = _block_idct(coef) + 128.0
    rec = (out[:h, :w] - np.array([0.0, 128.0, 128.0])) @ _YCC2RGB.T
    rec = np.clip(np.floor(rec + 0.5), 0, 255)
    return (rec / 255.0).astype(np.float32)


def degrade(hr: np.ndarray, spec: DegradationSpec, rng: np.random.Generator,
            downsampler: str = "bicubic") -> np.ndarray:
    """Blur -> downsample -> noise -> JPEG. Works on one image or a stack."""
    hr = np.asarray(hr, dtype=np.float32)
    h, w = hr.shape[-3], hr.shape[-2]
    if h % spec.scale or w % spec.scale:
        raise ValueError(f"HR dims {h}x{w} not divisible by scale {spec.scale}")
    k = spec.kernel()
    x = blur(hr, k) if k is not None else hr
    x = downsample(x, spec.scale, downsampler)
    if spec.noise > 0:
        x = add_gaussian_noise(x, spec.noise, rng)
    if spec.quality is not None:
        if x.ndim == 4:
            x = np.stack([jpeg_degrade(im, spec.quality) for im in x])
        else:
            x = jpeg_degrade(x, spec.quality)
    return x


MANIFEST_FIELDS = ("hr_path", "lr_path", "blur_kind", "sigma_or_l1", "l2", "theta",
                   "noise", "quality", "scale", "seed")


def manifest_row(hr_path: str, lr_path: str, spec: DegradationSpec, seed: int) -> dict:
    return {
        "hr_path": hr_path, "lr_path": lr_path, "blur_kind": spec.blur_kind,
        "sigma_or_l1": spec.sigma, "l2": spec.lambda2, "theta": spec.theta,
        "noise": spec.noise, "quality": "" if spec.quality is None else spec.quality,
        "scale": spec.scale, "seed": seed,
    }
