"""Procedural training images and PPM directory helpers."""
from __future__ import annotations

import os
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .imaging import read_image, write_image

IMAGE_SUFFIXES = (".ppm",)


def _smooth_noise(h: int, w: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Value noise: a coarse random grid bilinearly upsampled to (h, w)."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g = grid
    return ((1 - fy) * (1 - fx) * g[y0][:, x0] + (1 - fy) * fx * g[y0][:, x0 + 1]
            + fy * (1 - fx) * g[y0 + 1][:, x0] + fy * fx * g[y0 + 1][:, x0 + 1])


def synthetic_image(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Random composition of gradients, stripes, disks and texture, in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    base = rng.random(3)
    tilt = rng.normal(0, 0.4, size=(2, 3))
    img[:] = base + (yy[..., None] / h - 0.5) * tilt[0] + (xx[..., None] / w - 0.5) * tilt[1]
    for _ in range(int(rng.integers(6, 12))):
        kind = rng.integers(3)
        color = rng.random(3)
        if kind == 0:
            # oriented stripes with a random period
            ang = rng.uniform(0, np.pi)
            period = rng.uniform(3.0, 16.0)
            phase = (np.cos(ang) * xx + np.sin(ang) * yy) * 2 * np.pi / period
            mask = (np.sin(phase) > 0).astype(np.float64)
            mask *= _smooth_noise(h, w, max(4, h // 4), rng) > 0.4
        elif kind == 1:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(min(h, w) / 10, min(h, w) / 3)
            mask = (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r).astype(np.float64)
        else:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(h // 6, h // 2 + 1), x0 + rng.integers(w // 6, w // 2 + 1)
            mask = np.zeros((h, w))
            mask[y0:y1, x0:x1] = 1.0
        img = img * (1 - mask[..., None]) + color * mask[..., None]
    for cell in (1, int(rng.integers(2, 5))):
        texture = _smooth_noise(h, w, cell, rng) - 0.5
        img += rng.uniform(0.05, 0.2) * texture[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_corpus(n: int, size: int | Tuple[int, int] = 96, seed: int = 0) -> List[np.ndarray]:
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    return [synthetic_image(h, w, rng) for _ in range(n)]


def list_images(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_images(directory) -> Tuple[List[Path], List[np.ndarray]]:
    paths = list_images(directory)
    return paths, [read_image(p) for p in paths]


def save_images(directory, images: Sequence[np.ndarray], prefix: str = "img") -> List[Path]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = Path(directory) / f"{prefix}{i:04d}.ppm"
        write_image(img, p)
        paths.append(p)
    return paths
