"""Benchmark evaluation over degradation grids and representation export."""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..cdidm import Estimator, embed, write_representations_csv
from ..degradation import DegradationSpec, degrade
from ..imaging import psnr, ssim
from ..nn import to_tensor
from ..srnet import SRModel, sr_forward
from ..tensor import no_grad

REPORT_FIELDS = ("grid", "cell", "scale", "n_images", "psnr", "ssim", "params", "ms_per_image")


def _setting3_cells() -> List[str]:
    parts = ("b2.0", "n20", "j60")
    cells = ["bic"]
    for r in (1, 2, 3):
        cells += ["".join(c) for c in itertools.combinations(parts, r)]
    return cells


GRIDS: Dict[str, Tuple[int, Tuple[str, ...]]] = {
    "setting1x4": (4, ("b1.2", "b2.4", "b3.6")),
    "setting1x3": (3, ("b0.8", "b1.6", "b2.4")),
    "setting3": (4, tuple(_setting3_cells())),
}


def parse_cell(label: str, scale: int) -> DegradationSpec:
    """``b2.0n20j60``-style tag -> spec; ``bic`` means plain downsampling."""
    if label == "bic":
        return DegradationSpec(scale=scale)
    sigma, noise, quality = 0.0, 0.0, None
    rest = label
    while rest:
        key = rest[0]
        j = 1
        while j < len(rest) and (rest[j].isdigit() or rest[j] == "."):
            j += 1
        if j == 1:
            raise ValueError(f"malformed degradation tag {label!r}")
        val = rest[1:j]
        if key == "b":
            sigma = float(val)
        elif key == "n":
            noise = float(val)
        elif key == "j":
            quality = int(val)
        else:
            raise ValueError(f"unknown component {key!r} in tag {label!r}")
        rest = rest[j:]
    return DegradationSpec("iso" if sigma > 0 else "none", sigma=sigma, noise=noise,
                           quality=quality, scale=scale)


def grid_specs(grid: str, scale: int = 0) -> List[Tuple[str, DegradationSpec]]:
    if grid not in GRIDS:
        raise ValueError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    default_scale, cells = GRIDS[grid]
    s = scale or default_scale
    return [(c, parse_cell(c, s)) for c in cells]


def crop_to_scale(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[:h - h % scale, :w - w % scale]


def _super_resolve(model, lr: np.ndarray) -> np.ndarray:
    if isinstance(model, SRModel):
        return sr_forward(lr, model)
    return model.super_resolve(lr)


def evaluate(model, images: Sequence[np.ndarray], grid: str, scale: int = 0, seed: int = 0,
             channel_mode: str = "y") -> List[dict]:
    """One report row per grid cell: mean PSNR/SSIM over ``images``.

    Metrics are computed on a ``scale``-pixel border crop. Each (cell, image)
    pair is degraded with its own generator seeded by ``(seed, cell, image)``.
    """
    if not len(images):
        raise ValueError("benchmark contains no images")
    specs = grid_specs(grid, scale)
    params = model.num_parameters()
    rows = []
    for ci, (label, spec) in enumerate(specs):
        s = spec.scale
        if isinstance(model, SRModel) and model.cfg.scale != s:
            raise ValueError(f"model scale {model.cfg.scale} != grid scale {s}")
        p_vals, s_vals, elapsed = [], [], 0.0
        for ii, hr in enumerate(images):
            hr = crop_to_scale(np.asarray(hr, np.float32), s)
            lr = degrade(hr, spec, np.random.default_rng([seed, ci, ii]))
            t0 = time.perf_counter()
            sr = _super_resolve(model, lr)
            elapsed += time.perf_counter() - t0
            p_vals.append(psnr(sr, hr, crop=s, channel_mode=channel_mode))
            s_vals.append(ssim(sr, hr, crop=s, channel_mode=channel_mode))
        rows.append({"grid": grid, "cell": label, "scale": s, "n_images": len(images),
                     "psnr": float(np.mean(p_vals)), "ssim": float(np.mean(s_vals)),
                     "params": params, "ms_per_image": 1000.0 * elapsed / len(images)})
    return rows


def write_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "psnr": f"{r['psnr']:.4f}", "ssim": f"{r['ssim']:.6f}",
                        "ms_per_image": f"{r['ms_per_image']:.2f}"})


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------

def separation_ratio(vectors: np.ndarray, labels: Sequence[str]) -> float:
    """Mean distance between samples of different classes over mean distance
    between distinct samples of the same class.

    About 1 when labels carry no structure; ``inf`` when every class
    collapses to a single point.
    """
    vectors = np.asarray(vectors, np.float64)
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ValueError("separation ratio needs at least 2 classes")
    sq = np.sum(vectors ** 2, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * vectors @ vectors.T, 0.0))
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra_mask = same & off_diag
    if not intra_mask.any():
        raise ValueError("every class needs at least 2 samples")
    inter = dist[~same].mean()
    intra = dist[intra_mask].mean()
    if intra == 0:
        return math.inf
    return float(inter / intra)


@dataclass
class Representations:
    sample_ids: List[str]
    labels: List[str]
    vectors: np.ndarray
    ratio: float

    def write_csv(self, path) -> None:
        write_representations_csv(path, zip(self.sample_ids, self.labels, self.vectors),
                                  self.vectors.shape[1])


def _crops(img: np.ndarray, patch: int, n: int, rng: np.random.Generator) -> List[np.ndarray]:
    h, w = img.shape[:2]
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch {patch}")
    out = []
    for _ in range(n):
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        out.append(img[y:y + patch, x:x + patch])
    return out


def export_representations(estimator: Estimator, images: Sequence[np.ndarray],
                           specs: Sequence[DegradationSpec], patch: int = 64,
                           per_image: int = 1, seed: int = 0, batch: int = 32) -> Representations:
    """Embed LR patches of every image under every spec.

    ``patch`` is the HR crop size; the same crops are used for all specs so
    that classes differ only by their degradation.
    """
    if len({s.label() for s in specs}) < 2:
        raise ValueError("export needs at least 2 distinct degradation classes")
    if not len(images):
        raise ValueError("no images to embed")
    rng = np.random.default_rng([seed, 0])
    crops, ids = [], []
    for ii, img in enumerate(images):
        for k, c in enumerate(_crops(np.asarray(img, np.float32), patch, per_image, rng)):
            crops.append(c)
            ids.append(f"img{ii:04d}_p{k}")
    hr = np.stack(crops)
    sample_ids, labels, vecs = [], [], []
    was_training = estimator.training
    estimator.eval()
    try:
        for si, spec in enumerate(specs):
            lr = degrade(hr, spec, np.random.default_rng([seed, 1, si]))
            with no_grad():
                for i in range(0, len(lr), batch):
                    vecs.append(embed(estimator(to_tensor(lr[i:i + batch]))).data.astype(np.float64))
            label = spec.label()
            sample_ids += [f"{sid}_{label}" for sid in ids]
            labels += [label] * len(ids)
    finally:
        estimator.train(was_training)
    vectors = np.concatenate(vecs)
    return Representations(sample_ids, labels, vectors, separation_ratio(vectors, labels))
