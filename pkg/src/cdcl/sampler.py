"""Cyclic shift sampling and divide-combine block pairing."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .degradation import DegradationSetting, DegradationSpec, degrade, sample_spec


@dataclass
class PatchSequence:
    patches: np.ndarray        # (B, p, p, C)
    sources: List[int]         # corpus index of each patch's image

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class PatchMatrix:
    """D x B grid of HR patches with one degradation per column.

    ``index[i, b]`` is the position in the originating sequence of the patch
    at row ``i``, column ``b``; it always equals ``(b + i) % B``.
    """
    hr: np.ndarray                     # (D, B, p, p, C)
    index: np.ndarray                  # (D, B) int
    specs: List[DegradationSpec]       # one per column
    lr: np.ndarray                     # (D, B, p/s, p/s, C)
    sources: List[int]

    @property
    def D(self) -> int:
        return self.hr.shape[0]

    @property
    def B(self) -> int:
        return self.hr.shape[1]

    def positive_sets(self) -> np.ndarray:
        """Contrastive view: (B, D, h, w, C); set b shares degradation ``specs[b]``."""
        return self.lr.transpose(1, 0, 2, 3, 4)

    def sr_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """SR view: D*B aligned (HR, LR) stacks in row-major cell order."""
        D, B = self.D, self.B
        return (self.hr.reshape((D * B,) + self.hr.shape[2:]),
                self.lr.reshape((D * B,) + self.lr.shape[2:]))


TrainingBatch = PatchMatrix


def draw_images(corpus: Sequence[np.ndarray], B: int, rng: np.random.Generator) -> Tuple[list, List[int]]:
    """Pick B source images, distinct whenever the corpus is large enough."""
    if not corpus:
        raise ValueError("empty corpus")
    n = len(corpus)
    if n >= B:
        ids = rng.choice(n, size=B, replace=False)
    else:
        warnings.warn(f"corpus has {n} images < batch size {B}; sampling with replacement, "
                      "columns may repeat a source image", RuntimeWarning, stacklevel=2)
        ids = rng.choice(n, size=B, replace=True)
    ids = [int(i) for i in ids]
    return [corpus[i] for i in ids], ids


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip followed by a random multiple-of-90 rotation."""
    if rng.random() < 0.5:
        patch = patch[:, ::-1]
    return np.ascontiguousarray(np.rot90(patch, int(rng.integers(4))))


def sample_patch_sequence(images: Sequence[np.ndarray], patch_size: int, rng: np.random.Generator,
                          do_augment: bool = True, sources: Sequence[int] = None) -> PatchSequence:
    """One uniformly positioned square crop per image, then flip/rotate."""
    out = []
    for im in images:
        h, w = im.shape[:2]
        if h < patch_size or w < patch_size:
            raise ValueError(f"image {h}x{w} smaller than patch {patch_size}")
        y = int(rng.integers(h - patch_size + 1))
        x = int(rng.integers(w - patch_size + 1))
        p = im[y:y + patch_size, x:x + patch_size]
        out.append(augment(p, rng) if do_augment else np.array(p))
    src = list(sources) if sources is not None else list(range(len(images)))
    return PatchSequence(np.stack(out).astype(np.float32), src)


def shift_index(B: int, D: int) -> np.ndarray:
    """``(D, B)`` table with entry ``(b + i) % B`` at row ``i``."""
    if D < 2:
        raise ValueError(f"need at least 2 shifts, got D={D}")
    if D > B:
        raise ValueError(f"D={D} exceeds B={B}; a column would repeat a patch")
    return (np.arange(B)[None, :] + np.arange(D)[:, None]) % B


def build_patch_matrix(seq: PatchSequence, D: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack ``seq`` and its first D-1 left rotations as rows: returns ``(hr, index)``."""
    idx = shift_index(len(seq), D)
    return seq.patches[idx], idx


def degrade_matrix(hr: np.ndarray, index: np.ndarray, setting: DegradationSetting, scale: int,
                   rng: np.random.Generator, sources: Sequence[int] = (),
                   downsampler: str = "bicubic") -> PatchMatrix:
    """Draw one spec per column and degrade every cell of that column with it."""
    D, B = hr.shape[:2]
    specs, cols = [], []
    for b in range(B):
        spec = sample_spec(setting, scale, rng)
        specs.append(spec)
        cols.append(degrade(hr[:, b], spec, rng, downsampler))
    lr = np.stack(cols, axis=1)
    return PatchMatrix(hr=hr, index=index, specs=specs, lr=lr, sources=list(sources))


def make_batch(corpus: Sequence[np.ndarray], B: int, D: int, patch_size: int,
               setting: DegradationSetting, scale: int, rng: np.random.Generator,
               do_augment: bool = True, downsampler: str = "bicubic") -> PatchMatrix:
    images, ids = draw_images(corpus, B, rng)
    seq = sample_patch_sequence(images, patch_size, rng, do_augment, ids)
    hr, idx = build_patch_matrix(seq, D)
    return degrade_matrix(hr, idx, setting, scale, rng, ids, downsampler)


def divide(patch: np.ndarray, P: int) -> np.ndarray:
    """Split ``(..., H, W, C)`` into a row-major ``(..., P*P, H/P, W/P, C)`` block stack."""
    h, w = patch.shape[-3], patch.shape[-2]
    if h % P or w % P:
        raise ValueError(f"patch {h}x{w} not divisible by P={P}")
    lead = patch.shape[:-3]
    c = patch.shape[-1]
    bh, bw = h // P, w // P
    x = patch.reshape(lead + (P, bh, P, bw, c))
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)
    return x.reshape(lead + (P * P, bh, bw, c))


def combine(blocks: np.ndarray, P: int) -> np.ndarray:
    """Inverse of :func:`divide`."""
    lead = blocks.shape[:-4]
    bh, bw, c = blocks.shape[-3:]
    n = len(lead)
    x = blocks.reshape(lead + (P, P, bh, bw, c))
    x = np.moveaxis(x, n + 1, n + 2)
    return x.reshape(lead + (P * bh, P * bw, c))


def pair_indices(n: int) -> List[Tuple[int, int]]:
    """All unordered index pairs of ``range(n)`` in lexicographic order."""
    if n < 2:
        raise ValueError(f"need at least 2 items to pair, got {n}")
    return list(itertools.combinations(range(n), 2))
