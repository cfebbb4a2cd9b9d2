"""Content-decoupled implicit degradation modeling.

Leader branch (estimator, projector, predictor) and momentum-updated
auxiliary branch (estimator, projector), the InfoNCE-based contrastive loss
over cyclic-shift positive sets, and the representation CSV export.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from . import ops
from .nn import HE_GAIN, Conv2d, MLPHead, Module, ModuleList, copy_module_values, to_tensor
from .sampler import divide, pair_indices
from .tensor import Tensor, make_result, no_grad

FULL_CHANNELS = (64, 64, 128, 128, 256, 256)
STRIDES = (1, 2, 1, 2, 1, 1)


@dataclass(frozen=True)
class EstimatorConfig:
    channels: Tuple[int, ...] = FULL_CHANNELS
    strides: Tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.channels) != 6 or len(self.strides) != 6:
            raise ValueError("the estimator has exactly six conv layers")
        if math.prod(self.strides) != 4:
            raise ValueError("estimator strides must multiply to 4")

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    @classmethod
    def reduced(cls, divisor: int) -> "EstimatorConfig":
        return cls(tuple(c // divisor for c in FULL_CHANNELS))


class Estimator(Module):
    """Six 3x3 convs, GELU after the first five, total stride 4.

    There is no normalization inside, so the convs use the He bound to keep
    the signal from vanishing over depth.
    """

    def __init__(self, cfg: EstimatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        cin = 3
        self.convs = ModuleList()
        for cout, s in zip(cfg.channels, cfg.strides):
            self.convs.append(Conv2d(cin, cout, 3, rng, stride=s, gain=HE_GAIN))
            cin = cout

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"estimator input {x.shape[2]}x{x.shape[3]} not divisible by 4")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.gelu(x)
        return x


def embed(R: Tensor) -> Tensor:
    """Spatial mean of a degradation map: ``(N,E,h,w) -> (N,E)``."""
    return ops.flatten(ops.global_avg_pool(R))


def pair_matrix(n_blocks: int) -> np.ndarray:
    """``(K, n)`` averaging matrix over all block pairs (identity when n == 1)."""
    if n_blocks == 1:
        return np.ones((1, 1))
    pairs = pair_indices(n_blocks)
    A = np.zeros((len(pairs), n_blocks))
    for k, (a, b) in enumerate(pairs):
        A[k, a] = A[k, b] = 0.5
    return A


class BranchPair(Module):
    """Leader {estimator, projector, predictor} and auxiliary {estimator, projector}."""

    def __init__(self, cfg: EstimatorConfig, rng: np.random.Generator, hidden_ratio: int = 2):
        E = cfg.embed_dim
        self.cfg = cfg
        self.leader_estimator = Estimator(cfg, rng)
        self.leader_projector = MLPHead(E, hidden_ratio * E, E, rng)
        self.predictor = MLPHead(E, hidden_ratio * E, E, rng)
        self.aux_estimator = Estimator(cfg, rng)
        self.aux_projector = MLPHead(E, hidden_ratio * E, E, rng)
        copy_module_values(self.aux_estimator, self.leader_estimator)
        copy_module_values(self.aux_projector, self.leader_projector)
        for p in self.aux_estimator.parameters() + self.aux_projector.parameters():
            p.set_trainable(False)

    def leader_parameters(self):
        return (self.leader_estimator.parameters() + self.leader_projector.parameters()
                + self.predictor.parameters())

    def leader_projection(self, pos: np.ndarray, P: int) -> Tensor:
        """Pre-predictor leader features, ``(B*D*K, E)``."""
        B, D = pos.shape[:2]
        blocks = divide(pos, P)                       # (B, D, P*P, hb, wb, C)
        if blocks.shape[3] % 4 or blocks.shape[4] % 4:
            raise ValueError(f"patch side must be divisible by 4*P={4 * P}")
        n = P * P
        x = to_tensor(blocks.reshape((B * D * n,) + blocks.shape[3:]))
        feats = embed(self.leader_estimator(x))       # (B*D*n, E)
        E = feats.shape[1]
        A = pair_matrix(n)
        mixed = ops.mix(feats.reshape(B * D, n, E), A)  # (B*D, K, E)
        return self.leader_projector(mixed.reshape(B * D * A.shape[0], E))

    def leader_forward(self, pos: np.ndarray, P: int = 2) -> Tensor:
        """O of shape ``(B, D, K, E)`` from positive sets ``(B, D, h, w, C)``."""
        B, D = pos.shape[:2]
        z = self.leader_projection(pos, P)
        out = ops.l2_normalize(self.predictor(z))
        E = out.shape[1]
        return out.reshape(B, D, out.shape[0] // (B * D), E)

    def auxiliary_forward(self, pos: np.ndarray) -> Tensor:
        """T of shape ``(B, D, E)``; never recorded on the graph."""
        B, D = pos.shape[:2]
        if pos.shape[2] % 4 or pos.shape[3] % 4:
            raise ValueError("patch side must be divisible by 4")
        with no_grad():
            x = to_tensor(pos.reshape((B * D,) + pos.shape[2:]))
            t = ops.l2_normalize(self.aux_projector(embed(self.aux_estimator(x))))
        return Tensor(t.data.reshape(B, D, -1))


def momentum_update(pair: BranchPair, alpha: float) -> None:
    """``aux <- (1 - alpha) aux + alpha leader`` for estimator and projector.

    Evaluated in float64 and rounded once, so each element is within half
    an ulp of the exact convex combination.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"momentum coefficient {alpha} outside [0, 1]")
    for aux, lead in ((pair.aux_estimator, pair.leader_estimator),
                      (pair.aux_projector, pair.leader_projector)):
        for (na, pa), (nl, pl) in zip(aux.named_parameters(), lead.named_parameters()):
            if pa.shape != pl.shape:
                raise ValueError(f"twin shape mismatch: {na} {pa.shape} vs {nl} {pl.shape}")
            mixed = (1.0 - alpha) * pa.data.astype(np.float64) + alpha * pl.data.astype(np.float64)
            pa.data[...] = mixed.astype(pa.dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_normalized(x: np.ndarray, name: str, tol: float = 1e-4) -> None:
    norms = np.linalg.norm(x, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        raise AssertionError(f"{name} rows are not L2-normalized (max deviation "
                             f"{float(np.max(np.abs(norms - 1.0))):.2e})")


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def infonce(o: np.ndarray, t: np.ndarray, tau: float) -> float:
    """``mean_n -log softmax_m(o_n . t_m / tau)[n]`` for ``(B, E)`` rows."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    o, t = np.asarray(o, np.float64), np.asarray(t, np.float64)
    _check_normalized(o, "o")
    _check_normalized(t, "t")
    logits = o @ t.T / tau
    return float(np.mean(_logsumexp(logits, 1) - np.diag(logits)))


def contrastive_loss(O: Tensor, T, tau: float = 0.07) -> Tensor:
    """Average InfoNCE over every shift pair ``i != j`` and every block pair ``k``.

    ``O`` is ``(B, D, K, E)`` and ``T`` is ``(B, D, E)``. Gradients flow to
    ``O`` (and to ``T`` if it requires grad).
    """
    T = T if isinstance(T, Tensor) else Tensor(T)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if O.ndim != 4 or T.ndim != 3 or O.shape[:2] != T.shape[:2] or O.shape[3] != T.shape[2]:
        raise ValueError(f"inconsistent shapes O {O.shape}, T {T.shape}")
    B, D, K, E = O.shape
    if D < 2:
        raise ValueError("contrastive loss needs D >= 2")
    o = O.data.astype(np.float64)
    t = T.data.astype(np.float64)
    _check_normalized(o, "O")
    _check_normalized(t, "T")
    logits = np.einsum("nike,mje->ikjnm", o, t) / tau          # (D, K, D, B, B)
    lse = _logsumexp(logits, -1)                                 # (D, K, D, B)
    pos = np.einsum("nike,nje->ikjn", o, t) / tau
    mask = 1.0 - np.eye(D)                                       # i != j
    norm = K * D * (D - 1)
    per = (lse - pos).mean(axis=-1)                              # (D, K, D)
    value = float((per * mask[:, None, :]).sum() / norm)

    def bw(g):
        soft = np.exp(logits - lse[..., None])
        soft -= np.eye(B)[None, None, None]
        soft *= (float(g) / (norm * B * tau)) * mask[:, None, :, None, None]
        gO = np.einsum("ikjnm,mje->nike", soft, t).astype(O.dtype) if O.requires_grad else None
        gT = np.einsum("ikjnm,nike->mje", soft, o).astype(T.dtype) if T.requires_grad else None
        return gO, gT

    return make_result(np.asarray(value, dtype=O.dtype), (O, T), bw, "contrastive_loss")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_representations_csv(path, rows: Iterable[Tuple[str, str, Sequence[float]]], dim: int) -> None:
    """CSV with header ``sample_id, degradation_label, e0..e{dim-1}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "degradation_label"] + [f"e{i}" for i in range(dim)])
        for sid, label, vec in rows:
            w.writerow([sid, label] + [repr(float(v)) for v in vec])
