"""Differentiable operations over :class:`~cdcl.tensor.Tensor`.

Only the layer vocabulary the networks need is provided. Broadcasting is
limited to size-1 axes of an equal-rank operand (e.g. an ``(N,C,1,1)`` gate
over an ``(N,C,H,W)`` map).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import Tensor, make_result

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    if len(a) != len(b) or any(x != y and 1 not in (x, y) for x, y in zip(a, b)):
        raise ValueError(f"unsupported broadcast between {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise ValueError("only python scalars may be added to a tensor without wrapping")
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * xd.dtype.type(_SQRT_HALF)))
    cdf = cdf.astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + xd * pdf),)

    return make_result(xd * cdf, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data).astype(x.dtype, copy=False)
    # saturated values would round to exactly 0 or 1; keep the open interval
    info = np.finfo(x.dtype)
    y = np.clip(y, info.tiny, 1 - info.epsneg)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# shape and reductions
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,1,1) spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    if H * W == 0:
        raise ValueError("global_avg_pool on an empty spatial extent")

    def bw(g):
        return (np.broadcast_to(g / (H * W), x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), bw, "gap")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def mix(x: Tensor, A: np.ndarray) -> Tensor:
    """Linear recombination along axis 1: ``(M,n,E) -> (M,K,E)`` with fixed ``A (K,n)``."""
    A = np.asarray(A, dtype=x.dtype)
    if x.ndim != 3 or A.shape[1] != x.shape[1]:
        raise ValueError(f"mix: cannot combine {x.shape} with matrix {A.shape}")
    return make_result(np.matmul(A, x.data), (x,), lambda g: (np.matmul(A.T, g),), "mix")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit L2 norm."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(n, x.dtype.type(eps))
    y = x.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return make_result(y, (x,), bw, "l2_normalize")


# --------------------------------------------------------------------------
# pixel shuffle
# --------------------------------------------------------------------------

def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    N, C, H, W = a.shape
    c = C // (r * r)
    return a.reshape(N, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, c, H * r, W * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    N, c, H, W = a.shape
    h, w = H // r, W // r
    return a.reshape(N, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ValueError(f"pixel_shuffle: channels of {x.shape} not divisible by {r * r}")
    return make_result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ValueError(f"pixel_unshuffle: spatial dims of {x.shape} not divisible by {r}")
    return make_result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


# --------------------------------------------------------------------------
# dense / batch norm
# --------------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``y = x W^T + b`` for ``x (N,F)``, ``W (Fout,F)``."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise ValueError(f"dense: bias shape {b.shape} != ({W.shape[0]},)")
        y = y + b.data

    def bw(g):
        gx = g @ Wd if x.requires_grad else None
        gW = g.T @ xd if W.requires_grad else None
        gb = g.sum(axis=0) if b is not None else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_result(y, parents, bw, "dense")


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Batch normalization over axis 0 of ``(N,F)``.

    In training mode the running statistics arrays are updated in place.
    """
    if x.ndim != 2:
        raise ValueError(f"batch_norm1d expects (N,F), got {x.shape}")
    xd = x.data
    N = xd.shape[0]
    if training:
        if N < 2:
            raise ValueError("batch_norm1d needs N >= 2 in train mode")
        mu = xd.mean(axis=0)
        var = ((xd - mu) ** 2).mean(axis=0)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (N / (N - 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + xd.dtype.type(eps))).astype(xd.dtype)
    xhat = (xd - mu) * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def bw(g):
        gxh = g * gd
        if training:
            gx = inv / N * (N * gxh - gxh.sum(axis=0) - xhat * (gxh * xhat).sum(axis=0))
        else:
            gx = gxh * inv
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_result(y, (x, gamma, beta), bw, "batch_norm1d")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _pad(a: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return a
    if mode == "zero":
        return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    if mode == "reflect":
        if p > a.shape[2] - 1 or p > a.shape[3] - 1:
            raise ValueError(f"reflect pad {p} too wide for input {a.shape[2]}x{a.shape[3]}")
        return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def _reflect_fold(g: np.ndarray, p: int, axis: int) -> np.ndarray:
    n = g.shape[axis] - 2 * p
    g = np.moveaxis(g, axis, -1)
    out = g[..., p:p + n].copy()
    for r in range(p):
        out[..., p - r] += g[..., r]
        out[..., n - 2 - r] += g[..., p + n + r]
    return np.moveaxis(out, -1, axis)


def _unpad(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zero":
        return g[:, :, p:-p, p:-p]
    return _reflect_fold(_reflect_fold(g, p, 2), p, 3)


def _conv_dense(xp, w, s, Ho, Wo):
    """im2col matmul; columns are ordered (ky, kx, c) so copies run over
    contiguous channel vectors."""
    N, C = xp.shape[:2]
    O, _, k, _ = w.shape
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    if k == 1:
        cols = xh[:, ::s, ::s][:, :Ho, :Wo].reshape(N * Ho * Wo, C)
    else:
        win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, k * k * C)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(O, -1).T
    return out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2), cols


def _conv_dense_bw(g, cols, w, xp_shape, s, Ho, Wo, need_x=True):
    N, C, Hp, Wp = xp_shape
    O, _, k, _ = w.shape
    wr = w.transpose(0, 2, 3, 1).reshape(O, -1)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
    gw = np.ascontiguousarray((g2.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2))
    if not need_x:
        return None, gw
    dcols = (g2 @ wr).reshape(N, Ho, Wo, k, k, C)
    gxh = np.zeros((N, Hp, Wp, C), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxh[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, :, :, i, j]
    return gxh.transpose(0, 3, 1, 2), gw


def _conv_depthwise(xp, w, s, Ho, Wo):
    k = w.shape[2]
    out = np.zeros((xp.shape[0], xp.shape[1], Ho, Wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] * \
                w[:, 0, i, j][None, :, None, None]
    return out


def _conv_depthwise_bw(g, xp, w, s, Ho, Wo):
    k = w.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s),
                  slice(j, j + s * (Wo - 1) + 1, s))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gxp, gw


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero", groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``w`` has shape ``(Cout, Cin/groups, k, k)``. ``pad_mode`` is ``"zero"``
    or ``"reflect"``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape}, {w.shape}")
    N, C, H, W = x.shape
    O, Cg, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if C % groups or O % groups or Cg != C // groups:
        raise ValueError(f"conv2d: input channels {C} / groups {groups} incompatible with weight {w.shape}")
    if b is not None and b.shape != (O,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")
    xp = _pad(x.data, padding, pad_mode)
    Hp, Wp = xp.shape[2:]
    if Hp < k or Wp < k:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    wd = w.data
    depthwise = groups == C and Cg == 1 and O == C
    if groups == 1:
        out, cols = _conv_dense(xp, wd, stride, Ho, Wo)
        cache = cols
    elif depthwise:
        out = _conv_depthwise(xp, wd, stride, Ho, Wo)
        cache = None
    else:
        og = O // groups
        parts, cache = [], []
        for gi in range(groups):
            o, c = _conv_dense(xp[:, gi * Cg:(gi + 1) * Cg], wd[gi * og:(gi + 1) * og], stride, Ho, Wo)
            parts.append(o)
            cache.append(c)
        out = np.concatenate(parts, axis=1)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        if groups == 1:
            gxp, gw = _conv_dense_bw(g, cache, wd, xp.shape, stride, Ho, Wo, x.requires_grad)
        elif depthwise:
            gxp, gw = _conv_depthwise_bw(g, xp, wd, stride, Ho, Wo)
        else:
            og = O // groups
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gws = []
            for gi in range(groups):
                gx_i, gw_i = _conv_dense_bw(g[:, gi * og:(gi + 1) * og], cache[gi],
                                            wd[gi * og:(gi + 1) * og], (N, Cg, Hp, Wp), stride, Ho, Wo)
                gxp[:, gi * Cg:(gi + 1) * Cg] = gx_i
                gws.append(gw_i)
            gw = np.concatenate(gws, axis=0)
        gx = _unpad(gxp, padding, pad_mode) if x.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, bw, "conv2d")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute error."""
    gd = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gd.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {gd.shape}")
    diff = pred.data - gd
    n = diff.size

    def bw(g):
        return (np.sign(diff) * (g / n),)

    return make_result(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,), bw, "l1_loss")
