"""Parameters, modules and the small set of layers used by the networks."""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=trainable)
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def assign(self, value: np.ndarray) -> None:
        """Overwrite values in place; the shape is fixed at construction."""
        value = np.asarray(value)
        if value.shape != self.data.shape:
            raise ValueError(f"cannot assign shape {value.shape} to parameter of shape {self.data.shape}")
        self.data[...] = value


class Module:
    """Container that discovers parameters, buffers and children by attribute order."""

    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update({n: b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        if strict:
            unknown = sorted(set(state) - set(own) - set(bufs))
            if unknown:
                raise KeyError(f"unknown tensor name(s): {', '.join(unknown)}")
            missing = sorted((set(own) | set(bufs)) - set(state))
            if missing:
                raise KeyError(f"missing tensor(s): {', '.join(missing)}")
        for name, value in state.items():
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                continue
            value = np.asarray(value)
            if value.shape != target.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape} vs model {target.shape}")
            target[...] = value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.data.size for p in ps))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(list):
    pass


HE_GAIN = math.sqrt(6.0)


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Uniform on ``+-gain / sqrt(fan_in)``; ``HE_GAIN`` preserves activation
    variance through rectifier-like stacks."""
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 groups: int = 1, pad_mode: str = "reflect", bias: bool = True, gain: float = 1.0):
        self.stride, self.groups, self.pad_mode = stride, groups, pad_mode
        self.padding = k // 2
        fan_in = (cin // groups) * k * k
        self.weight = Parameter(_uniform(rng, (cout, cin // groups, k, k), fan_in, gain))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        mode = self.pad_mode
        if mode == "reflect" and self.padding >= min(x.shape[2], x.shape[3]):
            # a 1x1 map cannot be mirrored; zero padding is the only option there
            mode = "zero"
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, mode, self.groups)


class Dense(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator):
        self.weight = Parameter(_uniform(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout))

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class BatchNorm1d(Module):
    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))
        self.momentum, self.eps = momentum, eps
        self._buffers = {
            "running_mean": np.zeros(features, dtype=DEFAULT_DTYPE),
            "running_var": np.ones(features, dtype=DEFAULT_DTYPE),
        }

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm1d(x, self.gamma, self.beta, self._buffers["running_mean"],
                                self._buffers["running_var"], self.training, self.momentum, self.eps)


class MLPHead(Module):
    """Dense -> BatchNorm -> GELU -> Dense (projector / predictor)."""

    def __init__(self, fin: int, hidden: int, fout: int, rng: np.random.Generator):
        self.fc1 = Dense(fin, hidden, rng)
        self.bn = BatchNorm1d(hidden)
        self.fc2 = Dense(hidden, fout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.bn(self.fc1(x))))


class ConvNeXtBlock(Module):
    """7x7 depthwise conv -> 1x1 expand (4x) -> GELU -> 1x1 project.

    ``residual`` adds the block input back; no normalization layer.
    """

    def __init__(self, channels: int, rng: np.random.Generator, residual: bool = True):
        self.residual = residual
        self.dw = Conv2d(channels, channels, 7, rng, groups=channels)
        self.pw1 = Conv2d(channels, 4 * channels, 1, rng)
        self.pw2 = Conv2d(4 * channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.pw2(ops.gelu(self.pw1(self.dw(x))))
        return x + y if self.residual else y


def zero_module(m: Module) -> None:
    for p in m.parameters():
        p.data[...] = 0


def to_tensor(images: np.ndarray, dtype=DEFAULT_DTYPE) -> Tensor:
    """``(N,H,W,C)`` image stack -> NCHW tensor."""
    return Tensor(np.ascontiguousarray(np.asarray(images, dtype=dtype).transpose(0, 3, 1, 2)))


def to_images(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.data.transpose(0, 2, 3, 1))


def copy_module_values(dst: Module, src: Module) -> None:
    for (nd, pd), (ns, ps) in zip(dst.named_parameters(), src.named_parameters()):
        if pd.shape != ps.shape:
            raise ValueError(f"shape mismatch copying {ns} -> {nd}")
        pd.data[...] = ps.data
