"""Degradation-adapting SR network: regulator, DaDAU/DAG/DaIDAM and upscaler."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import ops
from .cdidm import BranchPair, EstimatorConfig
from .nn import Conv2d, ConvNeXtBlock, Dense, Module, ModuleList, to_images, to_tensor
from .tensor import Tensor, no_grad

SPATIAL_CHANNELS = 16


@dataclass
class SRModelConfig:
    channels: int = 64
    n_dags: int = 6
    n_dadaus: int = 6
    scale: int = 4
    spatial_branch_on: bool = True
    channel_branch_on: bool = True
    fc_shared: bool = True
    channel_uses_lr: bool = True
    spatial_uses_lr: bool = False
    sigmoid_over_sum: bool = False
    P: int = 2
    D: int = 4
    estimator_divisor: int = 1
    head_hidden_ratio: int = 2

    def __post_init__(self):
        if not (self.spatial_branch_on or self.channel_branch_on):
            raise ValueError("at least one of the spatial/channel branches must be enabled")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {self.scale}")
        if self.channels % 4:
            raise ValueError("channels must be divisible by 4 (channel FC bottleneck)")
        if self.estimator_config().embed_dim % 16:
            raise ValueError("estimator embedding dim must be divisible by 16 (pixel shuffle x4)")

    @classmethod
    def small(cls, **kw) -> "SRModelConfig":
        return cls(channels=64, n_dags=6, n_dadaus=6, **kw)

    @classmethod
    def large(cls, **kw) -> "SRModelConfig":
        return cls(channels=96, n_dags=8, n_dadaus=6, **kw)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig.reduced(self.estimator_divisor) if self.estimator_divisor != 1 else EstimatorConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SRModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class RegulatorOutput(NamedTuple):
    d_channel: Tensor   # (N, C, 1, 1)
    d_spatial: Tensor   # (N, 16, H, W)


class Regulator(Module):
    """Channel path: GAP -> dense -> GELU. Spatial path: shuffle x4 -> conv -> GELU -> conv."""

    def __init__(self, embed_dim: int, out_channels: int, rng: np.random.Generator):
        self.fc = Dense(embed_dim, out_channels, rng)
        self.conv1 = Conv2d(embed_dim // 16, SPATIAL_CHANNELS, 3, rng)
        self.conv2 = Conv2d(SPATIAL_CHANNELS, SPATIAL_CHANNELS, 3, rng)

    def forward(self, R: Tensor) -> RegulatorOutput:
        N = R.shape[0]
        c = ops.gelu(self.fc(ops.flatten(ops.global_avg_pool(R))))
        d_channel = c.reshape(N, c.shape[1], 1, 1)
        s = ops.pixel_shuffle(R, 4)
        d_spatial = self.conv2(ops.gelu(self.conv1(s)))
        return RegulatorOutput(d_channel, d_spatial)


class ChannelFC(Module):
    def __init__(self, C: int, rng: np.random.Generator):
        self.fc1 = Dense(C, C // 4, rng)
        self.fc2 = Dense(C // 4, C, rng)

    def forward(self, v: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(v)))


class DaDAU(Module):
    """Spatial gate, channel gate (with LR features), ConvNeXt fusion, residual."""

    def __init__(self, cfg: SRModelConfig, rng: np.random.Generator):
        C = cfg.channels
        self.cfg = cfg
        if cfg.spatial_branch_on:
            self.sp_conv1 = Conv2d(SPATIAL_CHANNELS, C, 3, rng)
            self.sp_conv2 = Conv2d(C, C, 3, rng)
            if cfg.spatial_uses_lr:
                self.sp_lr_conv = Conv2d(C, C, 3, rng)
        if cfg.channel_branch_on:
            self.fc_deg = ChannelFC(C, rng)
            if cfg.channel_uses_lr and not cfg.fc_shared:
                self.fc_lr = ChannelFC(C, rng)
            self.ch_dwconv = Conv2d(C, C, 3, rng, groups=C)
        # Eq. 6 supplies the residual around the fusion block
        self.fusion = ConvNeXtBlock(C, rng, residual=False)

    def spatial_gate(self, F: Tensor, reg: RegulatorOutput) -> Tensor:
        h = self.sp_conv1(reg.d_spatial)
        if self.cfg.spatial_uses_lr:
            h = h + self.sp_lr_conv(F)
        return ops.sigmoid(self.sp_conv2(ops.gelu(h)))

    def channel_gate(self, F: Tensor, reg: RegulatorOutput) -> Tensor:
        N, C = F.shape[:2]
        g = self.fc_deg(ops.flatten(reg.d_channel))
        if not self.cfg.sigmoid_over_sum:
            g = ops.sigmoid(g)
        if self.cfg.channel_uses_lr:
            fc = self.fc_deg if self.cfg.fc_shared else self.fc_lr
            g = g + fc(ops.flatten(ops.global_avg_pool(F)))
        if self.cfg.sigmoid_over_sum:
            g = ops.sigmoid(g)
        return g.reshape(N, C, 1, 1)

    def forward(self, F: Tensor, reg: RegulatorOutput) -> Tensor:
        fused = None
        if self.cfg.spatial_branch_on:
            fused = ops.mul(self.spatial_gate(F, reg), F)
        if self.cfg.channel_branch_on:
            fc = self.ch_dwconv(ops.mul(F, self.channel_gate(F, reg)))
            fused = fc if fused is None else fused + fc
        return self.fusion(fused) + F


class DAG(Module):
    def __init__(self, cfg: SRModelConfig, rng: np.random.Generator):
        self.units = ModuleList(DaDAU(cfg, rng) for _ in range(cfg.n_dadaus))
        self.block = ConvNeXtBlock(cfg.channels, rng)
        self.conv = Conv2d(cfg.channels, cfg.channels, 3, rng)

    def forward(self, F: Tensor, reg: RegulatorOutput) -> Tensor:
        x = F
        for u in self.units:
            x = u(x, reg)
        return self.conv(self.block(x)) + F


class DaIDAM(Module):
    def __init__(self, cfg: SRModelConfig, rng: np.random.Generator):
        self.groups = ModuleList(DAG(cfg, rng) for _ in range(cfg.n_dags))
        self.conv = Conv2d(cfg.channels, cfg.channels, 3, rng)

    def forward(self, F: Tensor, reg: RegulatorOutput) -> Tensor:
        x = F
        for g in self.groups:
            x = g(x, reg)
        return self.conv(x) + F


class Upscaler(Module):
    def __init__(self, C: int, scale: int, rng: np.random.Generator):
        if scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {scale}")
        self.scale = scale
        if scale == 3:
            self.stages = ModuleList([Conv2d(C, 9 * C, 3, rng)])
            self.r = 3
        else:
            self.stages = ModuleList(Conv2d(C, 4 * C, 3, rng) for _ in range(scale // 2))
            self.r = 2
        self.tail = Conv2d(C, 3, 3, rng)

    def forward(self, F: Tensor) -> Tensor:
        x = F
        for conv in self.stages:
            x = ops.pixel_shuffle(conv(x), self.r)
        return self.tail(x)


class SRModel(Module):
    """Feature extractor, branch pair (its leader estimator feeds the regulator),
    regulator, DaIDAM and upscaler."""

    def __init__(self, cfg: SRModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        est = cfg.estimator_config()
        self.head = Conv2d(3, cfg.channels, 3, rng)
        self.branches = BranchPair(est, rng, cfg.head_hidden_ratio)
        self.regulator = Regulator(est.embed_dim, cfg.channels, rng)
        self.body = DaIDAM(cfg, rng)
        self.upscaler = Upscaler(cfg.channels, cfg.scale, rng)

    @property
    def estimator(self):
        return self.branches.leader_estimator

    def sr_parameters(self):
        """Everything trained by the L1 loss except the contrastive heads."""
        return (self.head.parameters() + self.estimator.parameters() + self.regulator.parameters()
                + self.body.parameters() + self.upscaler.parameters())

    def forward(self, x: Tensor) -> Tensor:
        """NCHW LR tensor (dims divisible by 4) -> unclamped NCHW SR tensor."""
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"LR dims {x.shape[2]}x{x.shape[3]} not divisible by 4")
        reg = self.regulator(self.estimator(x))
        feats = self.body(self.head(x), reg)
        return self.upscaler(feats)


def sr_forward(lr: np.ndarray, model: SRModel) -> np.ndarray:
    """Super-resolve one ``(H, W, 3)`` image, clamped to [0, 1].

    Inputs whose dims are not multiples of 4 are edge-padded and the output
    cropped back to ``scale * (H, W)``.
    """
    lr = np.asarray(lr, dtype=np.float32)
    h, w = lr.shape[:2]
    ph, pw = -h % 4, -w % 4
    x = np.pad(lr, ((0, ph), (0, pw), (0, 0)), mode="edge") if ph or pw else lr
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = to_images(model(to_tensor(x[None])))[0]
    finally:
        model.train(was_training)
    s = model.cfg.scale
    return np.clip(out[:h * s, :w * s], 0.0, 1.0)


class BicubicModel:
    """Baseline 'model' that bicubic-upsamples the LR input."""

    def __init__(self, scale: int):
        self.scale = scale

    def num_parameters(self) -> int:
        return 0

    def super_resolve(self, lr: np.ndarray) -> np.ndarray:
        from .imaging import bicubic_resize
        return bicubic_resize(lr, self.scale)
