"""Two-stage training: contrastive pretraining, then joint L1 + contrastive."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..cdidm import contrastive_loss, momentum_update
from ..degradation import DegradationSetting
from ..nn import to_tensor
from ..ops import l1_loss
from ..sampler import PatchMatrix, make_batch
from ..srnet import SRModel, SRModelConfig
from ..tensor import backward
from .checkpoint import Checkpoint
from .optim import OptimState, Schedule, adamw_step, lr_at

log = logging.getLogger(__name__)

STAGES = {"pretrain": 1, "joint": 2}
TRACE_FIELDS = ("step", "lr", "l_contr", "l_l1", "total")


@dataclass
class TrainConfig:
    B: int = 64
    D: int = 4
    P: int = 2
    patch: int = 64
    scale: int = 4
    setting: int = 1
    widths: Tuple[float, ...] = ()
    pretrain_epochs: int = 100
    joint_epochs: int = 600
    steps_per_epoch: int = 1
    drop_epoch: int = 60
    pretrain_lr: float = 1e-3
    pretrain_lr_end: float = 2e-4
    joint_lr: float = 2e-4
    joint_lr_end: float = 1e-6
    tau: float = 0.07
    alpha: float = 0.001
    weight_decay: float = 0.0
    seed: int = 0
    augment: bool = True
    downsampler: str = "bicubic"

    def __post_init__(self):
        self.widths = tuple(float(w) for w in self.widths)
        if not 2 <= self.D <= self.B:
            raise ValueError(f"need 2 <= D <= B, got D={self.D}, B={self.B}")
        if self.patch % self.scale:
            raise ValueError(f"patch {self.patch} not divisible by scale {self.scale}")
        if (self.patch // self.scale) % (4 * self.P):
            raise ValueError(f"LR patch {self.patch // self.scale} not divisible by 4*P={4 * self.P}")
        if self.setting not in (0, 1, 2, 3):
            raise ValueError(f"unknown degradation setting {self.setting}")
        if self.setting == 0 and not self.widths:
            raise ValueError("setting 0 needs an explicit list of widths")
        if self.tau <= 0 or not 0 <= self.alpha <= 1:
            raise ValueError("tau must be positive and alpha in [0, 1]")

    def degradation_setting(self) -> DegradationSetting:
        if self.setting == 0:
            return DegradationSetting.fixed_widths(self.widths)
        return DegradationSetting.from_preset(self.setting)

    @property
    def pretrain_steps(self) -> int:
        return self.pretrain_epochs * self.steps_per_epoch

    @property
    def joint_steps(self) -> int:
        return self.joint_epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Trainer:
    """Owns the model, optimizer state, counters and loss trace of one run.

    Every batch is synthesized from a generator seeded by ``(seed, stage,
    step)``, so a run restored from a checkpoint replays the same batches.
    """

    def __init__(self, model_cfg: SRModelConfig, cfg: TrainConfig, corpus: Sequence[np.ndarray],
                 model: Optional[SRModel] = None):
        if not corpus:
            raise ValueError("training corpus is empty")
        if model_cfg.scale != cfg.scale:
            raise ValueError(f"model scale {model_cfg.scale} != training scale {cfg.scale}")
        self.model_cfg, self.cfg, self.corpus = model_cfg, cfg, list(corpus)
        self.model = model if model is not None else SRModel(model_cfg, np.random.default_rng(cfg.seed))
        self.setting = cfg.degradation_setting()
        self.stage = "pretrain"
        self.step = 0
        self.optim = OptimState(weight_decay=cfg.weight_decay)
        self.trace: List[dict] = []

    # -- batches / schedules ------------------------------------------------
    def batch(self, stage: str, step: int) -> PatchMatrix:
        c = self.cfg
        rng = np.random.default_rng([c.seed, STAGES[stage], step])
        return make_batch(self.corpus, c.B, c.D, c.patch, self.setting, c.scale, rng,
                          c.augment, c.downsampler)

    def schedule(self, stage: str) -> Schedule:
        c = self.cfg
        if stage == "pretrain":
            return Schedule.pretrain(c.pretrain_epochs, c.steps_per_epoch, c.drop_epoch,
                                     c.pretrain_lr, c.pretrain_lr_end)
        return Schedule.joint(c.joint_steps, c.joint_lr, c.joint_lr_end)

    def _params(self, stage: str) -> Dict[str, object]:
        named = dict(self.model.named_parameters())
        if stage == "pretrain":
            keep = set(map(id, self.model.branches.leader_parameters()))
            return {n: p for n, p in named.items() if id(p) in keep}
        return {n: p for n, p in named.items() if p.trainable}

    # -- steps ----------------------------------------------------------------
    def train_step(self) -> dict:
        stage, step, c = self.stage, self.step, self.cfg
        lr = lr_at(self.schedule(stage), step)
        self.model.train()
        batch = self.batch(stage, step)
        pos = batch.positive_sets()
        branches = self.model.branches
        O = branches.leader_forward(pos, c.P)
        T = branches.auxiliary_forward(pos)
        l_contr = contrastive_loss(O, T, c.tau)
        if stage == "joint":
            hr, lr_img = batch.sr_pairs()
            l_l1 = l1_loss(self.model(to_tensor(lr_img)), to_tensor(hr))
            total = l_l1 + l_contr
            l1_value = float(l_l1.data)
        else:
            total = l_contr
            l1_value = 0.0
        params = self._params(stage)
        self.model.zero_grad()
        backward(total)
        adamw_step(params, self.optim, lr)
        self.model.zero_grad()
        momentum_update(branches, c.alpha)
        row = {"step": step, "lr": lr, "l_contr": float(l_contr.data), "l_l1": l1_value,
               "total": float(total.data)}
        self.trace.append(row)
        self.step += 1
        return row

    def run(self, n_steps: Optional[int] = None, callback: Optional[Callable[[dict], None]] = None) -> List[dict]:
        """Advance the current stage by ``n_steps`` (default: to its end)."""
        end = self.schedule(self.stage).horizon
        target = end if n_steps is None else min(end, self.step + n_steps)
        rows = []
        while self.step < target:
            row = self.train_step()
            rows.append(row)
            if callback is not None:
                callback(row)
            if row["step"] % 50 == 0:
                log.info("%s step %d lr %.3g total %.5f", self.stage, row["step"], row["lr"], row["total"])
        return rows

    def start_joint(self) -> None:
        """Switch to the joint stage with a fresh optimizer."""
        self.stage = "joint"
        self.step = 0
        self.optim = OptimState(weight_decay=self.cfg.weight_decay)

    # -- persistence --------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for name, m in self.optim.m.items():
            tensors[f"optim.m.{name}"] = m
            tensors[f"optim.v.{name}"] = self.optim.v[name]
        return Checkpoint(
            tensors=tensors,
            config={"model": self.model_cfg.to_dict(), "train": self.cfg.to_dict()},
            rng={"scheme": "seedsequence(seed, stage, step)", "seed": self.cfg.seed,
                 "stage_id": STAGES[self.stage]},
            counters={"stage": self.stage, "step": self.step,
                      "epoch": self.step // self.cfg.steps_per_epoch},
            optim=self.optim.hyper(),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, corpus: Sequence[np.ndarray],
                        cfg: Optional[TrainConfig] = None) -> "Trainer":
        model_cfg = SRModelConfig.from_dict(ckpt.config["model"])
        cfg = cfg or TrainConfig.from_dict(ckpt.config["train"])
        tr = cls(model_cfg, cfg, corpus)
        load_model_state(tr.model, ckpt)
        tr.stage = ckpt.counters.get("stage", "pretrain")
        tr.step = int(ckpt.counters.get("step", 0))
        o = ckpt.optim
        tr.optim = OptimState(o.get("beta1", 0.9), o.get("beta2", 0.999), o.get("eps", 1e-8),
                              o.get("weight_decay", 0.0), int(o.get("step", 0)))
        for key, arr in ckpt.tensors.items():
            if key.startswith("optim.m."):
                tr.optim.m[key[len("optim.m."):]] = arr.copy()
            elif key.startswith("optim.v."):
                tr.optim.v[key[len("optim.v."):]] = arr.copy()
        return tr


def load_model_state(model: SRModel, ckpt: Checkpoint, strict: bool = True) -> None:
    state = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=strict)


def model_from_checkpoint(ckpt: Checkpoint) -> SRModel:
    cfg = SRModelConfig.from_dict(ckpt.config["model"])
    model = SRModel(cfg, np.random.default_rng(0))
    load_model_state(model, ckpt)
    return model


def pretrain(model_cfg: SRModelConfig, cfg: TrainConfig, corpus: Sequence[np.ndarray],
             callback=None) -> Tuple[Checkpoint, List[dict]]:
    """Contrastive pretraining of the estimator for ``cfg.pretrain_steps`` steps."""
    tr = Trainer(model_cfg, cfg, corpus)
    tr.run(callback=callback)
    return tr.checkpoint(), tr.trace


def joint_train(cfg: TrainConfig, pretrained: Checkpoint, corpus: Sequence[np.ndarray],
                callback=None) -> Tuple[Checkpoint, List[dict]]:
    """Joint L1 + contrastive training starting from a pretrained checkpoint."""
    model_cfg = SRModelConfig.from_dict(pretrained.config["model"])
    if model_cfg.scale != cfg.scale:
        raise ValueError(f"checkpoint scale {model_cfg.scale} != requested scale {cfg.scale}")
    tr = Trainer(model_cfg, cfg, corpus)
    load_model_state(tr.model, pretrained)
    tr.start_joint()
    tr.run(callback=callback)
    return tr.checkpoint(), tr.trace


def write_trace(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in TRACE_FIELDS})
