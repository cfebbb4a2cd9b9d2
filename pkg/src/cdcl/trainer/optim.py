"""AdamW and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from ..nn import Parameter


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params: Mapping[str, Parameter], state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update.

    Moments are stored in float32 and the update is evaluated in float64
    from the stored values, so a run resumed from saved moments continues
    identically.
    """
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradError(f"no gradient for: {', '.join(missing[:5])}"
                               + (" ..." if len(missing) > 5 else ""))
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float32)
            state.v[name] = np.zeros(p.shape, dtype=np.float32)
        m, v = state.m[name], state.v[name]
        m[...] = b1 * m.astype(np.float64) + (1.0 - b1) * g
        v[...] = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
        mhat = m.astype(np.float64) / c1
        vhat = v.astype(np.float64) / c2
        theta = p.data.astype(np.float64)
        theta -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * theta)
        p.data[...] = theta


@dataclass(frozen=True)
class Schedule:
    """``step_decay``: ``start`` until ``boundary`` epochs, then ``end``.
    ``cosine``: ``start`` -> ``end`` over ``horizon`` steps."""
    kind: str
    start: float
    end: float
    horizon: int
    boundary: int = 0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.kind not in ("step_decay", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("schedule horizon must be positive")

    @classmethod
    def pretrain(cls, epochs: int = 100, steps_per_epoch: int = 1, boundary: int = 60,
                 start: float = 1e-3, end: float = 2e-4) -> "Schedule":
        return cls("step_decay", start, end, epochs * steps_per_epoch, boundary, steps_per_epoch)

    @classmethod
    def joint(cls, total_steps: int, start: float = 2e-4, end: float = 1e-6) -> "Schedule":
        return cls("cosine", start, end, total_steps)


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0 or step > schedule.horizon:
        raise ValueError(f"step {step} outside schedule horizon [0, {schedule.horizon}]")
    if schedule.kind == "step_decay":
        epoch = step // schedule.steps_per_epoch
        return schedule.start if epoch < schedule.boundary else schedule.end
    w = 0.5 * (1.0 + math.cos(math.pi * step / schedule.horizon))
    return schedule.start * w + schedule.end * (1.0 - w)
