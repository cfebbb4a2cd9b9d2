"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, no_grad


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               n_coords: int = 64, seed: int = 0, floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params`` on every call. Parameters
    are promoted to float64 for the duration of the check so both the
    forward pass and the difference quotient run in double precision; the
    caller is responsible for any non-parameter inputs of ``f`` being
    float64 as well. Up to ``n_coords`` coordinates are sampled per
    parameter (all of them when the parameter is smaller).
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside the supported range")
    rng = np.random.default_rng(seed)
    saved = [(p.data, p.requires_grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.requires_grad = True
            p.grad = None
        loss = f()
        backward(loss)
        analytic = [p.grad.copy() for p in params]

        worst = 0.0
        with no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                n = flat.size
                idx = rng.choice(n, size=min(n, n_coords), replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * eps)
                    ana = float(a.reshape(-1)[i])
                    if not (np.isfinite(num) and np.isfinite(ana)):
                        raise NonFiniteError("non-finite value during gradient check")
                    err = abs(num - ana) / max(abs(num), abs(ana), floor)
                    worst = max(worst, err)
        return worst
    finally:
        for p, (data, req) in zip(params, saved):
            p.data = data
            p.requires_grad = req
            p.grad = None
