import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cdcl import ops
from cdcl.tensor import Tensor

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def probe(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar loss ``sum(out * W)`` with a fixed random float64 weighting."""
    w = np.random.default_rng(seed + 1000).normal(size=out.shape)
    return ops.sum_all(ops.mul(out, Tensor(w.astype(out.dtype))))


def f64(rng, *shape, requires_grad=True) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_model_cfg(**kw):
    from cdcl.srnet import SRModelConfig
    base = dict(channels=8, n_dags=1, n_dadaus=1, scale=2, estimator_divisor=16)
    base.update(kw)
    return SRModelConfig(**base)


def tiny_train_cfg(**kw):
    from cdcl.trainer import TrainConfig
    base = dict(B=4, D=2, P=2, patch=32, scale=2, setting=1, pretrain_epochs=6, drop_epoch=3,
                joint_epochs=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_corpus(n=4, size=40, seed=0):
    from cdcl.corpus import synthetic_corpus
    return synthetic_corpus(n, size, seed)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
