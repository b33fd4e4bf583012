import numpy as np
import pytest

from rwsaunet import tensor as tn


@pytest.fixture
def f64():
    with tn.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_grad_error(fn, params, seed=0, eps=1e-6):
    """Worst relative error of d/dp sum(W * fn()) against central differences."""
    out = fn()
    w = np.random.default_rng(seed).normal(size=out.shape)
    for p in params:
        p.grad = None
    tn.backward((fn() * tn.Tensor(w)).sum())
    worst = 0.0
    for p in params:
        num = tn.numerical_grad(lambda: float((fn().data * w).sum()), p.data, eps)
        worst = max(worst, tn.rel_error(p.grad, num))
    return worst
