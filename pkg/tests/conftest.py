from pathlib import Path

import numpy as np
import pytest

from dropnet.gradcheck import numerical_grad, relative_error
from dropnet.tensor import Tensor, backward

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def grad_error(build, *params: Tensor) -> float:
    """Worst relative error between backward() and central differences."""
    for p in params:
        p.zero_grad()
    backward(build())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n, noise = numerical_grad(lambda: build().item(), p, with_noise=True)
        worst = max(worst, float(relative_error(a, n, noise=noise).max()))
    return worst
