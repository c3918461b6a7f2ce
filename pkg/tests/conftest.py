import numpy as np
import pytest

from catalyst_bench.problem import Dataset, LossKind, ProblemSpec, Regularizer, synth_generate


def make_spec(n=50, p=5, seed=0, loss=LossKind.LOGISTIC, mu=None, mu_frac=10.0, reg=None, separability=0.9):
    """Synthetic problem; mu defaults to 1/(mu_frac * n)."""
    dataset = synth_generate(n, p, seed=seed, separability=separability)
    if mu is None:
        mu = 1.0 / (mu_frac * n)
    return ProblemSpec(dataset=dataset, loss=loss, mu=mu, reg=reg or Regularizer.none())


def one_point_spec(mu=0.5, reg=None):
    """n = 1, a = (1,), b = +1 with the squared hinge: a quadratic for x < 1."""
    dataset = Dataset(np.array([[1.0]]), np.array([1.0]))
    return ProblemSpec(dataset=dataset, loss=LossKind.SQUARED_HINGE, mu=mu, reg=reg or Regularizer.none())


@pytest.fixture
def spec_factory():
    return make_spec


@pytest.fixture
def small_spec():
    return make_spec(n=50, p=5, seed=1, mu=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
