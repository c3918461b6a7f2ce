"""
Composite objectives F(x) = f(x) + psi(x) for regularized linear classification.

The smooth part is an empirical risk with an l2 term,

    f(x) = (1/n) sum_i phi(b_i a_i^T x) + (mu/2) ||x||^2,

with phi the logistic or the squared hinge loss, and psi is either zero or an
l1 penalty. This module provides the exact and stochastic first-order oracles
of f, DropOut gradient perturbations, proximal operators of psi, and dataset
ingestion (libsvm text files) or generation (planted-hyperplane synthetic data).

All oracles are pure given an explicit numpy Generator; datasets are read-only.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit, log_expit
from sklearn.datasets import load_svmlight_file

logger = logging.getLogger(__name__)

ROW_NORM_TOL = 1e-9
MAX_BATCH = 1 << 20


class DatasetFormatError(ValueError):
    """A libsvm file could not be parsed; the message carries the line number."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=float).ravel()
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ValueError(f"features must be a non-empty n x p matrix, got shape {features.shape}")
        if labels.shape[0] != features.shape[0]:
            raise ValueError(f"expected {features.shape[0]} labels, got {labels.shape[0]}")
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ValueError("labels must all be +1 or -1")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        norms = np.linalg.norm(features, axis=1)
        if np.any(norms > 1.0 + ROW_NORM_TOL):
            raise ValueError(f"rows must have l2 norm <= 1, max is {norms.max():.6g}")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]


class LossKind(Enum):
    LOGISTIC = 'logistic'
    SQUARED_HINGE = 'sqhinge'

    @property
    def smoothness(self):
        """Lipschitz constant of phi' (valid for unit-norm rows)."""
        return 0.25 if self is LossKind.LOGISTIC else 1.0


@dataclass(frozen=True)
class Regularizer:
    """psi(x) = lam * ||x||_1; lam = 0 is the 'none' regularizer."""

    lam: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ValueError(f"l1 weight must be nonnegative, got {self.lam}")

    @classmethod
    def none(cls):
        return cls(0.0)

    @classmethod
    def l1(cls, lam):
        return cls(float(lam))

    @property
    def is_none(self):
        return self.lam == 0.0

    @property
    def tag(self):
        return 'none' if self.is_none else f'l1:{self.lam:g}'

    def value(self, x):
        if self.is_none:
            return 0.0
        return self.lam * float(np.abs(x).sum())


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    dataset: Dataset
    loss: LossKind = LossKind.LOGISTIC
    mu: float = 0.0
    reg: Regularizer = field(default_factory=Regularizer)

    def __post_init__(self):
        if not self.mu >= 0.0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")

    @property
    def L(self):
        return self.loss.smoothness

    @property
    def smoothness(self):
        """Lipschitz constant of grad f."""
        return self.L + self.mu

    @property
    def n(self):
        return self.dataset.n

    @property
    def p(self):
        return self.dataset.p


@dataclass(frozen=True)
class PerturbationSpec:
    dropout_delta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_delta < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {self.dropout_delta}")

    @property
    def is_identity(self):
        return self.dropout_delta == 0.0


@dataclass(frozen=True, eq=False)
class GradientSample:
    g: np.ndarray
    batch_size: int
    index_set: np.ndarray


def _as_output(values, like):
    return float(values) if np.ndim(like) == 0 else values


def loss_value(u, kind):
    """phi(u); the logistic branch uses log_expit so |u| up to 1e3 is safe."""
    u = np.asarray(u, dtype=float)
    if kind is LossKind.LOGISTIC:
        values = -log_expit(u)
    else:
        values = 0.5 * np.maximum(0.0, 1.0 - u) ** 2
    return _as_output(values, u)


def loss_grad(u, kind):
    """phi'(u)."""
    u = np.asarray(u, dtype=float)
    if kind is LossKind.LOGISTIC:
        values = -expit(-u)
    else:
        values = -np.maximum(0.0, 1.0 - u)
    return _as_output(values, u)


def loss_hess(u, kind):
    """phi''(u) (generalized second derivative for the squared hinge)."""
    u = np.asarray(u, dtype=float)
    if kind is LossKind.LOGISTIC:
        values = expit(u) * expit(-u)
    else:
        values = (u < 1.0).astype(float)
    return _as_output(values, u)


def check_dim(spec, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.p,):
        raise ValueError(f"dimension mismatch: expected a vector of length {spec.p}, got shape {x.shape}")
    return x


def margins(spec, x, indices=None):
    data = spec.dataset
    if indices is None:
        return data.labels * (data.features @ x)
    return data.labels[indices] * (data.features[indices] @ x)


def smooth_value(spec, x):
    """f(x) = mean loss + (mu/2)||x||^2."""
    x = check_dim(spec, x)
    risk = float(np.mean(loss_value(margins(spec, x), spec.loss)))
    return risk + 0.5 * spec.mu * float(x @ x)


def full_objective(spec, x):
    """F(x) = f(x) + psi(x)."""
    x = check_dim(spec, x)
    return smooth_value(spec, x) + spec.reg.value(x)


def full_gradient(spec, x):
    """Exact grad f(x); no sampling, no perturbation."""
    x = check_dim(spec, x)
    data = spec.dataset
    weights = loss_grad(margins(spec, x), spec.loss) * data.labels
    return data.features.T @ weights / data.n + spec.mu * x


def per_example_gradients(spec, x, indices):
    """Rows phi'(b_i a_i^T x) b_i a_i for the given indices (loss part only)."""
    data = spec.dataset
    indices = np.asarray(indices)
    weights = loss_grad(margins(spec, x, indices), spec.loss) * data.labels[indices]
    return weights[..., None] * data.features[indices]


def hessian(spec, x):
    x = check_dim(spec, x)
    data = spec.dataset
    curvature = loss_hess(margins(spec, x), spec.loss)
    scaled = data.features * curvature[:, None]
    return data.features.T @ scaled / data.n + spec.mu * np.eye(data.p)


def dropout_perturb(g, delta, rng):
    """
    DropOut perturbation: each coordinate is zeroed with probability delta and
    otherwise scaled by 1/(1 - delta), so that E[output] = g.

    Works on arrays of any shape; every entry is perturbed independently.
    """
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"dropout must be in [0,1), got {delta}")
    g = np.asarray(g, dtype=float)
    if delta == 0.0:
        return g.copy()
    keep = rng.random(g.shape) >= delta
    return np.where(keep, g / (1.0 - delta), 0.0)


def sample_gradient(spec, x, batch, perturb, rng, indices=None):
    """
    Unbiased mini-batch estimate of grad f(x).

    Indices are drawn uniformly with replacement unless given. Each per-example
    loss gradient is perturbed before averaging, then mu*x is added unperturbed.
    """
    x = check_dim(spec, x)
    if indices is None:
        if batch < 1 or batch > MAX_BATCH:
            raise ValueError(f"batch must be in [1, {MAX_BATCH}], got {batch}")
        indices = rng.integers(0, spec.n, size=batch)
    indices = np.asarray(indices)
    grads = per_example_gradients(spec, x, indices)
    if not perturb.is_identity:
        grads = dropout_perturb(grads, perturb.dropout_delta, rng)
    g = grads.mean(axis=0) + spec.mu * x
    return GradientSample(g=g, batch_size=len(indices), index_set=indices)


def prox(reg, v, step):
    """argmin_x 1/2 ||v - x||^2 + step * psi(x) (soft-thresholding for l1)."""
    if not step > 0.0:
        raise ValueError(f"prox step must be positive, got {step}")
    v = np.asarray(v, dtype=float)
    if reg.is_none:
        return v.copy()
    threshold = step * reg.lam
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def estimate_sigma2(spec, x, perturb, rng, n_samples=10_000, batch=1, chunk=10_000):
    """
    Empirical variance E||g - grad f(x)||^2 of sample_gradient at x.

    Used as the variance bound sigma^2 of the solver contracts, measured at a
    reference point (typically the estimated minimizer).
    """
    x = check_dim(spec, x)
    mean = full_gradient(spec, x) - spec.mu * x
    total = 0.0
    remaining = n_samples
    while remaining > 0:
        size = min(chunk, remaining)
        indices = rng.integers(0, spec.n, size=(size, batch))
        grads = per_example_gradients(spec, x, indices)
        if not perturb.is_identity:
            grads = dropout_perturb(grads, perturb.dropout_delta, rng)
        deviations = grads.mean(axis=1) - mean
        total += float(np.sum(deviations * deviations))
        remaining -= size
    return total / n_samples


def dropout_variance(spec, x, delta):
    """Perturbation-only variance (delta/(1-delta)) * mean_i ||grad phi_i(x)||^2."""
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"dropout must be in [0,1), got {delta}")
    grads = per_example_gradients(spec, x, np.arange(spec.n))
    return delta / (1.0 - delta) * float(np.mean(np.sum(grads * grads, axis=1)))


def normalize_rows(features):
    features = np.array(features, dtype=float)
    norms = np.linalg.norm(features, axis=1)
    nonzero = norms > 0
    features[nonzero] /= norms[nonzero, None]
    return features


def _example_lines(path):
    """(line number, tokens) of every line holding an example, comments removed."""
    with open(path, 'r') as handle:
        for lineno, line in enumerate(handle, start=1):
            tokens = line.split('#', 1)[0].split()
            if tokens:
                yield lineno, tokens


def _bad_line(path):
    """Line number of the first example the libsvm grammar rejects, or None."""
    for lineno, tokens in _example_lines(path):
        try:
            float(tokens[0])
            previous = 0
            for token in tokens[1:]:
                index, value = token.split(':', 1)
                index = int(index)
                if index <= previous or not math.isfinite(float(value)):
                    return lineno
                previous = index
        except ValueError:
            return lineno
    return None


def _line_of_example(path, row):
    for i, (lineno, _) in enumerate(_example_lines(path)):
        if i == row:
            return lineno
    return None


def load_libsvm(path, n_features=None):
    """
    Read a binary libsvm file ('label idx:val ...', 1-based indices) into a
    Dataset with unit-norm rows.

    Args:
        path: File to read
        n_features: Dimension p; inferred from the largest index when None

    Raises:
        DatasetFormatError: On a malformed line, an unknown label value or a
            non-finite feature, with the line number when one applies
    """
    try:
        X, y = load_svmlight_file(str(path), n_features=n_features, dtype=np.float64, zero_based=False)
    except ValueError as e:
        lineno = _bad_line(path)
        if lineno is None:
            raise DatasetFormatError(f"{path}: {e}") from e
        raise DatasetFormatError(f"line {lineno}: {e}") from e

    if X.shape[0] == 0:
        raise DatasetFormatError(f"{path}: no examples found")

    unknown = ~np.isin(y, (-1.0, 1.0))
    if unknown.any():
        row = int(np.argmax(unknown))
        raise DatasetFormatError(f"line {_line_of_example(path, row)}: unknown label value {y[row]:g}")

    finite = np.isfinite(X.data)
    if not finite.all():
        row = int(np.searchsorted(X.indptr, np.argmin(finite), side='right')) - 1
        raise DatasetFormatError(f"line {_line_of_example(path, row)}: non-finite feature value")

    features = X.toarray()
    if features.shape[1] == 0:
        features = np.zeros((features.shape[0], 1))
    labels = np.asarray(y, dtype=float)
    logger.info(f"Loaded {features.shape[0]} examples in dimension {features.shape[1]} from {path} "
                f"({int((labels > 0).sum())} positive, {int((labels < 0).sum())} negative)")
    return Dataset(normalize_rows(features), labels)


def synth_generate(n, p, seed, separability=0.9):
    """
    Gaussian features labelled by a planted hyperplane, with a fraction
    (1 - separability)/2 of labels flipped (5% at the default).
    """
    if n < 1 or p < 1:
        raise ValueError(f"n and p must be positive, got n={n}, p={p}")
    if not 0.0 <= separability <= 1.0:
        raise ValueError(f"separability must be in [0,1], got {separability}")
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, p))
    direction = rng.standard_normal(p)
    labels = np.where(features @ direction >= 0.0, 1.0, -1.0)
    flips = rng.random(n) < 0.5 * (1.0 - separability)
    labels[flips] *= -1.0
    logger.debug(f"Generated synthetic dataset n={n}, p={p}, seed={seed}, flipped={int(flips.sum())}")
    return Dataset(normalize_rows(features), labels)
