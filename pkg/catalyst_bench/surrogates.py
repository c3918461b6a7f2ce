"""
Surrogate functions for the outer acceleration loop.

Two representations are used:

- AuxObjective: the proximal-point surrogate H(x) = F(x) + (kappa/2)||x - y||^2,
  which has no closed-form minimizer and is handed to an inner solver.
- QuadraticModel: a strongly convex quadratic (plus psi) with a closed-form
  minimizer. Gradient-type surrogates and the models returned by inner solvers
  both take this form. Constant offsets are never stored since only the
  minimizer and the curvature drive the outer update.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .problem import (
    Regularizer,
    check_dim,
    full_gradient,
    full_objective,
    per_example_gradients,
    prox,
    sample_gradient,
    smooth_value,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class QuadraticModel:
    center: np.ndarray
    curvature: float
    reg: Regularizer
    anchor: np.ndarray

    def __post_init__(self):
        if not self.curvature > 0.0:
            raise ValueError(f"model curvature must be positive, got {self.curvature}")

    def minimizer(self):
        return prox(self.reg, self.center, 1.0 / self.curvature)

    def value(self, x):
        """Model value up to its constant offset."""
        diff = np.asarray(x) - self.center
        return 0.5 * self.curvature * float(diff @ diff) + self.reg.value(x)


class AuxObjective:
    """
    H(x) = F(x) + (kappa/2) ||x - y||^2 around the prox center y.

    Oracles delegate to the base problem and add the quadratic term. kappa = 0
    is allowed here so the inner solvers can also minimize F itself (see
    plain_objective); build_aux is the checked constructor for surrogates.
    """

    def __init__(self, base, kappa, prox_center):
        self.base = base
        self.kappa = float(kappa)
        self.prox_center = np.array(prox_center, dtype=float)
        self.prox_center.setflags(write=False)

    @property
    def reg(self):
        return self.base.reg

    @property
    def n(self):
        return self.base.n

    @property
    def p(self):
        return self.base.p

    @property
    def smoothness(self):
        return self.base.smoothness + self.kappa

    @property
    def strong_convexity(self):
        return self.base.mu + self.kappa

    def _proximity(self, x):
        diff = x - self.prox_center
        return 0.5 * self.kappa * float(diff @ diff)

    def value(self, x):
        return full_objective(self.base, x) + self._proximity(x)

    def smooth_value(self, x):
        return smooth_value(self.base, x) + self._proximity(x)

    def smooth_gradient(self, x):
        return full_gradient(self.base, x) + self.kappa * (x - self.prox_center)

    def shift(self, x):
        """Non-loss part of the smooth gradient: mu x + kappa (x - y)."""
        return self.base.mu * x + self.kappa * (x - self.prox_center)

    def loss_gradients(self, x, indices):
        return per_example_gradients(self.base, x, indices)

    def sample_gradient(self, x, batch, perturb, rng, indices=None):
        sample = sample_gradient(self.base, x, batch, perturb, rng, indices=indices)
        return sample.g + self.kappa * (x - self.prox_center), sample.batch_size

    def prox_step(self, z, g, step):
        return prox(self.reg, z - step * g, step)


def build_aux(spec, kappa, y):
    if not kappa > 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    y = check_dim(spec, y)
    return AuxObjective(spec, kappa, y)


def plain_objective(spec):
    """F itself, seen as an auxiliary objective with kappa = 0."""
    return AuxObjective(spec, 0.0, np.zeros(spec.p))


def optimality_certificate(H, z_prev, z_next, step, grad_prev, grad_next):
    """
    Upper bound on H(z_next) - H* after the prox step z_prev -> z_next.

    v = (z_prev - z_next)/step + grad_next - grad_prev lies in the subdifferential
    of H at z_next, so H(z_next) - H* <= ||v||^2 / (2 (mu + kappa)). Without strong
    convexity the gradient-mapping norm ||v|| is returned instead.
    """
    v = (z_prev - z_next) / step + grad_next - grad_prev
    norm2 = float(v @ v)
    if H.strong_convexity > 0.0:
        return norm2 / (2.0 * H.strong_convexity)
    return float(np.sqrt(norm2))


def gradient_model(g, y, curvature, reg):
    """h(x) = f(y) + g^T (x - y) + (curvature/2)||x - y||^2 + psi(x), offset dropped."""
    y = np.asarray(y, dtype=float)
    return QuadraticModel(center=y - np.asarray(g) / curvature, curvature=float(curvature), reg=reg, anchor=y)


def gradient_model_value(spec, y, g, curvature, x):
    """Full value of a gradient-type surrogate at x, offset included."""
    diff = np.asarray(x) - y
    return (smooth_value(spec, y) + float(np.asarray(g) @ diff)
            + 0.5 * curvature * float(diff @ diff) + spec.reg.value(x))


def grad_model_min(spec, y, L_eff):
    """Prox_{psi/L_eff}[y - grad f(y)/L_eff]: minimizer of the exact-gradient model."""
    y = check_dim(spec, y)
    return gradient_model(full_gradient(spec, y), y, L_eff, spec.reg).minimizer()


def stoch_grad_model_min(g_k, y, kappa, mu, reg, L=None):
    """
    Stochastic-gradient model around y with curvature kappa + mu.

    Its minimizer is both x_k and x_k*; the model meets the approximation
    condition with delta_k = sigma^2 / (kappa + mu). Pass L to have the
    requirement kappa >= L - mu checked.
    """
    if L is not None and kappa < L - mu:
        raise ValueError(f"stochastic gradient model needs kappa >= L - mu, got kappa={kappa}, L={L}, mu={mu}")
    return gradient_model(g_k, y, kappa + mu, reg)


def solver_model(report, H):
    """
    Quadratic model (mu + kappa)/2 ||z - z_T||^2 maintained by an inner solver.

    The composite part is already absorbed by the prox steps, so the model carries
    no regularizer and its minimizer is the last prox iterate z_T.
    """
    if report.steps < 1:
        raise ValueError("solver model needs at least one inner step")
    if not H.strong_convexity > 0.0:
        raise ValueError("solver model needs mu + kappa > 0")
    return QuadraticModel(
        center=np.array(report.model_center),
        curvature=H.strong_convexity,
        reg=Regularizer.none(),
        anchor=np.array(H.prox_center),
    )
