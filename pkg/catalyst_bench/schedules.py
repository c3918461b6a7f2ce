"""
Momentum recursions and outer-loop schedules.

Everything here is a deterministic pure function of its arguments: the
momentum coefficients (alpha_k, beta_k, A_k), the inverse condition parameter
q, the solver contracts (C, tau, B, sigma^2), tolerance schedules, bias
factors, restart periods and inner-loop budgets.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

logger = logging.getLogger(__name__)


def q_of(mu, kappa):
    """q = mu / (mu + kappa)."""
    if not kappa > 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not mu >= 0.0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    return mu / (mu + kappa)


def initial_alpha(q, mu):
    return 1.0 if mu == 0.0 else math.sqrt(q)


def next_alpha(alpha_prev, q):
    """
    Root in (0, 1) of alpha^2 = (1 - alpha) * alpha_prev^2 + q * alpha.

    Closed form, arranged so that neither branch subtracts nearly equal numbers.
    """
    if not 0.0 < alpha_prev <= 1.0:
        raise ValueError(f"alpha_prev must be in (0,1], got {alpha_prev}")
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must be in [0,1), got {q}")
    a2 = alpha_prev * alpha_prev
    b = a2 - q
    root = math.sqrt(b * b + 4.0 * a2)
    if b >= 0.0:
        return 2.0 * a2 / (b + root)
    return 0.5 * (root - b)


def beta_coeff(alpha_prev, alpha_cur):
    """beta_k = alpha_{k-1}(1 - alpha_{k-1}) / (alpha_{k-1}^2 + alpha_k)."""
    denominator = alpha_prev * alpha_prev + alpha_cur
    if not denominator > 0.0:
        raise ValueError("beta denominator must be positive")
    return alpha_prev * (1.0 - alpha_prev) / denominator


def alpha_sequence(alpha0, q, k):
    """[alpha_0, ..., alpha_k]."""
    alphas = [alpha0]
    for _ in range(k):
        alphas.append(next_alpha(alphas[-1], q))
    return alphas


def product_A(k, alphas):
    """
    A_k = prod_{t=1}^{k} (1 - alpha_t).

    `alphas` is indexed from alpha_0 (as returned by alpha_sequence); alpha_0
    is not part of the product.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(alphas) < k + 1:
        raise ValueError(f"need alphas up to index {k}, got {len(alphas)} values")
    product = 1.0
    for alpha in alphas[1:k + 1]:
        product *= 1.0 - alpha
    return product


def decay_product(gamma, k):
    """prod_{j=1}^{k} (1 - gamma / (1 + j)^(1 + gamma))."""
    product = 1.0
    for j in range(1, k + 1):
        product *= 1.0 - gamma / (1.0 + j) ** (1.0 + gamma)
    return product


@dataclass(frozen=True)
class MomentumState:
    alpha_prev: float
    alpha_cur: float
    q: float
    k: int = 0

    @classmethod
    def start(cls, q, mu):
        alpha0 = initial_alpha(q, mu)
        return cls(alpha_prev=alpha0, alpha_cur=alpha0, q=q, k=0)

    def advance(self):
        """State for iteration k+1: alpha_k becomes the previous value."""
        return MomentumState(self.alpha_cur, next_alpha(self.alpha_cur, self.q), self.q, self.k + 1)

    @property
    def beta(self):
        return beta_coeff(self.alpha_prev, self.alpha_cur)

    @property
    def residual(self):
        a, b = self.alpha_cur, self.alpha_prev
        return abs(a * a - (1.0 - a) * b * b - self.q * a)


@dataclass(frozen=True)
class SolverContract:
    """E[h(z_t) - h*] <= C (1 - tau)^t (h(z_0) - h*) + B sigma2."""

    C: float
    tau: float
    B: float
    sigma2: float = 0.0

    def __post_init__(self):
        values = (self.C, self.tau, self.B, self.sigma2)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"contract values must be finite, got {values}")
        if self.C < 1.0 or not 0.0 < self.tau <= 1.0 or self.B <= 0.0 or self.sigma2 < 0.0:
            raise ValueError(f"invalid contract (C={self.C}, tau={self.tau}, B={self.B}, sigma2={self.sigma2})")

    @property
    def deterministic(self):
        return self.sigma2 == 0.0

    @property
    def bias(self):
        return self.B * self.sigma2

    def bound(self, t, initial_gap):
        return self.C * (1.0 - self.tau) ** t * initial_gap + self.bias


@dataclass(frozen=True)
class SublinearContract:
    """E[h(z_t) - h*] <= D ||z_0 - z*||^2 / (2 t^d) + B sigma2 / 2."""

    D: float
    d: float
    B: float
    sigma2: float = 0.0

    def restart_period(self, mu):
        return sublinear_restart_period(self.D, mu, self.d)

    def to_linear(self, mu):
        period = self.restart_period(mu)
        return SolverContract(C=1.0, tau=1.0 / (2 * period), B=self.B, sigma2=self.sigma2)


def bias_factor(target, contract):
    """eta = min(1, target / (2 B sigma^2)); 1 in the deterministic regime."""
    if not target > 0.0:
        raise ValueError(f"target must be positive, got {target}")
    if contract.deterministic:
        return 1.0
    return min(1.0, target / (2.0 * contract.B * contract.sigma2))


class ScheduleKind(Enum):
    CATALYST_EPS = 'catalyst_eps'
    MODEL_DELTA = 'model_delta'
    MINIBATCH_HALVING = 'minibatch_halving'


def _geometric(F0, q, k, divisor, constant):
    if not 0.0 < q < 1.0:
        raise ValueError(f"geometric tolerance schedules need q in (0,1), got {q}")
    if not F0 > 0.0:
        raise ValueError(f"F0 must be positive, got {F0}")
    return constant * (1.0 - math.sqrt(q) / divisor) ** k * F0


def catalyst_eps_schedule(F0, q, k, constant=1.0):
    """eps_k = constant * (1 - sqrt(q)/3)^k * F0."""
    return _geometric(F0, q, k, 3.0, constant)


def model_delta_schedule(F0, q, k, constant=1.0):
    """delta_k = constant * (1 - sqrt(q)/2)^k * F0."""
    return _geometric(F0, q, k, 2.0, constant)


def convex_eps_schedule(F0, k, gamma=1.0, constant=1.0):
    """eps_k = constant * F0 / (k + 1)^(4 + 2 gamma), for mu = 0."""
    return constant * F0 / (k + 1.0) ** (4.0 + 2.0 * gamma)


def minibatch_halving_schedule(contract, k):
    """eps_k = 2 B sigma^2 / 2^k."""
    return 2.0 * contract.bias / 2.0 ** k


def halving_stages(contract, target):
    """K = ceil(log2(2 B sigma^2 / target)), at least 0."""
    if not target > 0.0:
        raise ValueError(f"target accuracy must be positive, got {target}")
    if contract.deterministic:
        return 0
    return max(0, math.ceil(math.log2(2.0 * contract.bias / target) - 1e-12))


def halving_stage_steps(contract):
    """Steps per halving stage: ceil(log(2C) / tau)."""
    return max(1, math.ceil(math.log(2.0 * contract.C) / contract.tau))


@dataclass(frozen=True)
class ToleranceSchedule:
    kind: ScheduleKind
    F0_estimate: float
    q: float = 0.0
    constant: float = 1.0
    contract: Optional[SolverContract] = None

    def value(self, k):
        if self.kind is ScheduleKind.CATALYST_EPS:
            return catalyst_eps_schedule(self.F0_estimate, self.q, k, self.constant)
        if self.kind is ScheduleKind.MODEL_DELTA:
            return model_delta_schedule(self.F0_estimate, self.q, k, self.constant)
        return minibatch_halving_schedule(self.contract, k)

    @property
    def ratio(self):
        if self.kind is ScheduleKind.CATALYST_EPS:
            return 1.0 - math.sqrt(self.q) / 3.0
        if self.kind is ScheduleKind.MODEL_DELTA:
            return 1.0 - math.sqrt(self.q) / 2.0
        return 0.5


def sublinear_restart_period(D, mu, d):
    """t' = ceil((2D/mu)^(1/d))."""
    if not mu > 0.0 or not d > 0.0:
        raise ValueError(f"mu and d must be positive, got mu={mu}, d={d}")
    if D < mu:
        raise ValueError(f"restart needs D >= mu, got D={D}, mu={mu}")
    return math.ceil((2.0 * D / mu) ** (1.0 / d) - 1e-9)


def inner_budget(n, eta_k, cap):
    """min(ceil(n / eta_k), cap); exactly n when eta_k = 1."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if not 0.0 < eta_k <= 1.0:
        raise ValueError(f"eta_k must be in (0,1], got {eta_k}")
    budget = math.ceil(n / eta_k - 1e-9)
    if budget > cap:
        logger.warning(f"Inner budget {budget} capped at {cap} (eta_k={eta_k:.3g})")
        return cap
    return budget


def cor2_kappa(L, sigma, K, R):
    """kappa = max(L, sigma (K+1)^(3/2) / R) for a fixed budget of K iterations."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not R > 0.0:
        raise ValueError(f"R must be positive, got {R}")
    return max(L, sigma * (K + 1.0) ** 1.5 / R)


def inexact_envelope(F0, q, deltas, epsilons):
    """
    Upper bounds on E[F(x_k) - F*] for the inexact-minimization loop, mu > 0:

        (1 - sqrt(q)/2)^k (2 F0 + 4 sum_{j<=k} (1 - sqrt(q)/2)^(-j) (delta_j + eps_j / sqrt(q)))

    `deltas[j-1]`, `epsilons[j-1]` hold delta_j, eps_j. Returns bounds for k = 0..len(deltas).
    """
    rate = 1.0 - math.sqrt(q) / 2.0
    bounds = [2.0 * F0]
    accumulated = 0.0
    for j, (delta, eps) in enumerate(zip(deltas, epsilons), start=1):
        accumulated += rate ** (-j) * (delta + eps / math.sqrt(q))
        bounds.append(rate ** j * (2.0 * F0 + 4.0 * accumulated))
    return bounds
