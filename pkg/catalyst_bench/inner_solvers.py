"""
Inner solvers for the auxiliary objectives H(x) = F(x) + (kappa/2)||x - y||^2.

Four methods are available: deterministic proximal gradient (ISTA), proximal
SGD with optional iterate averaging, SVRG and SAGA. Each returns an
InnerReport holding the output point, the last prox iterate (the minimizer of
the quadratic model the solver maintains) and an exact gradient-evaluation
count. A solve owns its RNG and mutable state; datasets are shared read-only.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .problem import PerturbationSpec, dropout_perturb
from .schedules import SolverContract
from .surrogates import optimality_certificate

logger = logging.getLogger(__name__)

SVRG_SAGA_STEP_DIVISOR = 3.0
DEFAULT_KAPPA_CONSTANT = 5.0
DIVERGENCE_FACTOR = 1e6
_STEP_SLACK = 1e-12


class SolverKind(Enum):
    ISTA = 'ista'
    PROX_SGD = 'prox-sgd'
    SVRG = 'svrg'
    SAGA = 'saga'


class AveragingMode(Enum):
    OFF = 'off'
    EXPONENTIAL = 'exponential'
    UNIFORM_TAIL = 'uniform_tail'
    UNIFORM = 'uniform'


class DivergenceError(RuntimeError):
    """Non-finite iterate, or objective far above its initial value."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class InnerConfig:
    step: float
    budget: int
    batch: int = 1
    averaging: AveragingMode = AveragingMode.EXPONENTIAL
    svrg_refresh: Optional[int] = None
    seed: Optional[int] = None
    tolerance: Optional[float] = None
    sweep: bool = False
    record_trace: bool = False
    divergence_factor: float = DIVERGENCE_FACTOR

    def __post_init__(self):
        if not self.step > 0.0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.svrg_refresh is not None and self.svrg_refresh < 1:
            raise ValueError(f"svrg_refresh must be >= 1, got {self.svrg_refresh}")
        if self.tolerance is not None and not self.tolerance > 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        self.averaging = AveragingMode(self.averaging)


@dataclass
class InnerReport:
    x_out: np.ndarray
    model_center: np.ndarray
    grad_evals: int
    steps: int
    objective_trace: Optional[list] = None
    certificate: Optional[float] = None
    saga_table: Optional["SagaTable"] = None


class SagaTable:
    """
    Stored per-example gradients with an incrementally maintained mean.

    The running mean is recomputed from the rows every n updates so that
    rounding drift cannot accumulate.
    """

    def __init__(self, grads):
        self.grads = np.array(grads, dtype=float)
        self.mean = self.grads.mean(axis=0)
        self.updates = 0

    @property
    def n(self):
        return self.grads.shape[0]

    def replace(self, indices, rows, auto_refresh=True):
        for i, row in zip(indices, rows):
            self.mean += (row - self.grads[i]) / self.n
            self.grads[i] = row
        self.updates += len(indices)
        if auto_refresh and self.updates >= self.n:
            self.refresh()

    def drift(self):
        return float(np.max(np.abs(self.mean - self.grads.mean(axis=0))))

    def refresh(self):
        logger.debug(f"SAGA table refresh after {self.updates} updates, drift {self.drift():.3g}")
        self.mean = self.grads.mean(axis=0)
        self.updates = 0


class _Averager:
    def __init__(self, mode, rho, budget, z0):
        self.mode = mode
        self.rho = rho
        self.tail_start = budget // 2
        self.count = 0
        self.last = z0
        self.total = np.zeros_like(z0)
        self.average = z0.copy() if mode is AveragingMode.EXPONENTIAL else None

    def update(self, z, t):
        self.last = z
        if self.mode is AveragingMode.EXPONENTIAL:
            self.average = (1.0 - self.rho) * self.average + self.rho * z
        elif self.mode is AveragingMode.UNIFORM or (self.mode is AveragingMode.UNIFORM_TAIL and t > self.tail_start):
            self.total += z
            self.count += 1

    @property
    def current(self):
        if self.mode is AveragingMode.EXPONENTIAL:
            return self.average
        if self.mode is AveragingMode.OFF or self.count == 0:
            return self.last
        return self.total / self.count


class _Guard:
    def __init__(self, H, z0, factor, every):
        self.H = H
        self.factor = factor
        self.every = every
        self.initial = H.value(z0)
        self.limit = factor * max(abs(self.initial), np.finfo(float).tiny)

    def check(self, z, t):
        if not np.all(np.isfinite(z)):
            logger.error(f"Inner solve diverged at step {t}: non-finite iterate")
            raise DivergenceError(f"non-finite iterate at inner step {t}")
        if t % self.every == 0:
            value = self.H.value(z)
            if not math.isfinite(value) or value > self.limit:
                logger.error(f"Inner solve diverged at step {t}: objective {value:.3g} vs initial {self.initial:.3g}")
                raise DivergenceError(f"objective {value:.3g} exceeds {self.factor:g} x initial value at inner step {t}")


def _check_step(H, step, kind):
    limit = 1.0 / H.smoothness
    if step > limit * (1.0 + _STEP_SLACK):
        raise ValueError(f"{kind.value} step {step:.6g} exceeds 1/(L+mu+kappa) = {limit:.6g}")


def _rng_for(cfg, rng):
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def _perturbed(rows, perturb, rng):
    if perturb.is_identity:
        return rows
    return dropout_perturb(rows, perturb.dropout_delta, rng)


def _full_pass(H, z, perturb, rng):
    """Per-example loss gradients at z (perturbed) and their mean."""
    rows = _perturbed(H.loss_gradients(z, np.arange(H.n)), perturb, rng)
    return rows, rows.mean(axis=0)


def _finish(averager, z, evals, steps, trace, certificate=None):
    report = InnerReport(
        x_out=np.array(averager.current),
        model_center=np.array(z),
        grad_evals=int(evals),
        steps=steps,
        objective_trace=trace,
        certificate=certificate,
    )
    logger.debug(f"Inner solve finished: {steps} steps, {evals} gradient evaluations")
    return report


def ista_solve(H, x0, cfg):
    """
    Deterministic proximal gradient on H.

    Every step costs one full gradient (n evaluations). With cfg.tolerance set,
    the solve stops as soon as the subgradient certificate of the current
    iterate is below the tolerance; that check reuses the gradient of the next
    step, so an early stop costs one extra pass.
    """
    _check_step(H, cfg.step, SolverKind.ISTA)
    z = np.array(x0, dtype=float)
    averager = _Averager(AveragingMode.OFF, 0.0, cfg.budget, z)
    guard = _Guard(H, z, cfg.divergence_factor, every=1)
    trace = [H.value(z)] if cfg.record_trace else None
    evals = 0
    z_prev = grad_prev = None
    certificate = None
    steps = 0
    for t in range(1, cfg.budget + 1):
        grad = H.smooth_gradient(z)
        evals += H.n
        if cfg.tolerance is not None and z_prev is not None:
            certificate = optimality_certificate(H, z_prev, z, cfg.step, grad_prev, grad)
            if certificate <= cfg.tolerance:
                break
        z_prev, grad_prev = z, grad
        z = H.prox_step(z, grad, cfg.step)
        steps = t
        averager.update(z, t)
        guard.check(z, t)
        if trace is not None:
            trace.append(H.value(z))
    return _finish(averager, z, evals, steps, trace, certificate)


def prox_sgd_solve(H, x0, cfg, perturb=PerturbationSpec(), rng=None):
    """
    Stochastic proximal gradient with mini-batch cfg.batch.

    With exponential averaging the output is zhat_t = (1 - rho) zhat_{t-1} + rho z_t,
    rho = step (mu + kappa). With cfg.sweep every example is used once per step.
    """
    _check_step(H, cfg.step, SolverKind.PROX_SGD)
    rng = _rng_for(cfg, rng)
    z = np.array(x0, dtype=float)
    averager = _Averager(cfg.averaging, cfg.step * H.strong_convexity, cfg.budget, z)
    guard = _Guard(H, z, cfg.divergence_factor, every=H.n)
    trace = [H.value(z)] if cfg.record_trace else None
    sweep = np.arange(H.n) if cfg.sweep else None
    evals = 0
    for t in range(1, cfg.budget + 1):
        g, used = H.sample_gradient(z, cfg.batch, perturb, rng, indices=sweep)
        evals += used
        z = H.prox_step(z, g, cfg.step)
        averager.update(z, t)
        guard.check(z, t)
        if trace is not None:
            trace.append(H.value(averager.current))
    return _finish(averager, z, evals, cfg.budget, trace)


def svrg_estimator(H, z, anchor, anchor_mean, indices, perturb, rng):
    """
    g = mean_i [D(grad phi_i(z)) - grad phi_i(anchor)] + anchor_mean + mu z + kappa (z - y).

    The stale per-example term is exact, so given the anchor mean the variance
    at the anchor is that of a single perturbed gradient.
    """
    current = _perturbed(H.loss_gradients(z, indices), perturb, rng)
    stale = H.loss_gradients(anchor, indices)
    return (current - stale).mean(axis=0) + anchor_mean + H.shift(z)


def svrg_solve(H, x0, cfg, perturb=PerturbationSpec(), rng=None):
    """SVRG; the anchor is refreshed every cfg.svrg_refresh steps (default n)."""
    _check_step(H, cfg.step, SolverKind.SVRG)
    rng = _rng_for(cfg, rng)
    refresh = cfg.svrg_refresh or H.n
    z = np.array(x0, dtype=float)
    averager = _Averager(cfg.averaging, cfg.step * H.strong_convexity, cfg.budget, z)
    guard = _Guard(H, z, cfg.divergence_factor, every=H.n)
    trace = [H.value(z)] if cfg.record_trace else None
    evals = 0
    anchor = anchor_mean = None
    for t in range(1, cfg.budget + 1):
        if (t - 1) % refresh == 0:
            anchor = z.copy()
            _, anchor_mean = _full_pass(H, anchor, perturb, rng)
            evals += H.n
        indices = rng.integers(0, H.n, size=cfg.batch)
        g = svrg_estimator(H, z, anchor, anchor_mean, indices, perturb, rng)
        evals += cfg.batch
        z = H.prox_step(z, g, cfg.step)
        averager.update(z, t)
        guard.check(z, t)
        if trace is not None:
            trace.append(H.value(averager.current))
    return _finish(averager, z, evals, cfg.budget, trace)


def saga_estimator(H, z, table, indices, perturb, rng):
    """Returns (g, fresh rows); the caller stores the fresh rows in the table."""
    fresh = _perturbed(H.loss_gradients(z, indices), perturb, rng)
    g = (fresh - table.grads[indices]).mean(axis=0) + table.mean + H.shift(z)
    return g, fresh


def saga_solve(H, x0, cfg, perturb=PerturbationSpec(), rng=None, table=None):
    """
    SAGA; without a table one is initialized by a full pass at x0.

    The table stores loss gradients only, so a table returned in
    InnerReport.saga_table stays valid for any other center y or kappa and can
    be passed to the next solve.
    """
    _check_step(H, cfg.step, SolverKind.SAGA)
    rng = _rng_for(cfg, rng)
    z = np.array(x0, dtype=float)
    evals = 0
    if table is None:
        rows, _ = _full_pass(H, z, perturb, rng)
        table = SagaTable(rows)
        evals = H.n
    elif table.n != H.n:
        raise ValueError(f"SAGA table has {table.n} rows, expected {H.n}")
    averager = _Averager(cfg.averaging, cfg.step * H.strong_convexity, cfg.budget, z)
    guard = _Guard(H, z, cfg.divergence_factor, every=H.n)
    trace = [H.value(z)] if cfg.record_trace else None
    for t in range(1, cfg.budget + 1):
        indices = rng.integers(0, H.n, size=cfg.batch)
        g, fresh = saga_estimator(H, z, table, indices, perturb, rng)
        evals += cfg.batch
        table.replace(indices, fresh)
        z = H.prox_step(z, g, cfg.step)
        averager.update(z, t)
        guard.check(z, t)
        if trace is not None:
            trace.append(H.value(averager.current))
    report = _finish(averager, z, evals, cfg.budget, trace)
    report.saga_table = table
    return report


def default_step(kind, H):
    kind = SolverKind(kind)
    if kind in (SolverKind.SVRG, SolverKind.SAGA):
        return 1.0 / (SVRG_SAGA_STEP_DIVISOR * H.smoothness)
    return 1.0 / H.smoothness


def affordable_steps(kind, n, evals, batch=1, svrg_refresh=None, fresh_table=True):
    """
    Largest step count whose gradient evaluations fit in `evals`, at least 1.

    SVRG anchor passes are amortized over the refresh period, so the result
    may overrun `evals` by less than one pass.
    """
    kind = SolverKind(kind)
    if kind is SolverKind.ISTA:
        return max(1, int(evals // n))
    if kind is SolverKind.SVRG:
        per_step = batch + n / (svrg_refresh or n)
        return max(1, int(evals // per_step))
    if kind is SolverKind.SAGA and fresh_table:
        evals -= n
    return max(1, int(evals // batch))


def catalyst_kappa(kind, spec, c=DEFAULT_KAPPA_CONSTANT):
    """
    Smoothing parameter kappa for a Catalyst outer loop around `kind`.

    L below is the smoothness of f (loss constant plus mu). Variance-reduced
    solvers use max(L/(c n) - mu, 0); a zero result means acceleration brings
    nothing and callers fall back to the plain solver.
    """
    kind = SolverKind(kind)
    L = spec.smoothness
    if kind is SolverKind.ISTA:
        return L
    if kind is SolverKind.PROX_SGD:
        return L - spec.mu
    if not c > 0.0:
        raise ValueError(f"kappa constant must be positive, got {c}")
    return max(L / (c * spec.n) - spec.mu, 0.0)


def mk_contract(kind, spec, kappa, batch=1, sigma2=0.0):
    """
    Linear-convergence contract (C, tau, B, sigma^2) of a solver on H.

    ISTA and prox-SGD get tau = (mu + kappa)/(L_f + kappa) with L_f = L + mu,
    so at the usual prox-SGD choice kappa = L_f - mu the rate is
    L_f/(2 L_f - mu): 1/2 as mu -> 0 and slightly above it otherwise.

    Args:
        kind: SolverKind or its string id
        spec: Base ProblemSpec
        kappa: Smoothing parameter of the auxiliary objective
        batch: Mini-batch size; divides sigma2
        sigma2: Per-example gradient variance bound (ignored for ISTA)

    Raises:
        ValueError: On an unknown kind or an invalid resulting contract
    """
    kind = SolverKind(kind)
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    L_tot = spec.smoothness + kappa
    if kind is SolverKind.ISTA:
        return SolverContract(C=1.0, tau=(spec.mu + kappa) / L_tot, B=1.0 / L_tot, sigma2=0.0)
    noise = sigma2 / batch
    if kind is SolverKind.PROX_SGD:
        return SolverContract(C=1.0, tau=(spec.mu + kappa) / L_tot, B=1.0 / L_tot, sigma2=noise)
    return SolverContract(C=8.0, tau=1.0 / spec.n, B=1.0 / L_tot, sigma2=noise)


_SOLVERS = {
    SolverKind.PROX_SGD: prox_sgd_solve,
    SolverKind.SVRG: svrg_solve,
    SolverKind.SAGA: saga_solve,
}


def solve(kind, H, x0, cfg, perturb=PerturbationSpec(), rng=None, table=None):
    """Dispatch to the solver for `kind`; `table` resumes a SAGA table and is ignored otherwise."""
    kind = SolverKind(kind)
    if kind is SolverKind.ISTA:
        if not perturb.is_identity:
            raise ValueError("ista needs exact gradients (dropout must be 0)")
        return ista_solve(H, x0, cfg)
    if kind is SolverKind.SAGA:
        return saga_solve(H, x0, cfg, perturb, rng, table=table)
    return _SOLVERS[kind](H, x0, cfg, perturb, rng)
