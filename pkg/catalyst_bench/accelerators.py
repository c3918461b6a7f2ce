"""
Outer acceleration loops.

Two update rules share one driver:

- model-based (exact or model minimization): each iteration produces a model
  minimizer x_k* and an output point x_k, and the extrapolation is
      y_k = x_k* + beta_k (x_k* - x_{k-1}) + ((kappa + mu)(1 - alpha_k)/kappa)(x_k - x_k*)
- inexact proximal point (Catalyst): the auxiliary objective around y_{k-1} is
  minimized approximately and y_k = x_k + beta_k (x_k - x_{k-1}).

Restart wrappers turn a solver with a linear-plus-noise (or sublinear) guarantee
into one with a vanishing noise floor. All drivers return a RunTrace.
"""

import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from .inner_solvers import (
    DIVERGENCE_FACTOR,
    AveragingMode,
    DivergenceError,
    InnerConfig,
    SolverKind,
    affordable_steps,
    default_step,
    mk_contract,
    solve,
)
from .problem import PerturbationSpec, check_dim, full_gradient, full_objective, hessian, sample_gradient
from .schedules import (
    MomentumState,
    ScheduleKind,
    SolverContract,
    SublinearContract,
    bias_factor,
    catalyst_eps_schedule,
    convex_eps_schedule,
    cor2_kappa,
    halving_stage_steps,
    halving_stages,
    inner_budget,
    minibatch_halving_schedule,
    model_delta_schedule,
    q_of,
    sublinear_restart_period,
)
from .surrogates import (
    build_aux,
    gradient_model,
    optimality_certificate,
    plain_objective,
    solver_model,
)

logger = logging.getLogger(__name__)

_TINY = np.finfo(float).eps


class WarmStart(Enum):
    PREV_X = 'prev_x'
    PREV_Y = 'prev_y'


class BiasReduction(Enum):
    MINIBATCH = 'minibatch'
    STEP_SIZE = 'step_size'


class _Rule(Enum):
    MODEL = 'model'
    PROXIMAL_POINT = 'proximal_point'


@dataclass
class AccelConfig:
    """
    Outer-loop settings shared by every driver.

    kappa may be 0 only for run_prop5, which then falls back to the plain
    inner solver. warm_start=None picks prev_y for smooth problems and prev_x
    when a regularizer is present; bias_reduction=None and schedule=None pick
    the driver's default.
    """

    kappa: float
    outer_iters: int = 100
    warm_start: Optional[WarmStart] = None
    k0: int = 30
    schedule: Optional[ScheduleKind] = None
    inner: SolverKind = SolverKind.ISTA
    contract: Optional[SolverContract] = None
    sigma2: float = 0.0
    step: Optional[float] = None
    batch: int = 1
    svrg_refresh: Optional[int] = None
    bias_reduction: Optional[BiasReduction] = None
    averaging: Optional[AveragingMode] = None
    max_epochs: Optional[float] = None
    record_every: int = 1
    keep_iterates: bool = False
    eps_constant: float = 1.0
    inner_cap: int = 100
    F0_estimate: Optional[float] = None
    f_star: Optional[float] = None
    divergence_factor: float = DIVERGENCE_FACTOR

    def __post_init__(self):
        if not self.kappa >= 0.0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")
        if self.outer_iters < 0:
            raise ValueError(f"outer_iters must be >= 0, got {self.outer_iters}")
        if self.k0 < 0:
            raise ValueError(f"k0 must be >= 0, got {self.k0}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")
        if self.inner_cap < 1:
            raise ValueError(f"inner_cap must be >= 1, got {self.inner_cap}")
        if self.max_epochs is not None and not self.max_epochs > 0.0:
            raise ValueError(f"max_epochs must be positive, got {self.max_epochs}")
        self.inner = SolverKind(self.inner)
        if self.warm_start is not None:
            self.warm_start = WarmStart(self.warm_start)
        if self.schedule is not None:
            self.schedule = ScheduleKind(self.schedule)
        if self.bias_reduction is not None:
            self.bias_reduction = BiasReduction(self.bias_reduction)
        if self.averaging is not None:
            self.averaging = AveragingMode(self.averaging)


@dataclass
class OuterState:
    x_prev: np.ndarray
    x_cur: np.ndarray
    y_cur: np.ndarray
    momentum: MomentumState
    k: int = 0
    trailing: deque = field(default_factory=lambda: deque(maxlen=3))

    @classmethod
    def start(cls, x0, q, mu):
        x0 = np.array(x0, dtype=float)
        return cls(x_prev=x0, x_cur=x0, y_cur=x0.copy(), momentum=MomentumState.start(q, mu),
                   k=0, trailing=deque([x0], maxlen=3))


@dataclass
class ModelStep:
    """What one outer iteration produced: x_k*, x_k and its cost."""

    x_star: np.ndarray
    x_out: np.ndarray
    grad_evals: int
    model: Optional[object] = None
    eta: float = 1.0
    tolerance: Optional[float] = None
    budget: Optional[int] = None


@dataclass
class TraceRecord:
    k: int
    objective: float
    grad_evals: int
    epochs: float
    eta: float = 1.0
    tolerance: Optional[float] = None
    budget: Optional[int] = None
    wall_time: float = 0.0
    xi: Optional[float] = None


class RunTrace:
    """Per-outer-iteration records of one run, plus optional iterates."""

    def __init__(self, label, n):
        self.label = label
        self.n = n
        self.records = []
        self.iterates = []
        self.contract = None
        self.meta = {}
        self.diverged = False
        self.x_final = None
        self._started = time.perf_counter()

    def add(self, k, objective, grad_evals, eta=1.0, tolerance=None, budget=None, xi=None):
        if self.records and grad_evals < self.records[-1].grad_evals:
            raise ValueError("cumulative gradient evaluations must be nondecreasing")
        record = TraceRecord(
            k=k,
            objective=float(objective),
            grad_evals=int(grad_evals),
            epochs=grad_evals / self.n,
            eta=eta,
            tolerance=tolerance,
            budget=budget,
            wall_time=time.perf_counter() - self._started,
            xi=xi,
        )
        self.records.append(record)
        return record

    @property
    def objectives(self):
        return np.array([r.objective for r in self.records])

    @property
    def final_objective(self):
        return self.records[-1].objective

    def to_frame(self):
        return pd.DataFrame([asdict(r) for r in self.records])


def warm_start_bound(trailing, eps_prev, kappa, x_ref):
    """(3/2) eps_{k-1} + 54 kappa max_j ||x_{k-j} - x_ref||^2 over the trailing window."""
    distances = [float((x - x_ref) @ (x - x_ref)) for x in trailing]
    return 1.5 * eps_prev + 54.0 * kappa * max(distances)


def _initial_point(spec, x0):
    if x0 is None:
        return np.zeros(spec.p)
    return np.array(check_dim(spec, x0), dtype=float)


def _resolve_warm_start(spec, cfg):
    if cfg.warm_start is None:
        return WarmStart.PREV_Y if spec.reg.is_none else WarmStart.PREV_X
    if cfg.warm_start is WarmStart.PREV_Y and not spec.reg.is_none:
        raise ValueError("warm start from y_{k-1} needs a smooth problem; use prev_x with a regularizer")
    return cfg.warm_start


def _initial_gap(spec, cfg, x0):
    if cfg.F0_estimate is not None:
        return max(cfg.F0_estimate, _TINY)
    value = full_objective(spec, x0)
    if cfg.f_star is not None:
        value -= cfg.f_star
    return max(value, _TINY)


def _eval_limit(spec, cfg):
    return None if cfg.max_epochs is None else math.ceil(cfg.max_epochs * spec.n)


def _extrapolate(state, step, spec, kappa, rule):
    momentum = state.momentum.advance()
    beta = momentum.beta
    if rule is _Rule.MODEL:
        x_star = step.x_star
        correction = (kappa + spec.mu) * (1.0 - momentum.alpha_cur) / kappa
        y_next = x_star + beta * (x_star - state.x_cur) + correction * (step.x_out - x_star)
    else:
        y_next = step.x_out + beta * (step.x_out - state.x_cur)
    trailing = deque(state.trailing, maxlen=3)
    trailing.append(step.x_out)
    return OuterState(x_prev=state.x_cur, x_cur=step.x_out, y_cur=y_next, momentum=momentum,
                      k=state.k + 1, trailing=trailing)


def _drive(spec, cfg, kappa, produce, rule, x0, label):
    if not kappa > 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    x0 = _initial_point(spec, x0)
    state = OuterState.start(x0, q_of(spec.mu, kappa), spec.mu)
    trace = RunTrace(label, spec.n)
    initial = full_objective(spec, x0)
    limit = cfg.divergence_factor * max(initial, _TINY)
    trace.add(0, initial, 0)
    if cfg.keep_iterates:
        trace.iterates.append({'k': 0, 'x': x0.copy(), 'y': x0.copy(), 'x_star': x0.copy()})

    evals = 0
    previous = initial
    try:
        for k in range(1, cfg.outer_iters + 1):
            window = [x.copy() for x in state.trailing]
            step = produce(state, k)
            evals += step.grad_evals
            state = _extrapolate(state, step, spec, kappa, rule)
            objective = full_objective(spec, state.x_cur)
            if not math.isfinite(objective) or objective > limit:
                logger.error(f"{label}: outer iteration {k} diverged (F={objective:.3g}, initial {initial:.3g})")
                raise DivergenceError(f"{label} diverged at outer iteration {k}")

            xi = None if cfg.f_star is None else previous - cfg.f_star
            logger.debug(f"{label} k={k} F={objective:.10g} evals={evals} eta={step.eta:.3g} xi={xi}")
            previous = objective

            exhausted = cfg.max_epochs is not None and evals / spec.n >= cfg.max_epochs
            if k % cfg.record_every == 0 or k == cfg.outer_iters or exhausted:
                trace.add(k, objective, evals, step.eta, step.tolerance, step.budget, xi)
            if cfg.keep_iterates:
                trace.iterates.append({'k': k, 'x': state.x_cur.copy(), 'y': state.y_cur.copy(),
                                       'x_star': np.array(step.x_star), 'trailing': window})
            if exhausted:
                break
    except DivergenceError as exc:
        trace.diverged = True
        trace.x_final = state.x_cur
        exc.trace = trace
        raise

    trace.x_final = state.x_cur
    return trace


def exact_gradient_builder(spec, kappa):
    """Gradient-step model with exact grad f at y_{k-1} and curvature kappa + mu."""
    curvature = kappa + spec.mu

    def build(state, k):
        model = gradient_model(full_gradient(spec, state.y_cur), state.y_cur, curvature, spec.reg)
        x_star = model.minimizer()
        return ModelStep(x_star=x_star, x_out=x_star, grad_evals=spec.n, model=model)

    return build


def stochastic_gradient_builder(spec, kappa, perturb, rng, batch=1):
    """Same model with an unbiased mini-batch gradient estimate; needs kappa >= L - mu."""
    if kappa < spec.smoothness - spec.mu - 1e-12:
        raise ValueError(f"stochastic gradient model needs kappa >= L - mu = {spec.smoothness - spec.mu}, got {kappa}")
    curvature = kappa + spec.mu

    def build(state, k):
        sample = sample_gradient(spec, state.y_cur, batch, perturb, rng)
        model = gradient_model(sample.g, state.y_cur, curvature, spec.reg)
        x_star = model.minimizer()
        return ModelStep(x_star=x_star, x_out=x_star, grad_evals=sample.batch_size, model=model)

    return build


def exact_prox_point_builder(spec, kappa, tol=1e-12, injected_error=None, rng=None):
    """
    Accelerated proximal point: H_k is minimized to high precision.

    `injected_error(k)` returns a suboptimality eps_k added on purpose: the
    output is moved a distance sqrt(2 eps_k / (L + mu + kappa)) from the
    minimizer in a random direction, so that H_k(x_k) - H_k* <= eps_k. This is
    only valid for smooth problems.
    """
    if injected_error is not None and not spec.reg.is_none:
        raise ValueError("injected inexactness needs a smooth problem (no regularizer)")
    rng = rng if rng is not None else np.random.default_rng(0)

    def build(state, k):
        H = build_aux(spec, kappa, state.y_cur)
        x_star, evals = _minimize_aux(H, tol, state.y_cur)
        x_out = x_star
        eps = None
        if injected_error is not None:
            eps = injected_error(k)
            direction = rng.standard_normal(spec.p)
            direction /= np.linalg.norm(direction)
            x_out = x_star + math.sqrt(2.0 * eps / H.smoothness) * direction
        return ModelStep(x_star=x_star, x_out=x_out, grad_evals=evals, tolerance=eps)

    return build


def _minimize_aux(H, tol, x0, max_steps=100_000):
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=max_steps, tolerance=tol,
                      averaging=AveragingMode.OFF)
    report = solve(SolverKind.ISTA, H, x0, cfg)
    if report.certificate is None or report.certificate > tol:
        logger.warning(f"Proximal point subproblem not certified to {tol:g} after {report.steps} steps")
    return report.model_center, report.grad_evals


def run_algorithm1(spec, config, surrogate_builder, rng=None, x0=None, label='algorithm1'):
    """
    Model-based acceleration.

    Args:
        spec: ProblemSpec
        config: AccelConfig (kappa, outer_iters, record/stopping options)
        surrogate_builder: Callable (OuterState, k) -> ModelStep
        rng: Unused by the driver itself; builders own their randomness
        x0: Starting point (zeros by default)

    Raises:
        ValueError: If kappa <= 0
        DivergenceError: With the partial trace attached as `.trace`
    """
    return _drive(spec, config, config.kappa, surrogate_builder, _Rule.MODEL, x0, label)


class ScheduledInner:
    """
    Inner solve of H_k with the tolerance, bias factor and budget of outer step k.

    Deterministic ISTA runs until its certificate reaches the tolerance (at most
    inner_cap steps). Stochastic solvers use the bias factor eta_k, which stays 1
    for the first k0 outer iterations, and run min(ceil(n / eta_k), inner_cap * n)
    steps, either with mini-batches of ceil(batch/eta_k) or with the step scaled
    by eta_k. A SAGA table is kept from one outer iteration to the next.

    With max_grad_evals set, the budget of a solve is clipped to what is left.
    """

    def __init__(self, spec, cfg, kappa, perturb, F0, schedule, bias_reduction, max_grad_evals=None):
        self.spec = spec
        self.cfg = cfg
        self.kind = cfg.inner
        self.kappa = kappa
        self.perturb = perturb
        self.F0 = F0
        self.schedule = schedule
        self.bias_reduction = bias_reduction
        self.max_grad_evals = max_grad_evals
        self.spent = 0
        self.table = None
        self.q = q_of(spec.mu, kappa)
        if self.kind is SolverKind.ISTA and not perturb.is_identity:
            raise ValueError("ista inner solver needs exact gradients (dropout must be 0)")
        self.contract = cfg.contract or mk_contract(self.kind, spec, kappa, cfg.batch, cfg.sigma2)
        if cfg.averaging is not None:
            self.averaging = cfg.averaging
        else:
            self.averaging = AveragingMode.OFF if perturb.is_identity else AveragingMode.EXPONENTIAL

    def tolerance(self, k):
        if self.spec.mu == 0.0:
            return convex_eps_schedule(self.F0, k, constant=self.cfg.eps_constant)
        if self.schedule is ScheduleKind.MODEL_DELTA:
            return model_delta_schedule(self.F0, self.q, k, self.cfg.eps_constant)
        return catalyst_eps_schedule(self.F0, self.q, k, self.cfg.eps_constant)

    def _clip(self, steps, batch):
        if self.max_grad_evals is None:
            return steps
        left = max(self.max_grad_evals - self.spent, 0)
        affordable = affordable_steps(self.kind, self.spec.n, left, batch, self.cfg.svrg_refresh,
                                      fresh_table=self.table is None)
        if affordable < steps:
            logger.debug(f"Inner budget clipped from {steps} to {affordable} steps ({left} evaluations left)")
        return min(steps, affordable)

    def inner_config(self, H, k):
        """Returns (InnerConfig, eta_k, tolerance_k, steps)."""
        tol = self.tolerance(k)
        step0 = self.cfg.step or default_step(self.kind, H)
        if self.kind is SolverKind.ISTA:
            steps = self._clip(self.cfg.inner_cap, 1)
            inner = InnerConfig(step=step0, budget=steps, tolerance=tol, averaging=AveragingMode.OFF)
            return inner, 1.0, tol, steps

        eta = 1.0 if k <= self.cfg.k0 else bias_factor(tol, self.contract)
        steps = inner_budget(self.spec.n, eta, self.cfg.inner_cap * self.spec.n)
        if self.bias_reduction is BiasReduction.MINIBATCH:
            batch = math.ceil(self.cfg.batch / eta - 1e-9)
            step = step0
        else:
            batch = self.cfg.batch
            step = eta * step0
        steps = self._clip(steps, batch)
        inner = InnerConfig(step=step, budget=steps, batch=batch, averaging=self.averaging,
                            svrg_refresh=self.cfg.svrg_refresh)
        return inner, eta, tol, steps

    def __call__(self, H, x_init, k, rng):
        inner, eta, tol, budget = self.inner_config(H, k)
        report = solve(self.kind, H, x_init, inner, self.perturb, rng, table=self.table)
        self.table = report.saga_table
        self.spent += report.grad_evals
        return report, eta, tol, budget


def run_algorithm2(spec, config, inner_solver=None, rng=None, perturb=PerturbationSpec(), x0=None,
                   label='catalyst'):
    """
    Catalyst: approximate minimization of H_k(x) = F(x) + (kappa/2)||x - y_{k-1}||^2.

    `inner_solver` is a callable (H, x_init, k, rng) -> ModelStep; by default the
    solver named by config.inner is run with the Catalyst tolerance schedule
    (see ScheduledInner).
    """
    rng = rng if rng is not None else np.random.default_rng()
    x0 = _initial_point(spec, x0)
    warm = _resolve_warm_start(spec, config)
    if inner_solver is None:
        scheduled = ScheduledInner(spec, config, config.kappa, perturb, _initial_gap(spec, config, x0),
                                   config.schedule or ScheduleKind.CATALYST_EPS,
                                   config.bias_reduction or BiasReduction.MINIBATCH,
                                   _eval_limit(spec, config))

        def inner_solver(H, x_init, k, rng):
            report, eta, tol, budget = scheduled(H, x_init, k, rng)
            return ModelStep(x_star=report.x_out, x_out=report.x_out, grad_evals=report.grad_evals,
                             eta=eta, tolerance=tol, budget=budget)

    def produce(state, k):
        H = build_aux(spec, config.kappa, state.y_cur)
        x_init = state.x_cur if warm is WarmStart.PREV_X else state.y_cur
        return inner_solver(H, x_init, k, rng)

    return _drive(spec, config, config.kappa, produce, _Rule.PROXIMAL_POINT, x0, label)


def run_prop5(spec, config, inner_solver=None, rng=None, perturb=PerturbationSpec(), x0=None,
              label='catalyst-model'):
    """
    Model-based acceleration where each x_k, x_k* comes from an inner solve of H_k.

    x_k* is the last prox iterate (the minimizer of the quadratic model the
    solver maintains) and x_k its output, averaged when noise is present. With
    kappa = 0 acceleration is pointless and the plain solver is run instead.
    """
    kind = SolverKind(inner_solver) if inner_solver is not None else config.inner
    rng = rng if rng is not None else np.random.default_rng()
    if config.kappa <= 0.0:
        logger.warning(f"{label}: kappa clamps to 0 (mu >= L/(c n)); running unaccelerated {kind.value}")
        return run_unaccelerated(spec, config, kind, rng, perturb, x0, label)

    x0 = _initial_point(spec, x0)
    warm = _resolve_warm_start(spec, config)
    config = replace(config, inner=kind)
    scheduled = ScheduledInner(spec, config, config.kappa, perturb, _initial_gap(spec, config, x0),
                               config.schedule or ScheduleKind.MODEL_DELTA,
                               config.bias_reduction or BiasReduction.STEP_SIZE,
                               _eval_limit(spec, config))

    def produce(state, k):
        H = build_aux(spec, config.kappa, state.y_cur)
        x_init = state.x_cur if warm is WarmStart.PREV_X else state.y_cur
        report, eta, tol, budget = scheduled(H, x_init, k, rng)
        model = solver_model(report, H)
        return ModelStep(x_star=model.minimizer(), x_out=report.x_out, grad_evals=report.grad_evals,
                         model=model, eta=eta, tolerance=tol, budget=budget)

    trace = _drive(spec, config, config.kappa, produce, _Rule.MODEL, x0, label)
    trace.contract = scheduled.contract
    return trace


def run_unaccelerated(spec, config, kind, rng=None, perturb=PerturbationSpec(), x0=None, label=None):
    """
    The solver alone on F, in epoch-sized chunks warm-started from each other.

    Each chunk is one step for ISTA and n/batch steps otherwise. With noise the
    step is constant for k0 chunks and then decreases as step0 * 2/(k - k0 + 2).
    SAGA keeps its table across chunks, and with config.max_epochs set the last
    chunk is shortened to the evaluations left.
    """
    kind = SolverKind(kind)
    label = label or kind.value
    rng = rng if rng is not None else np.random.default_rng()
    H = plain_objective(spec)
    step0 = config.step or default_step(kind, H)
    chunk = 1 if kind is SolverKind.ISTA else max(1, spec.n // config.batch)
    decreasing = not perturb.is_identity and kind is not SolverKind.ISTA
    averaging = config.averaging or AveragingMode.OFF

    z = _initial_point(spec, x0)
    trace = RunTrace(label, spec.n)
    initial = full_objective(spec, z)
    limit = config.divergence_factor * max(initial, _TINY)
    trace.add(0, initial, 0)
    evals = 0
    limit_evals = _eval_limit(spec, config)
    table = None
    try:
        for k in range(1, config.outer_iters + 1):
            scale = 2.0 / (k - config.k0 + 2) if decreasing and k > config.k0 else 1.0
            steps = chunk
            if limit_evals is not None:
                steps = min(chunk, affordable_steps(kind, spec.n, limit_evals - evals, config.batch,
                                                    config.svrg_refresh, fresh_table=table is None))
            inner = InnerConfig(step=step0 * scale, budget=steps, batch=config.batch, averaging=averaging,
                                svrg_refresh=config.svrg_refresh, divergence_factor=config.divergence_factor)
            report = solve(kind, H, z, inner, perturb, rng, table=table)
            table = report.saga_table
            z = report.x_out
            evals += report.grad_evals
            objective = full_objective(spec, z)
            if not math.isfinite(objective) or objective > limit:
                logger.error(f"{label}: chunk {k} diverged (F={objective:.3g})")
                raise DivergenceError(f"{label} diverged at chunk {k}")
            exhausted = config.max_epochs is not None and evals / spec.n >= config.max_epochs
            if k % config.record_every == 0 or k == config.outer_iters or exhausted:
                trace.add(k, objective, evals, eta=scale, budget=report.grad_evals)
            if exhausted:
                break
    except DivergenceError as exc:
        trace.diverged = True
        trace.x_final = z
        exc.trace = trace
        raise

    trace.x_final = z
    return trace


def run_restart_minibatch(spec, base_solver, contract, target_eps, rng=None, perturb=PerturbationSpec(),
                          x0=None, step=None, bias_reduction=BiasReduction.MINIBATCH, F0=None,
                          max_grad_evals=None, restart_period=None, label='restart'):
    """
    Mini-batch restarts of a solver with contract (C, tau, B, sigma^2) on F.

    A linear phase (batch 1) first brings the gap below eps_0 = 2 B sigma^2. Stage
    k then runs ceil(log(2C)/tau) steps with batch 2^k (or 2^k times as many
    steps at step/2^k), warm-started from the previous stage, so that its end gap
    is about eps_k = 2 B sigma^2 / 2^k. Stages stop once eps_k <= target_eps.

    With restart_period set, the base solver is the restarted uniformly averaged
    prox-SGD of run_restart_sublinear: every stage runs whole periods of
    uniform averaging, each warm-started from the previous average, and
    `contract` is the linear contract that wrapper exposes.

    Raises:
        ValueError: If target_eps <= 0
    """
    if not target_eps > 0.0:
        raise ValueError(f"target accuracy must be positive, got {target_eps}")
    kind = SolverKind(base_solver)
    bias_reduction = BiasReduction(bias_reduction)
    if restart_period is not None:
        if kind is not SolverKind.PROX_SGD:
            raise ValueError(f"restart_period needs the prox-sgd base solver, got {kind.value}")
        if bias_reduction is not BiasReduction.MINIBATCH:
            raise ValueError("restart_period needs mini-batch bias reduction")
        if restart_period < 1:
            raise ValueError(f"restart_period must be >= 1, got {restart_period}")
    rng = rng if rng is not None else np.random.default_rng()
    H = plain_objective(spec)
    step0 = step or default_step(kind, H)
    averaging = AveragingMode.OFF if perturb.is_identity else AveragingMode.EXPONENTIAL

    z = _initial_point(spec, x0)
    trace = RunTrace(label, spec.n)
    trace.contract = contract
    initial = full_objective(spec, z)
    gap0 = max(F0 if F0 is not None else initial, _TINY)
    trace.add(0, initial, 0)
    evals = 0

    def whole_periods(steps):
        if restart_period is None:
            return steps
        return restart_period * max(1, math.ceil(steps / restart_period))

    def run_stage(z, steps, batch, step_size):
        if restart_period is None:
            cfg = InnerConfig(step=step_size, budget=steps, batch=batch, averaging=averaging)
            report = solve(kind, H, z, cfg, perturb, rng)
            return report.x_out, report.grad_evals
        used = 0
        for start in range(0, steps, restart_period):
            cfg = InnerConfig(step=step_size, budget=min(restart_period, steps - start), batch=batch,
                              averaging=AveragingMode.UNIFORM)
            report = solve(kind, H, z, cfg, perturb, rng)
            z = report.x_out
            used += report.grad_evals
        return z, used

    stages = halving_stages(contract, target_eps)
    if contract.deterministic:
        eps0 = target_eps
        warmup = math.ceil(math.log(max(contract.C * gap0 / target_eps, 1.0)) / contract.tau)
    else:
        eps0 = minibatch_halving_schedule(contract, 0)
        warmup = math.ceil(math.log(2.0 * contract.C * gap0 / eps0) / contract.tau) if gap0 > eps0 else 0

    def remaining():
        return math.inf if max_grad_evals is None else max_grad_evals - evals

    while warmup > 0 and remaining() > 0:
        chunk = whole_periods(int(min(warmup, spec.n, remaining())))
        z, used = run_stage(z, chunk, 1, step0)
        evals += used
        warmup -= chunk
        trace.add(0, full_objective(spec, z), evals, eta=1.0, tolerance=eps0, budget=used)

    steps = whole_periods(halving_stage_steps(contract))
    for k in range(1, stages + 1):
        if remaining() <= 0:
            logger.info(f"{label}: gradient budget {max_grad_evals} reached before stage {k}")
            break
        scale = 2 ** k
        if bias_reduction is BiasReduction.MINIBATCH:
            z, used = run_stage(z, int(min(steps, math.ceil(remaining() / scale))), scale, step0)
        else:
            z, used = run_stage(z, int(min(steps * scale, remaining())), 1, step0 / scale)
        evals += used
        eps_k = minibatch_halving_schedule(contract, k)
        trace.add(k, full_objective(spec, z), evals, eta=1.0 / scale, tolerance=eps_k, budget=used)
        logger.debug(f"{label}: stage {k}/{stages} eps={eps_k:.3g} F={trace.final_objective:.10g}")

    trace.x_final = z
    return trace


_SUBLINEAR_SOLVERS = (SolverKind.PROX_SGD, SolverKind.ISTA)


def run_restart_sublinear(spec, base_solver, D, d, restarts, rng=None, perturb=PerturbationSpec(), x0=None,
                          batch=1, sigma2=0.0, label='restart-sublinear'):
    """
    Periodic restarts of a solver with a sublinear guarantee, run with step 1/D.

    The base solver is uniformly averaged prox-SGD (or ISTA, exact gradients
    only), whose output satisfies
    E[F(z_t) - F*] <= D ||z_0 - z*||^2 / (2t) + sigma^2/(2D). Restarting every
    t' = ceil((2D/mu)^(1/d)) steps at least halves the distance-driven term per
    period. The induced linear contract (C=1, tau=1/(2t'), B=1/D, sigma2/batch)
    is exposed as trace.contract and the period as trace.meta['period'], ready
    for run_restart_minibatch(..., restart_period=period).

    Raises:
        ValueError: On an unsupported base solver, restarts < 0 or D < L + mu
    """
    kind = SolverKind(base_solver)
    if kind not in _SUBLINEAR_SOLVERS:
        raise ValueError(f"sublinear restarts support prox-sgd and ista, got {kind.value}")
    if restarts < 0:
        raise ValueError(f"restarts must be >= 0, got {restarts}")
    if sigma2 < 0.0:
        raise ValueError(f"sigma2 must be nonnegative, got {sigma2}")
    period = sublinear_restart_period(D, spec.mu, d)
    step = 1.0 / D
    H = plain_objective(spec)
    if step > 1.0 / H.smoothness * (1.0 + 1e-12):
        raise ValueError(f"D must be >= L + mu = {H.smoothness}, got {D}")
    rng = rng if rng is not None else np.random.default_rng()

    z = _initial_point(spec, x0)
    trace = RunTrace(label, spec.n)
    trace.contract = SublinearContract(D=D, d=d, B=step, sigma2=sigma2 / batch).to_linear(spec.mu)
    trace.meta['period'] = period
    trace.add(0, full_objective(spec, z), 0)
    evals = 0
    for s in range(1, restarts + 1):
        cfg = InnerConfig(step=step, budget=period, batch=batch, averaging=AveragingMode.UNIFORM)
        report = solve(kind, H, z, cfg, perturb, rng)
        z = report.x_out
        evals += report.grad_evals
        trace.add(s, full_objective(spec, z), evals, budget=period)

    trace.x_final = z
    return trace


def fixed_budget_bound(L, R, sigma, K):
    """2 L R^2/(K+1)^2 + 3 sigma R / sqrt(K+1)."""
    return 2.0 * L * R * R / (K + 1.0) ** 2 + 3.0 * sigma * R / math.sqrt(K + 1.0)


def accelerated_prox_sgd_convex(spec, K, R_estimate, sigma_estimate, rng=None, perturb=PerturbationSpec(),
                                x0=None, batch=1):
    """
    Fixed-budget accelerated prox-SGD for mu = 0.

    kappa = max(L, sigma (K+1)^(3/2) / R); the expected gap bound for this
    budget is stored in trace.meta['bound'].
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if spec.mu != 0.0:
        raise ValueError(f"fixed-budget convex variant needs mu = 0, got {spec.mu}")
    rng = rng if rng is not None else np.random.default_rng()
    kappa = cor2_kappa(spec.smoothness, sigma_estimate, K, R_estimate)
    config = AccelConfig(kappa=kappa, outer_iters=K)
    builder = stochastic_gradient_builder(spec, kappa, perturb, rng, batch)
    trace = run_algorithm1(spec, config, builder, rng, x0, label='acc-prox-sgd-convex')
    trace.meta['kappa'] = kappa
    trace.meta['bound'] = fixed_budget_bound(spec.smoothness, R_estimate, sigma_estimate, K)
    return trace


def solve_to_precision(spec, tol=1e-12, max_iter=100_000, x0=None):
    """
    High-precision reference minimization of F.

    Smooth problems use Newton's method with backtracking; with an l1 term an
    accelerated proximal gradient method runs until the subgradient certificate
    is below tol.

    Returns:
        (x_star, F_star, certified)
    """
    if not tol > 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    x = _initial_point(spec, x0)
    if spec.reg.is_none:
        x, certified = _newton(spec, x, tol, min(max_iter, 500))
    else:
        x, certified = _apg(spec, x, tol, max_iter)
    value = full_objective(spec, x)
    if not certified:
        logger.warning(f"Reference solve not certified to {tol:g}; best value {value:.17g}")
    return x, value, certified


def _certificate(spec, g):
    norm2 = float(g @ g)
    return norm2 / (2.0 * spec.mu) if spec.mu > 0.0 else math.sqrt(norm2)


def _newton(spec, x, tol, max_iter):
    for _ in range(max_iter):
        g = full_gradient(spec, x)
        if _certificate(spec, g) <= tol:
            return x, True
        direction = -np.linalg.lstsq(hessian(spec, x), g, rcond=None)[0]
        slope = float(g @ direction)
        if slope >= 0.0:
            direction, slope = -g, -float(g @ g)
        value = full_objective(spec, x)
        slack = 4.0 * _TINY * abs(value)
        t = 1.0
        while full_objective(spec, x + t * direction) > value + 1e-4 * t * slope + slack and t > 1e-12:
            t *= 0.5
        x = x + t * direction
    return x, _certificate(spec, full_gradient(spec, x)) <= tol


def _apg(spec, x, tol, max_iter):
    H = plain_objective(spec)
    step = 1.0 / H.smoothness
    q = spec.mu / H.smoothness
    y = x.copy()
    t = 1.0
    for _ in range(max_iter):
        grad_y = H.smooth_gradient(y)
        z = H.prox_step(y, grad_y, step)
        if optimality_certificate(H, y, z, step, grad_y, H.smooth_gradient(z)) <= tol:
            return z, True
        if q > 0.0:
            beta = (1.0 - math.sqrt(q)) / (1.0 + math.sqrt(q))
        else:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / t_next
            t = t_next
        y = z + beta * (z - x)
        x = z
    return x, False


def ista_reference(spec, x0=None, iters=100, step=None):
    """Plain proximal gradient trajectory [x_0, ..., x_iters] on F."""
    H = plain_objective(spec)
    step = step or 1.0 / H.smoothness
    x = _initial_point(spec, x0)
    trajectory = [x.copy()]
    for _ in range(iters):
        x = H.prox_step(x, H.smooth_gradient(x), step)
        trajectory.append(x.copy())
    return trajectory
