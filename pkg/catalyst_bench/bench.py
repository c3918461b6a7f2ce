"""
Benchmark harness for catalyst_bench.

Runs a set of optimization methods over several seeds on one problem, estimates
F* and writes the convergence curves (CSV) and a summary with provenance
(JSON). Usage:

    python -m catalyst_bench --synth 1000,50 --loss logistic --mu-frac 10 \
        --dropout 0.1 --method catalyst-svrg --method svrg --seeds 5 --epochs 50

Per-run seeds are derived from the master seed with derive_seed, so results are
reproducible and independent of the number of workers.
"""

import argparse
import hashlib
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from . import __version__
from .accelerators import (
    AccelConfig,
    exact_gradient_builder,
    run_algorithm1,
    run_algorithm2,
    run_prop5,
    run_restart_minibatch,
    run_unaccelerated,
    solve_to_precision,
    stochastic_gradient_builder,
)
from .config import configure_logging, load_settings
from .inner_solvers import DivergenceError, SolverKind, catalyst_kappa, mk_contract
from .problem import (
    LossKind,
    PerturbationSpec,
    ProblemSpec,
    Regularizer,
    dropout_variance,
    estimate_sigma2,
    load_libsvm,
    synth_generate,
)
from .results import ResultsWriter, curves_frame, summarize

logger = logging.getLogger(__name__)

MAX_OUTER = 1_000_000
RESTART_TARGET = 1e-12


def derive_seed(master, i):
    """seed_i = master XOR (first 4 bytes of sha256(str(i)), little-endian)."""
    digest = hashlib.sha256(str(i).encode()).digest()
    return (int(master) ^ int.from_bytes(digest[:4], 'little')) & 0xFFFFFFFF


def parse_reg(value):
    """'none' or 'l1:LAMBDA'."""
    if value == 'none':
        return Regularizer.none()
    if value.startswith('l1:'):
        try:
            lam = float(value[3:])
        except ValueError:
            raise ValueError(f"invalid l1 weight in {value!r}") from None
        if not lam > 0.0:
            raise ValueError(f"l1 weight must be positive, got {lam}")
        return Regularizer.l1(lam)
    raise ValueError(f"reg must be 'none' or 'l1:LAMBDA', got {value!r}")


class RunConfig(BaseModel):
    data: Optional[str] = None
    synth: Optional[Tuple[int, int]] = None
    loss: LossKind = LossKind.LOGISTIC
    reg: str = 'none'
    mu_frac: float = Field(default=10.0, gt=0.0)
    dropout: float = 0.0
    methods: List[str] = Field(default_factory=lambda: ['catalyst-svrg'])
    seeds: int = Field(default=5, ge=1)
    master_seed: int = Field(default=0, ge=0)
    epochs: float = Field(default=50.0, gt=0.0)
    k0: int = Field(default=30, ge=0)
    kappa_scale: float = Field(default=1.0, gt=0.0)
    out: str = 'results'
    workers: int = Field(default=1, ge=1)
    inner_cap: int = Field(default=100, ge=1)
    f_star_tol: float = Field(default=1e-12, gt=0.0)
    sigma_samples: int = Field(default=10_000, ge=1)

    @field_validator('dropout')
    @classmethod
    def _check_dropout(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {value}")
        return value

    @field_validator('reg')
    @classmethod
    def _check_reg(cls, value):
        parse_reg(value)
        return value

    @field_validator('methods')
    @classmethod
    def _check_methods(cls, value):
        if not value:
            raise ValueError("at least one method is required")
        unknown = [m for m in value if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method {unknown[0]!r}; valid methods: {', '.join(METHODS)}")
        return list(dict.fromkeys(value))

    @field_validator('synth')
    @classmethod
    def _check_synth(cls, value):
        if value is not None and (value[0] < 1 or value[1] < 1):
            raise ValueError(f"synth sizes must be positive, got {value}")
        return value

    @model_validator(mode='after')
    def _check_combination(self):
        if (self.data is None) == (self.synth is None):
            raise ValueError("exactly one of data and synth is required")
        if self.dropout > 0.0:
            exact = [m for m in self.methods if METHODS[m].exact_gradients]
            if exact:
                raise ValueError(f"{exact[0]} needs exact gradients; it cannot run with dropout > 0")
        return self


@dataclass(frozen=True)
class Method:
    run: Callable
    exact_gradients: bool = False


@dataclass(frozen=True)
class Job:
    """
    One (method, seed) run.

    sigma2 is the variance of a plain stochastic gradient at x*; vr_sigma2 is
    the perturbation-only variance that SVRG and SAGA estimators keep there.
    """

    method: str
    index: int
    seed: int
    spec: ProblemSpec
    config: RunConfig
    sigma2: float
    f_star: float
    vr_sigma2: float = 0.0


def _accel_config(job, kappa, sigma2=None, **kwargs):
    sigma2 = job.sigma2 if sigma2 is None else sigma2
    return AccelConfig(kappa=kappa, outer_iters=MAX_OUTER, k0=job.config.k0, max_epochs=job.config.epochs,
                       inner_cap=job.config.inner_cap, sigma2=sigma2, f_star=job.f_star, **kwargs)


def _perturb(job):
    return PerturbationSpec(job.config.dropout)


def _run_apg(job, rng):
    spec = job.spec
    kappa = spec.smoothness - spec.mu
    return run_algorithm1(spec, _accel_config(job, kappa), exact_gradient_builder(spec, kappa), rng, label='apg')


def _run_acc_prox_sgd(job, rng):
    spec = job.spec
    kappa = spec.smoothness - spec.mu
    builder = stochastic_gradient_builder(spec, kappa, _perturb(job), rng)
    config = _accel_config(job, kappa, record_every=spec.n)
    return run_algorithm1(spec, config, builder, rng, label='acc-prox-sgd')


def _run_catalyst_ista(job, rng):
    spec = job.spec
    kappa = job.config.kappa_scale * catalyst_kappa(SolverKind.ISTA, spec)
    config = _accel_config(job, kappa, inner=SolverKind.ISTA)
    return run_algorithm2(spec, config, rng=rng, perturb=_perturb(job), label='catalyst-ista')


def _catalyst_vr(kind):
    def run(job, rng):
        spec = job.spec
        kappa = job.config.kappa_scale * catalyst_kappa(kind, spec)
        config = _accel_config(job, kappa, sigma2=job.vr_sigma2, inner=kind)
        return run_prop5(spec, config, kind, rng, _perturb(job), label=f'catalyst-{kind.value}')
    return run


def _run_restart_sgd(job, rng):
    spec = job.spec
    contract = mk_contract(SolverKind.PROX_SGD, spec, 0.0, sigma2=job.sigma2)
    return run_restart_minibatch(spec, SolverKind.PROX_SGD, contract, RESTART_TARGET, rng, _perturb(job),
                                 max_grad_evals=math.ceil(job.config.epochs * spec.n), label='restart-sgd')


def _plain(kind):
    def run(job, rng):
        return run_unaccelerated(job.spec, _accel_config(job, 0.0), kind, rng, _perturb(job))
    return run


METHODS = {
    'apg': Method(_run_apg, exact_gradients=True),
    'acc-prox-sgd': Method(_run_acc_prox_sgd),
    'catalyst-ista': Method(_run_catalyst_ista, exact_gradients=True),
    'catalyst-svrg': Method(_catalyst_vr(SolverKind.SVRG)),
    'catalyst-saga': Method(_catalyst_vr(SolverKind.SAGA)),
    'restart-sgd': Method(_run_restart_sgd),
    'svrg': Method(_plain(SolverKind.SVRG)),
    'saga': Method(_plain(SolverKind.SAGA)),
    'prox-sgd': Method(_plain(SolverKind.PROX_SGD)),
}


def build_parser(settings=None):
    settings = settings or load_settings()
    parser = argparse.ArgumentParser(
        prog='catalyst_bench',
        description='Benchmark accelerated stochastic composite optimization methods.',
    )
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--data', metavar='PATH', help='libsvm file')
    source.add_argument('--synth', metavar='n,p', help='synthetic dataset size')
    parser.add_argument('--loss', choices=[k.value for k in LossKind], default='logistic')
    parser.add_argument('--reg', default='none', help="'none' or 'l1:LAMBDA'")
    parser.add_argument('--mu-frac', type=float, default=10.0, metavar='M', help='mu = 1/(M n)')
    parser.add_argument('--dropout', type=float, default=0.0, metavar='D')
    parser.add_argument('--method', action='append', required=True, choices=list(METHODS), dest='methods')
    parser.add_argument('--seeds', type=int, default=5)
    parser.add_argument('--master-seed', type=int, default=0)
    parser.add_argument('--epochs', type=float, default=50.0)
    parser.add_argument('--k0', type=int, default=30)
    parser.add_argument('--kappa-scale', type=float, default=1.0, metavar='C',
                        help='multiplier on the Catalyst smoothing parameter')
    parser.add_argument('--out', metavar='DIR', default=settings.out_dir)
    parser.add_argument('--workers', type=int, default=settings.workers)
    parser.add_argument('--inner-cap', type=int, default=settings.inner_cap, help=argparse.SUPPRESS)
    return parser


def _parse_synth(value):
    parts = value.split(',')
    if len(parts) != 2:
        raise ValueError(f"--synth expects n,p, got {value!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"--synth expects integers n,p, got {value!r}") from None


def parse_cli(argv=None, settings=None):
    """
    Parse command-line flags into a validated RunConfig.

    Invalid values exit through argparse (status 2) with the validation message
    and the usage text on stderr.
    """
    parser = build_parser(settings)
    args = parser.parse_args(argv)
    try:
        return RunConfig(
            data=args.data,
            synth=_parse_synth(args.synth) if args.synth else None,
            loss=args.loss,
            reg=args.reg,
            mu_frac=args.mu_frac,
            dropout=args.dropout,
            methods=args.methods,
            seeds=args.seeds,
            master_seed=args.master_seed,
            epochs=args.epochs,
            k0=args.k0,
            kappa_scale=args.kappa_scale,
            out=args.out,
            workers=args.workers,
            inner_cap=args.inner_cap,
        )
    except (ValidationError, ValueError) as e:
        parser.error(str(e))


def load_problem(config):
    if config.data is not None:
        dataset = load_libsvm(config.data)
    else:
        n, p = config.synth
        dataset = synth_generate(n, p, seed=config.master_seed)
    mu = 1.0 / (config.mu_frac * dataset.n)
    return ProblemSpec(dataset=dataset, loss=LossKind(config.loss), mu=mu, reg=parse_reg(config.reg))


@dataclass
class FStarEstimate:
    value: float
    oracle: float
    certified: bool
    flagged: bool
    x_star: np.ndarray


def estimate_f_star(spec, tol=1e-12, observed=(), x0=None):
    """
    F* from a certified deterministic solve, lowered by any observed value.

    The estimate is flagged when the solve is not certified or when some
    observed value lies more than tol below the certified value.
    """
    x_star, oracle, certified = solve_to_precision(spec, tol, x0=x0)
    values = [v for v in observed if math.isfinite(v)]
    lowest = min(values) if values else math.inf
    value = min(oracle, lowest)
    flagged = not certified or oracle - lowest > tol
    if flagged:
        logger.warning(f"F* estimate flagged: oracle {oracle:.17g} (certified={certified}), "
                       f"lowest observed {lowest:.17g}")
    return FStarEstimate(value=value, oracle=oracle, certified=certified, flagged=flagged, x_star=x_star)


def run_job(job):
    """One (method, seed) run; divergence is reported, not raised."""
    rng = np.random.default_rng(job.seed)
    try:
        trace = METHODS[job.method].run(job, rng)
        diverged = False
    except DivergenceError as e:
        logger.error(f"{job.method} seed {job.index} diverged: {str(e)}")
        trace = e.trace
        diverged = True
    rows = [(r.epochs, r.objective, r.grad_evals) for r in trace.records] if trace is not None else []
    logger.info(f"Finished {job.method} seed {job.index}: {len(rows)} records, diverged={diverged}")
    return job.method, job.index, rows, diverged


class ExperimentRunner:
    """Runs every (method, seed) pair of a RunConfig and writes the results."""

    def __init__(self, config):
        try:
            logger.info(f"Initializing experiment: methods={config.methods}, seeds={config.seeds}")
            self.config = config
            self.spec = load_problem(config)
            self.perturb = PerturbationSpec(config.dropout)
            self.seeds = [derive_seed(config.master_seed, i) for i in range(config.seeds)]
            self.writer = ResultsWriter(config.out)
        except Exception as e:
            logger.error(f"Failed to initialize experiment: {str(e)}")
            raise

    def _reference(self):
        reference = estimate_f_star(self.spec, self.config.f_star_tol)
        rng = np.random.default_rng(self.config.master_seed)
        sigma2 = estimate_sigma2(self.spec, reference.x_star, self.perturb, rng, n_samples=self.config.sigma_samples)
        vr_sigma2 = dropout_variance(self.spec, reference.x_star, self.config.dropout)
        logger.info(f"Reference F*={reference.oracle:.17g} (certified={reference.certified}), "
                    f"sigma^2={sigma2:.6g}, variance-reduced sigma^2={vr_sigma2:.6g}")
        return reference, sigma2, vr_sigma2

    def _execute(self, jobs):
        progress = tqdm(total=len(jobs), desc='runs', unit='run', disable=None)
        results = []
        try:
            if self.config.workers > 1:
                with ProcessPoolExecutor(max_workers=self.config.workers) as pool:
                    for result in pool.map(run_job, jobs):
                        results.append(result)
                        progress.update()
            else:
                for job in jobs:
                    results.append(run_job(job))
                    progress.update()
        finally:
            progress.close()
        return results

    def run(self):
        """
        Execute all runs and write curves.csv and summary.json.

        Returns:
            dict with the 'curves' and 'summary' file paths
        """
        try:
            reference, sigma2, vr_sigma2 = self._reference()
            jobs = [Job(method, i, seed, self.spec, self.config, sigma2, reference.oracle, vr_sigma2)
                    for method in self.config.methods for i, seed in enumerate(self.seeds)]
            results = self._execute(jobs)

            observed = [obj for _, _, rows, _ in results for _, obj, _ in rows]
            lowest = min(observed) if observed else math.inf
            f_star = min(reference.oracle, lowest)
            flagged = reference.flagged or reference.oracle - lowest > self.config.f_star_tol
            if flagged and not reference.flagged:
                logger.warning(f"Observed value {lowest:.17g} is below the certified F* {reference.oracle:.17g}")

            records = []
            runs = []
            for method, index, rows, diverged in results:
                for epoch, objective, evals in rows:
                    records.append({'method': method, 'seed': index, 'epoch': epoch, 'objective': objective,
                                    'gap': objective - f_star, 'grad_evals': evals, 'diverged': diverged})
                final_gap = rows[-1][1] - f_star if rows else None
                runs.append({'method': method, 'seed': index, 'diverged': diverged, 'final_gap': final_gap})
            runs.sort(key=lambda r: (r['method'], r['seed']))

            curves = curves_frame(records)
            summary = summarize(curves, expected_seeds=self.config.seeds)
            provenance = {
                'config': self.config.model_dump(mode='json'),
                'seeds': self.seeds,
                'version': __version__,
                'n': self.spec.n,
                'p': self.spec.p,
                'mu': self.spec.mu,
                'sigma2_estimate': sigma2,
                'vr_sigma2_estimate': vr_sigma2,
                'f_star_estimate': f_star,
                'f_star_oracle': reference.oracle,
                'f_star_certified': reference.certified,
                'f_star_flagged': flagged,
            }
            return {
                'curves': self.writer.write_curves(curves),
                'summary': self.writer.write_summary(summary, provenance, runs),
            }
        except Exception as e:
            logger.error(f"Experiment failed: {str(e)}")
            raise


def run_experiment(config):
    return ExperimentRunner(config).run()


def main(argv=None):
    try:
        settings = load_settings()
    except ValueError as e:
        print(f"catalyst_bench: {e}", file=sys.stderr)
        return 2
    configure_logging(settings)
    config = parse_cli(argv, settings)
    paths = run_experiment(config)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
