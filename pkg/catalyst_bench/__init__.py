"""
catalyst_bench: accelerated stochastic optimization of composite objectives.

Acceleration by exact or model-based minimization, inexact proximal point
(Catalyst) acceleration with prox-gradient, prox-SGD, SVRG and SAGA inner
solvers, restart wrappers, and a benchmark harness (`python -m catalyst_bench`).
"""

__version__ = '0.1.0'

from .accelerators import (
    AccelConfig,
    RunTrace,
    accelerated_prox_sgd_convex,
    exact_gradient_builder,
    exact_prox_point_builder,
    run_algorithm1,
    run_algorithm2,
    run_prop5,
    run_restart_minibatch,
    run_restart_sublinear,
    run_unaccelerated,
    solve_to_precision,
    stochastic_gradient_builder,
)
from .inner_solvers import DivergenceError, InnerConfig, InnerReport, SolverKind
from .problem import (
    Dataset,
    DatasetFormatError,
    LossKind,
    PerturbationSpec,
    ProblemSpec,
    Regularizer,
    load_libsvm,
    synth_generate,
)
