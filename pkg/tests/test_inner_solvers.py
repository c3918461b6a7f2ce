import math

import numpy as np
import pytest

from catalyst_bench.inner_solvers import (
    AveragingMode,
    DivergenceError,
    InnerConfig,
    SagaTable,
    SolverKind,
    affordable_steps,
    catalyst_kappa,
    default_step,
    ista_solve,
    mk_contract,
    prox_sgd_solve,
    saga_estimator,
    saga_solve,
    solve,
    svrg_estimator,
    svrg_solve,
)
from catalyst_bench.problem import PerturbationSpec, Regularizer, dropout_variance, estimate_sigma2, per_example_gradients
from catalyst_bench.surrogates import build_aux

from .conftest import make_spec, one_point_spec


def _aux(spec, kappa=0.1, seed=0):
    return build_aux(spec, kappa, np.random.default_rng(seed).standard_normal(spec.p))


def _minimum(H):
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=100000, tolerance=1e-16, averaging=AveragingMode.OFF)
    report = ista_solve(H, np.zeros(H.p), cfg)
    return H.value(report.model_center)


def _all_loss_gradients(H, z):
    return per_example_gradients(H.base, z, np.arange(H.n))


def test_ista_single_step_reaches_minimizer_of_one_dimensional_quadratic():
    spec = one_point_spec(mu=0.5)
    H = build_aux(spec, 1.0, np.array([0.2]))
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=1, averaging=AveragingMode.OFF)

    report = ista_solve(H, np.zeros(1), cfg)

    np.testing.assert_allclose(report.x_out, [0.48], atol=1e-12)
    assert report.grad_evals == 1


def test_ista_stays_at_a_stationary_start():
    spec = one_point_spec(mu=0.5)
    H = build_aux(spec, 1.0, np.array([0.2]))
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=20, averaging=AveragingMode.OFF)

    report = ista_solve(H, np.array([0.48]), cfg)

    np.testing.assert_allclose(report.model_center, [0.48], atol=1e-12)


@pytest.mark.parametrize("reg", [Regularizer.none(), Regularizer.l1(0.01)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ista_converges_linearly_at_its_contract_rate(reg, seed):
    spec = make_spec(n=50, p=5, seed=seed, mu=0.02, reg=reg)
    H = _aux(spec, kappa=0.2, seed=seed)
    H_star = _minimum(H)
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=60, averaging=AveragingMode.OFF, record_trace=True)
    rate = 1.0 - H.strong_convexity / H.smoothness

    trace = ista_solve(H, np.zeros(5), cfg).objective_trace

    assert len(trace) == 61
    for t, value in enumerate(trace):
        assert value - H_star <= rate ** t * (trace[0] - H_star) + 1e-12
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))


def test_ista_stops_early_once_certified(small_spec):
    H = _aux(small_spec, kappa=0.3)
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=10000, tolerance=1e-10, averaging=AveragingMode.OFF)

    report = ista_solve(H, np.zeros(small_spec.p), cfg)

    assert report.certificate <= 1e-10
    assert report.steps < 10000
    assert report.grad_evals == (report.steps + 1) * small_spec.n
    assert H.value(report.x_out) - _minimum(H) <= 1e-10


def test_ista_counts_one_pass_per_step(small_spec):
    H = _aux(small_spec)
    report = ista_solve(H, np.zeros(small_spec.p), InnerConfig(step=1.0 / H.smoothness, budget=7))
    assert report.grad_evals == 7 * small_spec.n
    assert report.steps == 7


def test_prox_sgd_sweep_without_noise_follows_ista(small_spec):
    H = _aux(small_spec, kappa=0.2)
    step = 1.0 / H.smoothness
    x0 = np.ones(small_spec.p)

    ista = ista_solve(H, x0, InnerConfig(step=step, budget=10, averaging=AveragingMode.OFF))
    sgd = prox_sgd_solve(H, x0, InnerConfig(step=step, budget=10, averaging=AveragingMode.OFF, sweep=True),
                         rng=np.random.default_rng(0))

    np.testing.assert_allclose(sgd.model_center, ista.model_center, rtol=1e-12, atol=1e-14)
    assert sgd.grad_evals == ista.grad_evals


def test_prox_sgd_without_averaging_returns_the_last_step(small_spec):
    H = _aux(small_spec, kappa=0.2)
    step = 1.0 / H.smoothness
    x0 = np.ones(small_spec.p)

    report = prox_sgd_solve(H, x0, InnerConfig(step=step, budget=1, averaging=AveragingMode.OFF, sweep=True))

    np.testing.assert_allclose(report.x_out, H.prox_step(x0, H.smooth_gradient(x0), step), atol=1e-14)
    np.testing.assert_array_equal(report.x_out, report.model_center)


def test_uniform_averaging_returns_the_mean_iterate(small_spec):
    H = _aux(small_spec, kappa=0.2)
    step = 1.0 / H.smoothness
    z = np.ones(small_spec.p)
    iterates = []
    for _ in range(6):
        z = H.prox_step(z, H.smooth_gradient(z), step)
        iterates.append(z)

    uniform = prox_sgd_solve(H, np.ones(small_spec.p),
                             InnerConfig(step=step, budget=6, averaging=AveragingMode.UNIFORM, sweep=True))
    tail = prox_sgd_solve(H, np.ones(small_spec.p),
                          InnerConfig(step=step, budget=6, averaging=AveragingMode.UNIFORM_TAIL, sweep=True))

    np.testing.assert_allclose(uniform.x_out, np.mean(iterates, axis=0), atol=1e-13)
    np.testing.assert_allclose(tail.x_out, np.mean(iterates[3:], axis=0), atol=1e-13)
    np.testing.assert_allclose(uniform.model_center, iterates[-1], atol=1e-13)


def test_exponential_averaging_uses_step_times_strong_convexity(small_spec):
    H = _aux(small_spec, kappa=0.2)
    step = 1.0 / H.smoothness
    rho = step * H.strong_convexity
    x0 = np.ones(small_spec.p)
    z1 = H.prox_step(x0, H.smooth_gradient(x0), step)

    report = prox_sgd_solve(H, x0, InnerConfig(step=step, budget=1, averaging=AveragingMode.EXPONENTIAL, sweep=True))

    np.testing.assert_allclose(report.x_out, (1 - rho) * x0 + rho * z1, atol=1e-14)


@pytest.mark.parametrize(
    "kind,budget,batch,refresh,expected",
    [
        (SolverKind.PROX_SGD, 10, 3, None, 30),
        (SolverKind.SVRG, 25, 2, 10, 3 * 50 + 50),
        (SolverKind.SVRG, 100, 1, None, 2 * 50 + 100),
        (SolverKind.SAGA, 25, 1, None, 50 + 25),
    ],
)
def test_gradient_evaluations_are_counted_exactly(small_spec, kind, budget, batch, refresh, expected):
    H = _aux(small_spec)
    cfg = InnerConfig(step=default_step(kind, H), budget=budget, batch=batch, svrg_refresh=refresh, seed=3)

    report = solve(kind, H, np.zeros(small_spec.p), cfg, PerturbationSpec(0.1))

    assert report.grad_evals == expected
    assert report.steps == budget


@pytest.mark.parametrize("kind", [SolverKind.PROX_SGD, SolverKind.SVRG, SolverKind.SAGA])
def test_solves_with_the_same_seed_are_identical(small_spec, kind):
    H = _aux(small_spec)
    cfg = InnerConfig(step=default_step(kind, H), budget=120, seed=17)

    first = solve(kind, H, np.zeros(small_spec.p), cfg, PerturbationSpec(0.2))
    second = solve(kind, H, np.zeros(small_spec.p), cfg, PerturbationSpec(0.2))

    np.testing.assert_array_equal(first.x_out, second.x_out)
    np.testing.assert_array_equal(first.model_center, second.model_center)


def test_svrg_estimator_at_its_anchor_is_the_exact_gradient(small_spec, rng):
    H = _aux(small_spec)
    z = rng.standard_normal(small_spec.p)
    anchor_mean = _all_loss_gradients(H, z).mean(axis=0)

    g = svrg_estimator(H, z, z, anchor_mean, np.array([4]), PerturbationSpec(), rng)

    np.testing.assert_allclose(g, H.smooth_gradient(z), atol=1e-12)


def test_saga_estimator_with_a_fresh_table_is_the_exact_gradient(small_spec, rng):
    H = _aux(small_spec)
    z = rng.standard_normal(small_spec.p)
    table = SagaTable(_all_loss_gradients(H, z))

    g, fresh = saga_estimator(H, z, table, np.array([9, 2]), PerturbationSpec(), rng)

    np.testing.assert_allclose(g, H.smooth_gradient(z), atol=1e-12)
    assert fresh.shape == (2, small_spec.p)


def test_variance_reduced_estimators_are_unbiased_under_dropout(small_spec):
    H = _aux(small_spec)
    rng = np.random.default_rng(21)
    z, anchor = np.random.default_rng(4).standard_normal((2, small_spec.p))
    anchor_mean = _all_loss_gradients(H, anchor).mean(axis=0)
    table = SagaTable(_all_loss_gradients(H, anchor))
    perturb = PerturbationSpec(0.1)
    target = H.smooth_gradient(z)

    for draw in (
        lambda idx: svrg_estimator(H, z, anchor, anchor_mean, idx, perturb, rng),
        lambda idx: saga_estimator(H, z, table, idx, perturb, rng)[0],
    ):
        samples = np.array([draw(rng.integers(0, H.n, size=1)) for _ in range(20000)])
        standard_error = samples.std(axis=0) / math.sqrt(len(samples))
        assert np.all(np.abs(samples.mean(axis=0) - target) <= 5 * standard_error + 1e-12)


def test_estimator_variance_at_the_anchor_is_perturbation_only(small_spec):
    H = _aux(small_spec)
    rng = np.random.default_rng(8)
    z = np.random.default_rng(5).standard_normal(small_spec.p)
    grads = _all_loss_gradients(H, z)
    perturb = PerturbationSpec(0.2)
    target = H.smooth_gradient(z)
    floor = dropout_variance(small_spec, z, 0.2)

    svrg = np.array([svrg_estimator(H, z, z, grads.mean(axis=0), rng.integers(0, H.n, size=1), perturb, rng)
                     for _ in range(20000)])
    table = SagaTable(grads)
    saga = np.array([saga_estimator(H, z, table, rng.integers(0, H.n, size=1), perturb, rng)[0]
                     for _ in range(20000)])

    for samples in (svrg, saga):
        squared = np.sum((samples - target) ** 2, axis=1)
        assert abs(squared.mean() - floor) <= 5 * squared.std() / math.sqrt(len(squared))


def test_estimators_have_no_variance_at_the_anchor_without_dropout(small_spec, rng):
    H = _aux(small_spec)
    z = rng.standard_normal(small_spec.p)
    anchor_mean = _all_loss_gradients(H, z).mean(axis=0)
    samples = np.array([svrg_estimator(H, z, z, anchor_mean, rng.integers(0, H.n, size=1), PerturbationSpec(), rng)
                        for _ in range(200)])

    assert samples.var(axis=0).sum() <= 1e-20


def test_saga_table_mean_stays_accurate_over_many_updates(rng):
    table = SagaTable(rng.standard_normal((40, 3)))
    for _ in range(40):
        i = rng.integers(0, 40, size=1)
        table.replace(i, rng.standard_normal((1, 3)) * 1e3, auto_refresh=False)
    assert table.drift() <= 1e-10
    table.refresh()
    assert table.drift() == 0.0
    assert table.updates == 0


def test_saga_table_refreshes_itself_after_n_updates(rng):
    table = SagaTable(rng.standard_normal((5, 2)))
    table.replace(np.arange(5), rng.standard_normal((5, 2)))
    assert table.updates == 0


@pytest.mark.parametrize("kind", [SolverKind.SVRG, SolverKind.SAGA])
@pytest.mark.parametrize("reg", [Regularizer.none(), Regularizer.l1(0.005)])
def test_variance_reduced_solvers_converge_without_noise(kind, reg):
    spec = make_spec(n=50, p=5, seed=1, mu=0.05, reg=reg)
    H = _aux(spec, kappa=0.1)
    H_star = _minimum(H)
    cfg = InnerConfig(step=default_step(kind, H), budget=50 * spec.n, averaging=AveragingMode.OFF, seed=0)

    report = solve(kind, H, np.zeros(spec.p), cfg)

    assert H.value(report.x_out) - H_star <= 1e-10


@pytest.mark.parametrize("kind", [SolverKind.SVRG, SolverKind.SAGA])
def test_variance_reduced_solvers_meet_their_contract_without_noise(kind, small_spec):
    H = _aux(small_spec, kappa=0.1)
    H_star = _minimum(H)
    x0 = np.full(small_spec.p, 2.0)
    contract = mk_contract(kind, small_spec, 0.1)
    for t in (small_spec.n, 5 * small_spec.n, 10 * small_spec.n):
        cfg = InnerConfig(step=default_step(kind, H), budget=t, averaging=AveragingMode.OFF, seed=t)
        report = solve(kind, H, x0, cfg)
        assert H.value(report.x_out) - H_star <= 1.5 * contract.bound(t, H.value(x0) - H_star) + 1e-12


def test_prox_sgd_settles_at_a_noise_floor_proportional_to_step():
    spec = make_spec(n=100, p=5, seed=2, mu=0.05)
    H = _aux(spec, kappa=0.2)
    H_star = _minimum(H)
    perturb = PerturbationSpec(0.1)
    step = 1.0 / H.smoothness
    z_star = ista_solve(H, np.zeros(5), InnerConfig(step=step, budget=10000, tolerance=1e-16,
                                                    averaging=AveragingMode.OFF)).model_center
    sigma2 = estimate_sigma2(spec, z_star, perturb, np.random.default_rng(0), n_samples=100000)

    gaps = []
    for seed in range(20):
        cfg = InnerConfig(step=step, budget=2000, averaging=AveragingMode.EXPONENTIAL, seed=seed)
        gaps.append(H.value(prox_sgd_solve(H, np.zeros(5), cfg, perturb).x_out) - H_star)

    assert np.mean(gaps) <= 3.0 * step * sigma2


def test_step_above_inverse_smoothness_is_rejected(small_spec):
    H = _aux(small_spec)
    cfg = InnerConfig(step=1.1 / H.smoothness, budget=3)
    for kind in SolverKind:
        with pytest.raises(ValueError, match="exceeds"):
            solve(kind, H, np.zeros(small_spec.p), cfg)


def test_ista_refuses_perturbed_gradients(small_spec):
    H = _aux(small_spec)
    with pytest.raises(ValueError, match="exact gradients"):
        solve(SolverKind.ISTA, H, np.zeros(small_spec.p), InnerConfig(step=1 / H.smoothness, budget=2),
              PerturbationSpec(0.1))


def test_objective_blowup_raises_divergence_error(small_spec):
    H = _aux(small_spec)
    cfg = InnerConfig(step=1.0 / H.smoothness, budget=small_spec.n, divergence_factor=1e-3, seed=0)
    with pytest.raises(DivergenceError):
        prox_sgd_solve(H, np.zeros(small_spec.p), cfg)


@pytest.mark.parametrize(
    "kwargs",
    [dict(step=0.0, budget=1), dict(step=1.0, budget=0), dict(step=1.0, budget=1, batch=0),
     dict(step=1.0, budget=1, svrg_refresh=0), dict(step=1.0, budget=1, tolerance=0.0),
     dict(step=1.0, budget=1, averaging='sometimes')],
)
def test_invalid_inner_configs_are_rejected(kwargs):
    with pytest.raises(ValueError):
        InnerConfig(**kwargs)


def test_contracts_of_each_solver(small_spec):
    L = small_spec.smoothness
    mu = small_spec.mu

    ista = mk_contract('ista', small_spec, 0.3, sigma2=5.0)
    sgd = mk_contract(SolverKind.PROX_SGD, small_spec, L - mu, sigma2=0.8)
    svrg = mk_contract(SolverKind.SVRG, small_spec, 0.3, batch=4, sigma2=0.8)
    saga = mk_contract(SolverKind.SAGA, small_spec, 0.3, sigma2=0.8)

    assert (ista.C, ista.sigma2) == (1.0, 0.0)
    assert ista.tau == pytest.approx((mu + 0.3) / (L + 0.3))
    assert (sgd.C, sgd.sigma2) == (1.0, 0.8)
    assert sgd.tau == pytest.approx(L / (2 * L - mu))
    assert sgd.B == pytest.approx(1.0 / (2 * L - mu))
    assert (svrg.C, svrg.tau, svrg.sigma2) == (8.0, pytest.approx(1.0 / small_spec.n), pytest.approx(0.2))
    assert svrg.B == pytest.approx(1.0 / (L + 0.3))
    assert saga.tau == pytest.approx(1.0 / small_spec.n)


def test_contract_rejects_unknown_solver(small_spec):
    with pytest.raises(ValueError):
        mk_contract('newton', small_spec, 0.3)


def test_catalyst_kappa_per_solver():
    spec = make_spec(n=50, p=5, mu=1e-4)
    L = spec.smoothness
    assert catalyst_kappa(SolverKind.ISTA, spec) == L
    assert catalyst_kappa(SolverKind.PROX_SGD, spec) == pytest.approx(L - 1e-4)
    assert catalyst_kappa(SolverKind.SVRG, spec) == pytest.approx(L / 250 - 1e-4)
    assert catalyst_kappa(SolverKind.SAGA, spec, c=1.0) == pytest.approx(L / 50 - 1e-4)


def test_catalyst_kappa_clamps_to_zero_for_well_conditioned_finite_sums():
    spec = make_spec(n=50, p=5, mu_frac=10.0)
    assert catalyst_kappa(SolverKind.SVRG, spec) == 0.0


def test_default_steps(small_spec):
    H = _aux(small_spec)
    assert default_step(SolverKind.ISTA, H) == pytest.approx(1.0 / H.smoothness)
    assert default_step('prox-sgd', H) == pytest.approx(1.0 / H.smoothness)
    assert default_step(SolverKind.SAGA, H) == pytest.approx(1.0 / (3.0 * H.smoothness))


def test_saga_resumes_from_a_given_table_without_a_full_pass(small_spec):
    H = _aux(small_spec)
    cfg = InnerConfig(step=default_step(SolverKind.SAGA, H), budget=20, seed=4)
    first = saga_solve(H, np.zeros(small_spec.p), cfg)

    second = solve(SolverKind.SAGA, H, first.x_out, cfg, table=first.saga_table)

    assert first.grad_evals == small_spec.n + 20
    assert second.grad_evals == 20
    assert second.saga_table is first.saga_table


def test_saga_table_must_match_the_number_of_examples(small_spec):
    H = _aux(small_spec)
    cfg = InnerConfig(step=default_step(SolverKind.SAGA, H), budget=5)
    with pytest.raises(ValueError, match='rows'):
        saga_solve(H, np.zeros(small_spec.p), cfg, table=SagaTable(np.zeros((3, small_spec.p))))


def test_only_saga_returns_a_table(small_spec):
    H = _aux(small_spec)
    cfg = InnerConfig(step=default_step(SolverKind.SVRG, H), budget=5, seed=1)
    assert solve(SolverKind.SVRG, H, np.zeros(small_spec.p), cfg).saga_table is None


@pytest.mark.parametrize(
    "kind,evals,batch,refresh,fresh_table,expected",
    [
        (SolverKind.ISTA, 125, 1, None, True, 2),
        (SolverKind.PROX_SGD, 100, 3, None, True, 33),
        (SolverKind.SVRG, 100, 1, None, True, 50),
        (SolverKind.SVRG, 100, 2, 10, True, 14),
        (SolverKind.SAGA, 75, 1, None, True, 25),
        (SolverKind.SAGA, 75, 1, None, False, 75),
        (SolverKind.PROX_SGD, 0, 1, None, True, 1),
    ],
)
def test_affordable_steps_fit_the_remaining_evaluations(kind, evals, batch, refresh, fresh_table, expected):
    assert affordable_steps(kind, 50, evals, batch, refresh, fresh_table) == expected
