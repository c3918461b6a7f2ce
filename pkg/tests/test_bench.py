import hashlib
import json
import logging
import math

import numpy as np
import pandas as pd
import pytest

from catalyst_bench import __version__
from catalyst_bench.bench import (
    METHODS,
    ExperimentRunner,
    Job,
    RunConfig,
    derive_seed,
    estimate_f_star,
    load_problem,
    main,
    parse_cli,
    parse_reg,
    run_experiment,
    run_job,
)
from catalyst_bench.config import Settings
from catalyst_bench.problem import LossKind, Regularizer, dropout_variance

from .conftest import one_point_spec

SETTINGS = Settings(log_file='', out_dir='results', workers=1, inner_cap=100)


def _parse(argv):
    return parse_cli(argv, settings=SETTINGS)


def test_derive_seed_xors_master_with_hashed_index():
    digest = hashlib.sha256(b'3').digest()
    expected = (12345 ^ int.from_bytes(digest[:4], 'little')) & 0xFFFFFFFF

    assert derive_seed(12345, 3) == expected
    assert derive_seed(12345, 3) == derive_seed(12345, 3)
    assert len({derive_seed(0, i) for i in range(100)}) == 100


def test_cli_flags_build_a_run_config():
    config = _parse(['--synth', '100,10', '--loss', 'logistic', '--mu-frac', '100', '--dropout', '0.1',
                     '--method', 'catalyst-svrg', '--seeds', '5'])

    assert config.synth == (100, 10)
    assert config.loss is LossKind.LOGISTIC
    assert config.mu_frac == 100.0
    assert config.dropout == 0.1
    assert config.methods == ['catalyst-svrg']
    assert config.seeds == 5
    assert load_problem(config).mu == pytest.approx(1.0 / (100 * 100))


def test_cli_accepts_repeated_methods_and_drops_duplicates():
    config = _parse(['--synth', '20,3', '--method', 'svrg', '--method', 'apg', '--method', 'svrg'])
    assert config.methods == ['svrg', 'apg']


@pytest.mark.parametrize(
    "argv,message",
    [
        (['--synth', '100,10', '--dropout', '1.5', '--method', 'svrg'], 'dropout must be in [0,1)'),
        (['--synth', '100,10', '--method', 'unknown'], 'catalyst-svrg'),
        (['--synth', '100,10', '--dropout', '0.2', '--method', 'apg'], 'needs exact gradients'),
        (['--synth', '100', '--method', 'svrg'], '--synth expects n,p'),
        (['--synth', '100,10', '--reg', 'l2:1', '--method', 'svrg'], "'none' or 'l1:LAMBDA'"),
        (['--synth', '100,10', '--data', 'x.svm', '--method', 'svrg'], 'not allowed with argument'),
        (['--synth', '100,10'], '--method'),
        (['--synth', '100,10', '--method', 'svrg', '--seeds', '0'], 'seeds'),
    ],
)
def test_invalid_cli_input_exits_with_usage(capsys, argv, message):
    with pytest.raises(SystemExit) as excinfo:
        _parse(argv)

    assert excinfo.value.code == 2
    err = capsys.readouterr().err
    assert 'usage:' in err
    assert message in err


def test_parse_reg():
    assert parse_reg('none') == Regularizer.none()
    assert parse_reg('l1:0.5') == Regularizer.l1(0.5)
    for bad in ('l1:', 'l1:-1', 'l1:zero', 'ridge'):
        with pytest.raises(ValueError):
            parse_reg(bad)


def test_run_config_needs_exactly_one_data_source():
    with pytest.raises(ValueError):
        RunConfig(methods=['svrg'])
    with pytest.raises(ValueError):
        RunConfig(data='a.svm', synth=(10, 2), methods=['svrg'])


def test_every_method_id_is_registered():
    assert set(METHODS) == {'apg', 'acc-prox-sgd', 'catalyst-ista', 'catalyst-svrg', 'catalyst-saga',
                            'restart-sgd', 'svrg', 'saga', 'prox-sgd'}
    assert {m for m, method in METHODS.items() if method.exact_gradients} == {'apg', 'catalyst-ista'}


def test_load_problem_reads_libsvm_files(tmp_path):
    path = tmp_path / 'data.svm'
    path.write_text('1 1:3 2:4\n-1 2:1\n+1 1:1\n')
    config = RunConfig(data=str(path), methods=['svrg'], mu_frac=10.0, reg='l1:0.01')

    spec = load_problem(config)

    assert (spec.n, spec.p) == (3, 2)
    assert spec.mu == pytest.approx(1.0 / 30.0)
    assert spec.reg == Regularizer.l1(0.01)


def test_f_star_of_a_one_dimensional_quadratic_is_certified():
    estimate = estimate_f_star(one_point_spec(mu=0.5))

    assert estimate.certified and not estimate.flagged
    assert estimate.value == pytest.approx(0.5 / 3.0, abs=1e-12)


def test_f_star_is_lowered_and_flagged_by_a_better_observed_value():
    exact = 0.5 / 3.0
    estimate = estimate_f_star(one_point_spec(mu=0.5), observed=[exact + 1.0, exact - 1e-6, math.nan])

    assert estimate.flagged
    assert estimate.value == pytest.approx(exact - 1e-6)
    assert estimate.oracle == pytest.approx(exact)


@pytest.mark.parametrize("method", sorted(METHODS))
def test_every_method_runs_within_its_epoch_budget(method):
    dropout = 0.0 if METHODS[method].exact_gradients else 0.1
    config = RunConfig(synth=(40, 4), methods=[method], epochs=4, dropout=dropout, seeds=1)
    spec = load_problem(config)
    estimate = estimate_f_star(spec)
    job = Job(method, 0, derive_seed(0, 0), spec, config, 0.05, estimate.value)

    name, index, rows, diverged = run_job(job)

    assert (name, index, diverged) == (method, 0, False)
    assert rows[0][0] == 0.0
    epochs = [r[0] for r in rows]
    assert epochs == sorted(epochs)
    assert len(rows) >= 2
    assert all(e < 4 for e in epochs[:-1])
    assert all(math.isfinite(r[1]) for r in rows)


@pytest.mark.parametrize("method", ['catalyst-svrg', 'catalyst-saga'])
def test_variance_reduced_catalyst_without_dropout_never_shrinks_its_steps(method):
    config = RunConfig(synth=(50, 5), methods=[method], mu_frac=100.0, epochs=20, k0=2, seeds=1)
    spec = load_problem(config)
    job = Job(method, 0, derive_seed(0, 0), spec, config, 0.05, estimate_f_star(spec).value, vr_sigma2=0.0)

    trace = METHODS[method].run(job, np.random.default_rng(job.seed))

    assert len(trace.records) > 3
    assert all(r.eta == 1.0 for r in trace.records)


def test_runner_estimates_the_variance_left_to_variance_reduced_solvers(tmp_path):
    runner = ExperimentRunner(_small_config(tmp_path, methods=['svrg'], dropout=0.2))

    reference, sigma2, vr_sigma2 = runner._reference()

    assert vr_sigma2 == pytest.approx(dropout_variance(runner.spec, reference.x_star, 0.2))
    assert sigma2 > vr_sigma2 > 0.0


def _small_config(out, **kwargs):
    settings = dict(synth=(60, 5), methods=['apg', 'svrg'], seeds=2, epochs=3, out=str(out), master_seed=7)
    settings.update(kwargs)
    return RunConfig(**settings)


def test_experiment_writes_consistent_curves_and_summary(tmp_path):
    paths = run_experiment(_small_config(tmp_path))

    curves = pd.read_csv(paths['curves'])
    with open(paths['summary']) as handle:
        payload = json.load(handle)

    assert list(curves.columns) == ['method', 'seed', 'epoch', 'objective', 'gap', 'grad_evals', 'diverged']
    assert set(curves['method']) == {'apg', 'svrg'}
    assert set(curves['seed']) == {0, 1}
    assert (curves['gap'] >= 0.0).all()
    np.testing.assert_allclose(curves['epoch'], curves['grad_evals'] / 60)
    np.testing.assert_allclose(curves['gap'], curves['objective'] - payload['provenance']['f_star_estimate'])

    provenance = payload['provenance']
    assert provenance['seeds'] == [derive_seed(7, 0), derive_seed(7, 1)]
    assert provenance['version'] == __version__
    assert (provenance['n'], provenance['p']) == (60, 5)
    assert provenance['config']['methods'] == ['apg', 'svrg']
    assert provenance['f_star_certified'] is True
    assert provenance['sigma2_estimate'] > 0.0
    assert provenance['vr_sigma2_estimate'] == 0.0

    grouped = curves.groupby(['method', 'epoch'])['gap']
    for row in payload['summary']:
        gaps = grouped.get_group((row['method'], row['epoch']))
        assert row['mean_gap'] == pytest.approx(gaps.mean(), rel=1e-12, abs=1e-15)
        assert row['std_gap'] == pytest.approx(gaps.std(ddof=0), rel=1e-9, abs=1e-15)
        assert row['seeds'] == len(gaps)

    assert sorted((r['method'], r['seed']) for r in payload['runs']) == [
        ('apg', 0), ('apg', 1), ('svrg', 0), ('svrg', 1)]


def test_experiments_are_reproducible_byte_for_byte(tmp_path):
    first = run_experiment(_small_config(tmp_path / 'a'))
    second = run_experiment(_small_config(tmp_path / 'b'))

    with open(first['curves'], 'rb') as a, open(second['curves'], 'rb') as b:
        assert a.read() == b.read()
    with open(first['summary']) as a, open(second['summary']) as b:
        assert json.load(a)['summary'] == json.load(b)['summary']


def test_experiment_results_do_not_depend_on_worker_count(tmp_path):
    serial = run_experiment(_small_config(tmp_path / 'serial', methods=['svrg']))
    pooled = run_experiment(_small_config(tmp_path / 'pooled', methods=['svrg'], workers=2))

    with open(serial['curves'], 'rb') as a, open(pooled['curves'], 'rb') as b:
        assert a.read() == b.read()


def test_runner_reports_a_missing_data_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExperimentRunner(RunConfig(data=str(tmp_path / 'missing.svm'), methods=['svrg'], out=str(tmp_path)))


@pytest.fixture
def restore_root_logging():
    root = logging.getLogger()
    saved_handlers, saved_level = root.handlers[:], root.level
    yield
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()
    for handler in saved_handlers:
        root.addHandler(handler)
    root.setLevel(saved_level)


def test_main_runs_an_experiment_and_prints_the_output_paths(tmp_path, monkeypatch, capsys, restore_root_logging):
    monkeypatch.setenv('CATALYST_BENCH_LOG_FILE', '')
    monkeypatch.setenv('CATALYST_BENCH_LOG_LEVEL', 'WARNING')

    status = main(['--synth', '30,3', '--method', 'svrg', '--seeds', '1', '--epochs', '2',
                   '--out', str(tmp_path)])

    out = capsys.readouterr().out
    assert status == 0
    assert f"curves: {tmp_path / 'curves.csv'}" in out
    assert (tmp_path / 'summary.json').exists()


def test_main_rejects_invalid_environment(monkeypatch, capsys):
    monkeypatch.setenv('CATALYST_BENCH_WORKERS', 'lots')

    assert main(['--synth', '30,3', '--method', 'svrg']) == 2
    assert 'CATALYST_BENCH_WORKERS' in capsys.readouterr().err
