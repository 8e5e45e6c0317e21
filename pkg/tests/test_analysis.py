import csv
import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcode.analysis import (
    COMPARISON_COLUMNS,
    CURVE_COLUMNS,
    MC_COLUMNS,
    MethodResult,
    bound_report,
    curves_csv,
    empirical_unbiasedness_residuals,
    monte_carlo,
    optimality_gap,
    p3_numeric_solve,
    p3_objective,
    summarize_method,
)
from gradcode.baselines import is_sgd_code, od_code, sgc_code
from gradcode.codebook import AlphaMatrix, extract_code, row_targets, verify_optimal_structure
from gradcode.losses import make_ridge_task
from gradcode.rng import make_rng
from gradcode.schemes import build_scheme, minibatch_dense_alpha, sparse_construct
from gradcode.simulator import Schedule, TrainConfig, partition_dataset, partition_gradients, train
from gradcode.straggler import StragglerProfile, sample_profile

from conftest import profile_and_n


def scheme_alpha(profile, n, scheme):
    return build_scheme(row_targets(profile, n), scheme)[0]


@pytest.fixture(scope="module")
def hetero():
    prof = StragglerProfile.from_probabilities([0.1, 0.3, 0.5, 0.7])
    G = make_rng(2, "grads").normal(size=(6, 3))
    return prof, G


# -- P3 oracle -----------------------------------------------------------------


def test_p3_single_worker_is_forced():
    prof = StragglerProfile.from_probabilities([0.4])
    res = p3_numeric_solve(prof, 5)
    assert res.converged and res.iterations == 0
    np.testing.assert_array_equal(res.alpha.entries, np.ones((1, 5)))
    assert res.objective == pytest.approx(prof.delta[0] * 25, rel=1e-15)


def test_p3_equal_pair():
    prof = StragglerProfile.from_probabilities([0.3, 0.3])
    res = p3_numeric_solve(prof, 2)
    assert res.objective == pytest.approx(2 * prof.delta[0], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(profile_and_n(k_max=10))
def test_p3_matches_closed_form_optimum(pn):
    prof, n = pn
    if n > 20:
        n = 20
    res = p3_numeric_solve(prof, n)
    target = n * n / prof.delta_inv.sum()
    assert abs(res.objective - target) / target < 1e-6
    np.testing.assert_allclose(res.alpha.col_sums(), 1.0, atol=1e-12)


def test_p3_non_convergence_is_flagged():
    prof = StragglerProfile.from_probabilities([0.01, 0.5, 0.99])
    with pytest.warns(UserWarning, match="did not converge"):
        res = p3_numeric_solve(prof, 10, max_iters=3)
    assert not res.converged and res.iterations == 3


def test_p3_objective_value(thirds_profile):
    alpha = np.ones((3, 2)) / 3
    rows = np.full(3, 2 / 3)
    assert p3_objective(alpha, thirds_profile) == pytest.approx(float(np.sum(thirds_profile.delta * rows**2)))


# -- optimality gap ------------------------------------------------------------


@given(profile_and_n(k_max=8))
def test_constructed_schemes_have_zero_gap(pn):
    prof, n = pn
    t = row_targets(prof, n)
    for alpha in (scheme_alpha(prof, n, "I"), scheme_alpha(prof, n, "II"), minibatch_dense_alpha(t), sparse_construct(t)):
        assert abs(optimality_gap(alpha, prof)) <= 1e-9


def test_all_on_first_worker_gap(thirds_profile):
    n = 4
    entries = np.zeros((3, n))
    entries[0] = 1.0
    gap = optimality_gap(AlphaMatrix(entries), thirds_profile)
    expected = thirds_profile.delta[0] * n * n - n * n / thirds_profile.delta_inv.sum()
    assert gap == pytest.approx(expected, rel=1e-12)
    assert gap > 0


def test_random_column_valid_alphas_have_nonnegative_gap():
    rng = make_rng(0, "gap")
    for trial in range(200):
        k, n = rng.integers(1, 9), rng.integers(1, 15)
        prof = StragglerProfile.from_probabilities(rng.uniform(0.01, 0.9, k))
        raw = rng.normal(size=(k, n))
        entries = raw - (raw.sum(axis=0) - 1.0) / k
        assert optimality_gap(AlphaMatrix(entries), prof) >= -1e-9


def test_gap_rejects_invalid_columns(thirds_profile):
    with pytest.raises(ValueError):
        optimality_gap(AlphaMatrix(np.ones((3, 2))), thirds_profile)


@given(profile_and_n(k_min=2, k_max=8), st.floats(1e-4, 0.1))
def test_gap_zero_iff_structure_passes(pn, eps):
    prof, n = pn
    t = row_targets(prof, n)
    alpha = scheme_alpha(prof, n, "II").entries
    # mass moved between rows: rows change, columns stay valid
    moved = alpha.copy()
    moved[0, 0] += eps
    moved[1, 0] -= eps
    bad = AlphaMatrix(moved)
    # the gap is quadratic in eps, so only its sign is asserted
    assert optimality_gap(bad, prof) > 0
    assert not verify_optimal_structure(bad, t).passed
    if n >= 2:
        # a balanced swap keeps every row and column sum
        swap = moved.copy()
        swap[0, 1] -= eps
        swap[1, 1] += eps
        ok = AlphaMatrix(swap)
        assert abs(optimality_gap(ok, prof)) <= 1e-9
        assert verify_optimal_structure(ok, t).passed


# -- Monte Carlo ---------------------------------------------------------------


def test_monte_carlo_unbiased_scheme(hetero):
    prof, G = hetero
    code = extract_code(scheme_alpha(prof, 6, "I"), prof)
    rep = monte_carlo(code, G, trials=100_000, seed=1)
    assert rep.mean_within_ci
    assert rep.resid_relative_error < 0.03


def test_monte_carlo_reproducible(hetero):
    prof, G = hetero
    code = extract_code(scheme_alpha(prof, 6, "II"), prof)
    a = monte_carlo(code, G, trials=5000, seed=4, chunk=1500)
    b = monte_carlo(code, G, trials=5000, seed=4, chunk=1500)
    assert a.to_csv() == b.to_csv()
    assert monte_carlo(code, G, trials=5000, seed=5, chunk=1500).to_csv() != a.to_csv()


def test_monte_carlo_no_stragglers_has_zero_residual():
    prof = StragglerProfile.from_probabilities([1e-9] * 3)
    code = extract_code(scheme_alpha(prof, 4, "II"), prof)
    G = make_rng(0, "g").normal(size=(4, 2))
    rep = monte_carlo(code, G, trials=2000, seed=0)
    # w = 1/(1 - p) leaves an O(p) error per trial
    assert rep.empirical_resid < 1e-15


def test_monte_carlo_biased_code_has_no_analytic_value(hetero):
    prof, G = hetero
    rep = monte_carlo(is_sgd_code(prof, 6), G, trials=2000)
    assert rep.analytic_resid is None and np.isnan(rep.resid_relative_error)
    assert not rep.mean_within_ci
    text = rep.to_csv()
    assert tuple(next(csv.reader(io.StringIO(text)))) == MC_COLUMNS


def test_monte_carlo_small_trial_warning(hetero):
    prof, G = hetero
    with pytest.warns(UserWarning):
        monte_carlo(sgc_code(prof, 6), G, trials=50)


def test_empirical_residuals_agree_with_closed_form(hetero):
    prof, _ = hetero
    code = is_sgd_code(prof, 6)
    emp = empirical_unbiasedness_residuals(code, trials=40_000, seed=2)
    owner = np.argmax(code.A, axis=0)
    assert np.max(np.abs(emp + prof.probs[owner])) < 0.02
    od = empirical_unbiasedness_residuals(od_code(prof, 6, 2.0, 0), trials=2000)
    assert od.shape == (6,)


# -- comparison tables ----------------------------------------------------------


def test_method_result_pass_rules():
    assert MethodResult("gd", 1.0, True, 0.1, 0.0, 0.0).passed
    assert not MethodResult("issgd", 1.0, False, 0.1, 0.01, None).passed
    assert MethodResult("II", 1.5, True, 0.1, 0.5, 1.0).passed
    assert not MethodResult("II", 1.5, True, 0.1, 1.5, 1.0).passed


def test_summaries_and_csv_schemas():
    task = make_ridge_task(m=40, dim=3, seed=0)
    prof = sample_profile(4, 0.1, 2.0, 1.3, seed=0)
    n, C = 8, 1e3
    code = extract_code(scheme_alpha(prof, n, "II"), prof, name="II")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        runs = {
            "gd": (None, train(TrainConfig(task, n, prof, None, Schedule("const", 0.005), 10, C, runs=2))),
            "II": (code, train(TrainConfig(task, n, prof, code, Schedule("const", 0.005), 10, C, runs=2))),
        }
    results = [summarize_method(name, c, tr, C) for name, (c, tr) in runs.items()]
    assert results[0].mean_resid == 0.0 and results[0].passed
    assert results[1].unbiased and results[1].d == pytest.approx(1 + 3 / 8)
    rows = list(csv.reader(io.StringIO(bound_report(results))))
    assert tuple(rows[0]) == COMPARISON_COLUMNS and len(rows) == 3
    curves = list(csv.reader(io.StringIO(curves_csv([(n, r.d, runs[n][1]) for n, r in zip(runs, results)]))))
    assert tuple(curves[0]) == CURVE_COLUMNS and len(curves) == 1 + 2 * 10
    assert float(curves[-1][2]) == pytest.approx(10 * (1 + 3 / 8))


def test_scheme_resid_not_above_sgc():
    task = make_ridge_task(m=60, dim=4, seed=3)
    prof = StragglerProfile.from_probabilities([0.05, 0.2, 0.4, 0.6, 0.8])
    n = 10
    G = partition_gradients(task, partition_dataset(task, n), np.zeros(4))
    from gradcode.codebook import analytic_residual_error

    sgc = analytic_residual_error(sgc_code(prof, n, 2), G)
    dense = analytic_residual_error(extract_code(minibatch_dense_alpha(row_targets(prof, n)), prof), G)
    assert dense <= sgc
