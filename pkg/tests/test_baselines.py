from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcode.baselines import (
    BaselineSpec,
    balanced_assignment,
    bgc_code,
    build_baseline,
    contiguous_blocks,
    fr_code,
    is_sgd_code,
    od_code,
    od_decode,
    od_residual,
    sgc_code,
)
from gradcode.codebook import is_unbiased, unbiasedness_residuals
from gradcode.rng import make_rng
from gradcode.straggler import StragglerProfile

from conftest import profiles


def load(code) -> Fraction:
    return Fraction(int(np.count_nonzero(code.A)), code.n)


@pytest.fixture
def spread_profile():
    return StragglerProfile.from_probabilities([0.05, 0.2, 0.45, 0.6, 0.8, 0.85])


def test_contiguous_blocks_spread_remainder():
    assert [len(b) for b in contiguous_blocks(10, 4)] == [3, 3, 2, 2]
    with pytest.raises(ValueError):
        contiguous_blocks(3, 4)


def test_spec_validation():
    with pytest.raises(ValueError):
        BaselineSpec("nope")
    with pytest.raises(ValueError):
        BaselineSpec("bgc", d=0.5)
    assert BaselineSpec("sgc", 2, 7).to_dict() == {"kind": "sgc", "d": 2, "seed": 7}


def test_issgd_square_is_permutation(thirds_profile):
    code = is_sgd_code(thirds_profile, 3)
    np.testing.assert_array_equal(code.A, np.eye(3))
    assert load(code) == 1


def test_issgd_residual_is_minus_owner_probability(spread_profile):
    code = is_sgd_code(spread_profile, 10)
    owner = np.argmax(code.A, axis=0)
    np.testing.assert_allclose(unbiasedness_residuals(code), -spread_profile.probs[owner], rtol=1e-15)
    assert load(code) == 1
    with pytest.raises(ValueError):
        is_sgd_code(spread_profile, 5)


def test_bgc_full_density_is_all_ones(spread_profile):
    code = bgc_code(spread_profile, 7, d=spread_profile.k, seed=3)
    np.testing.assert_array_equal(code.A, np.ones((6, 7)))


def test_bgc_rejects_out_of_range_density(spread_profile):
    with pytest.raises(ValueError):
        bgc_code(spread_profile, 4, d=7.0)
    # floor: d/k must be at least 1/(k n)
    with pytest.raises(ValueError):
        bgc_code(spread_profile, 4, d=0.2)
    bgc_code(spread_profile, 4, d=0.25)


def test_bgc_expected_load_over_seeds():
    prof = StragglerProfile.from_probabilities([0.3] * 8)
    n, d = 12, 2.0
    loads = np.array([float(load(bgc_code(prof, n, d, seed=s))) for s in range(1000)])
    # nnz ~ Binomial(k n, d/k), so load has variance k n q (1 - q) / n^2
    q = d / prof.k
    se = np.sqrt(prof.k * n * q * (1 - q)) / n / np.sqrt(len(loads))
    assert abs(loads.mean() - d) <= 4 * se


def test_bgc_deterministic_and_shared_with_od(spread_profile):
    a = bgc_code(spread_profile, 9, 2.0, seed=5)
    b = bgc_code(spread_profile, 9, 2.0, seed=5)
    od = od_code(spread_profile, 9, 2.0, seed=5)
    np.testing.assert_array_equal(a.A, b.A)
    np.testing.assert_array_equal(a.A, od.A)
    assert od.adaptive and set(np.unique(od.A)) <= {0.0, 1.0}


def test_od_density_tracks_d_over_k():
    prof = StragglerProfile.from_probabilities([0.5] * 10)
    code = od_code(prof, 2000, d=3.0, seed=1)
    q = 0.3
    assert abs(code.A.mean() - q) <= 4 * np.sqrt(q * (1 - q) / code.A.size)


def test_fr_small_example():
    prof = StragglerProfile.from_probabilities([0.1, 0.2, 0.3, 0.4])
    code = fr_code(prof, 4, d=2)
    expected = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], dtype=float)
    np.testing.assert_array_equal(code.A, expected)
    assert load(code) == 2


def test_fr_edge_replication_factors(spread_profile):
    np.testing.assert_array_equal(fr_code(spread_profile, 6, d=1).A, is_sgd_code(spread_profile, 6).A)
    np.testing.assert_array_equal(fr_code(spread_profile, 6, d=6).A, np.ones((6, 6)))
    uneven = fr_code(spread_profile, 7, d=2)
    assert sorted(uneven.A.sum(axis=1)) == [2, 2, 2, 2, 3, 3]


@pytest.mark.parametrize("d", [4, 2.5])
def test_fr_rejects_bad_factor(spread_profile, d):
    with pytest.raises(ValueError):
        fr_code(spread_profile, 6, d=d)


@settings(max_examples=40)
@given(st.integers(1, 12), st.integers(1, 30), st.data())
def test_balanced_assignment_invariants(k, n, data):
    d = data.draw(st.integers(1, k))
    M = balanced_assignment(k, n, d, seed=data.draw(st.integers(0, 100)))
    np.testing.assert_array_equal(M.sum(axis=0), d)
    rows = M.sum(axis=1)
    assert rows.max() - rows.min() <= 1


@given(profiles(k_min=2, k_max=10), st.integers(1, 25), st.data())
def test_sgc_is_unbiased_with_load_d(prof, n, data):
    d = data.draw(st.integers(1, prof.k))
    code = sgc_code(prof, n, d, seed=0)
    assert np.max(np.abs(unbiasedness_residuals(code))) <= 1e-12
    assert load(code) == d


def test_sgc_full_replication(spread_profile):
    code = sgc_code(spread_profile, 5, d=6)
    expected = np.tile(1.0 / (6 * (1 - spread_profile.probs))[:, None], (1, 5))
    np.testing.assert_allclose(code.A, expected, rtol=1e-15)


def test_sgc_rejects_fractional_d(spread_profile):
    with pytest.raises(ValueError):
        sgc_code(spread_profile, 5, d=1.5)


def test_biased_baselines_fail_check_under_spread(spread_profile):
    n = 12
    for code in (is_sgd_code(spread_profile, n), bgc_code(spread_profile, n, 2.0, 0), fr_code(spread_profile, n, 2)):
        assert not is_unbiased(code)
        assert np.max(np.abs(unbiasedness_residuals(code))) > 0.01
    assert is_unbiased(sgc_code(spread_profile, n, 2))


def test_od_decode_figure_example_recovers_sum():
    A = np.array([[0.5, 1.0, 0.0], [0.0, 1.0, -1.0], [0.5, 0.0, 1.0]])
    w = od_decode(A, np.ones(3))
    assert od_residual(A, np.ones(3), w) <= 1e-12
    # the hand-built decoder is one exact solution too
    assert od_residual(A, np.ones(3), np.array([2.0, -1.0, 0.0])) == 0.0
    survivors = np.array([1, 1, 0])
    w2 = od_decode(A, survivors)
    assert w2[2] == 0.0
    np.testing.assert_allclose(w2[:2], [2.0, -1.0], atol=1e-12)


def test_od_decode_degenerate_cases():
    A = np.ones((3, 4))
    np.testing.assert_array_equal(od_decode(A, np.zeros(3)), np.zeros(3))
    np.testing.assert_allclose(od_decode(A, np.array([0, 1, 0])), [0.0, 1.0, 0.0], rtol=1e-14)


@settings(max_examples=25)
@given(st.integers(2, 8), st.integers(2, 12), st.integers(0, 10**6))
def test_od_decode_beats_random_alternatives(k, n, seed):
    rng = make_rng(seed, "od-test")
    A = (rng.random((k, n)) < 0.4).astype(float)
    ind = (rng.random(k) < 0.7).astype(int)
    best = od_residual(A, ind, od_decode(A, ind))
    for _ in range(100):
        alt = rng.normal(scale=2.0, size=k)
        assert best <= od_residual(A, ind, alt) + 1e-10


def test_build_baseline_dispatch(spread_profile):
    assert build_baseline(BaselineSpec("gd"), spread_profile, 6) is None
    for kind in ("issgd", "bgc", "ehd", "od", "sgc"):
        code = build_baseline(BaselineSpec(kind, 2, 1), spread_profile, 6)
        assert code.A.shape == (6, 6)
