import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmarket.errors import CapacityError
from fedmarket.federation import reconstruct_subset_model
from fedmarket.learner import utility
from fedmarket.shapley import (
    CachedOracle,
    ShapleyVector,
    TmcConfig,
    afs,
    d_max,
    estimate_range,
    exact_shapley,
    min_permutations,
    multi_cal,
    normalize,
    sampling_bound,
    sfsv,
    single_cal,
    tmc_shapley,
)


def shapley_by_permutations(v, n):
    """Average marginal contribution over all n! orderings."""
    phi = np.zeros(n)
    for perm in itertools.permutations(range(n)):
        seen = set()
        for i in perm:
            before = v(frozenset(seen))
            seen.add(i)
            phi[i] += v(frozenset(seen)) - before
    return phi / math.factorial(n)


def test_textbook_three_player_game():
    table = {(): 0, (0,): 12, (1,): 8, (2,): 4, (0, 1): 20, (0, 2): 13, (1, 2): 18, (0, 1, 2): 19}
    sv = exact_shapley(lambda s: table[tuple(sorted(s))], 3)
    assert sv.values == pytest.approx([47 / 6, 50 / 6, 17 / 6])


def test_glove_game():
    # player 0 holds a left glove, players 1 and 2 right gloves
    v = lambda s: float(0 in s and (1 in s or 2 in s))
    assert exact_shapley(v, 3).values == pytest.approx([2 / 3, 1 / 6, 1 / 6])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_exact_matches_permutation_enumeration(n, seed):
    table = np.random.default_rng(seed).uniform(-1, 1, 1 << n)
    v = lambda s: table[sum(1 << i for i in s)]
    assert np.allclose(exact_shapley(v, n).values, shapley_by_permutations(v, n), atol=1e-12)


def test_oracle_is_evaluated_once_per_coalition():
    calls = []
    oracle = CachedOracle(lambda s: calls.append(s) or len(s))
    sv = exact_shapley(oracle, 4)
    assert len(calls) == 16 == sv.utility_evaluations


def test_capacity_limits():
    with pytest.raises(CapacityError):
        exact_shapley(lambda s: 0.0, 21)


def test_normalize_and_dmax():
    a = normalize(ShapleyVector([1.0, 3.0], "exact"))
    b = normalize(ShapleyVector([2.0, 2.0], "afs"))
    assert a.values.tolist() == [0.25, 0.75]
    assert d_max(a, b) == pytest.approx(0.25)
    assert d_max(a, a) == 0.0
    with pytest.raises(ZeroDivisionError):
        normalize(ShapleyVector([1.0, -1.0], "exact"))
    with pytest.raises(ValueError):
        d_max(a, normalize(ShapleyVector([1.0, 1.0, 1.0], "afs")))


def test_single_cal_is_exact_shapley_over_replayed_models(tiny_federation):
    _, _, test, log = tiny_federation
    v = lambda s: utility(reconstruct_subset_model(log, s), test)
    assert np.allclose(single_cal(log, test).values, shapley_by_permutations(v, 4), atol=1e-12)


def test_single_cal_efficiency(tiny_federation):
    _, _, test, log = tiny_federation
    sv = single_cal(log, test)
    assert sv.values.sum() == pytest.approx(utility(log.final, test) - utility(log.initial, test))


def test_multi_cal_sums_per_round_values(tiny_federation):
    _, _, test, log = tiny_federation
    sv = multi_cal(log, test)
    gains = np.diff(log.utilities).sum()
    assert sv.values.sum() == pytest.approx(gains)


def test_sfsv_retrains_each_coalition(tiny_federation):
    config, clients, test, log = tiny_federation
    sv = sfsv(config, clients, test, initial=log.initial)
    assert sv.utility_evaluations == 16
    assert sv.values.sum() == pytest.approx(utility(log.final, test) - utility(log.initial, test))


def test_tmc_on_additive_game_is_exact():
    w = np.array([0.1, 0.4, 0.2, 0.3])
    sv = tmc_shapley(lambda s: float(sum(w[list(s)])), 4, TmcConfig(truncation_threshold=0.0, seed=3))
    assert sv.values == pytest.approx(w)


def test_tmc_converges_to_exact_on_a_random_game():
    table = np.random.default_rng(0).uniform(0, 1, 32)
    v = lambda s: table[sum(1 << i for i in s)]
    cfg = TmcConfig(truncation_threshold=0.0, convergence_tolerance=1e-9, max_permutations=4000, seed=1)
    est = tmc_shapley(v, 5, cfg)
    assert np.allclose(est.values, exact_shapley(v, 5).values, atol=0.03)
    assert est.permutations_used == 4000


def test_tmc_respects_the_permutation_cap():
    sv = tmc_shapley(lambda s: np.sin(len(s)), 3, TmcConfig(convergence_tolerance=1e-12, max_permutations=7))
    assert sv.permutations_used == 7


def test_afs_is_close_to_single_cal(tiny_federation):
    _, _, test, log = tiny_federation
    exact = normalize(single_cal(log, test))
    approx = normalize(afs(log, test, TmcConfig(convergence_tolerance=0.001)))
    assert d_max(approx, exact) < 0.1


def test_afs_is_reproducible(tiny_federation):
    _, _, test, log = tiny_federation
    assert np.array_equal(afs(log, test).values, afs(log, test).values)


def test_hoeffding_bound_closed_form():
    assert min_permutations(0.1, 0.05, 1) == 185
    b = sampling_bound(0.05, 0.01, 0.5)
    k = b.required_permutations
    assert 2 * math.exp(-2 * k * 0.05**2 / 0.25) <= 0.01 < 2 * math.exp(-2 * (k - 1) * 0.05**2 / 0.25)


@pytest.mark.parametrize("bad", [(0, 0.05, 1), (0.1, 0, 1), (0.1, 0.05, 0), (1.5, 0.05, 1)])
def test_hoeffding_bound_rejects_bad_inputs(bad):
    with pytest.raises(ValueError):
        min_permutations(*bad)


def test_estimate_range_uses_singleton_spread():
    w = [0.1, 0.5, 0.2]
    assert estimate_range(lambda s: sum(w[i] for i in s), 3) == pytest.approx(0.4)
    assert estimate_range(lambda s: 0.0, 3) == 1.0


def test_bad_tmc_settings_fail_early():
    with pytest.raises(ValueError):
        TmcConfig(sampler="sobol")
    with pytest.raises(ValueError):
        TmcConfig(convergence_tolerance=0)


def test_bound_holds_on_a_non_additive_game():
    # utilities in [0, 1] make every marginal lie in [-1, 1]; a range of 1 is not
    # guaranteed, so use the full width 2 to stay within the bound's assumptions
    table = np.random.default_rng(11).uniform(0, 1, 1 << 5)
    table[0] = 0.0
    v = lambda s: table[sum(1 << i for i in s)]
    truth = exact_shapley(v, 5).values
    k = min_permutations(0.2, 0.05, 2.0)
    hits = 0
    for trial in range(100):
        cfg = TmcConfig(truncation_threshold=0.0, convergence_tolerance=1e-12, max_permutations=k,
                        seed=trial, sampler="random")
        hits += bool(np.abs(tmc_shapley(v, 5, cfg).values - truth).max() <= 0.2)
    assert hits >= 95
