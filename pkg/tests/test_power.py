import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gsu import simkernel as sk
from gsu.gsucore import GsuOptions, centered_kernels
from gsu.power import (
    AlternativeMoments,
    NoAssociationError,
    _power_at,
    closed_form_n,
    compute_power,
    critical_value,
    estimate_moments,
    required_sample_size,
)
from gsu.qfdist import ChiSquareMixture
from gsu.simlab import SimConfig, config_from_mapping, simulate_dataset

UNIT = ChiSquareMixture([1.0])


def quiet_power(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return compute_power(*args, **kw)


def test_power_hand_example():
    res = compute_power(AlternativeMoments(0.1, 0.04), UNIT, 0.05, 100)
    expect = stats.norm.cdf((10 - (stats.chi2.ppf(0.95, 1) - 1)) / 4)
    assert abs(res.power - expect) < 1e-6
    assert abs(res.power - 0.9632) < 1e-4
    assert abs(res.q_crit - 2.8415) < 1e-3


def test_power_half_at_critical_point():
    q = critical_value(UNIT, 0.05)
    mu = q / 200
    res = compute_power(AlternativeMoments(mu, 0.3), UNIT, 0.05, 200, q_crit=q)
    assert res.power == 0.5


def test_power_nondecreasing_in_n():
    m = AlternativeMoments(0.02, 0.01)
    ps = [quiet_power(m, UNIT, 0.05, n).power for n in (50, 100, 200, 500)]
    assert all(b >= a for a, b in zip(ps, ps[1:]))


def test_small_n_warning_and_bad_inputs():
    with pytest.warns(RuntimeWarning, match="normal approximation"):
        compute_power(AlternativeMoments(0.1, 0.04), UNIT, 0.05, 50)
    with pytest.raises(NoAssociationError):
        compute_power(AlternativeMoments(0.0, 0.04), UNIT, 0.05, 100)
    with pytest.raises(ValueError):
        compute_power(AlternativeMoments(0.1, 0.0), UNIT, 0.05, 100)
    with pytest.raises(ValueError):
        compute_power(AlternativeMoments(0.1, 0.04), UNIT, 1.5, 100)


def test_sample_size_example_bracketed():
    m = AlternativeMoments(0.1, 0.04)
    res = required_sample_size(m, UNIT, 0.05, 0.8)
    assert res.achieved_power >= 0.8
    assert quiet_power(m, UNIT, 0.05, res.n - 1).power < 0.8
    assert res.n == math.ceil(closed_form_n(0.1, 0.04, res.q_crit, 0.8))


def test_sample_size_half_power_reduction():
    mix = ChiSquareMixture([0.7, 0.2, -0.1])
    m = AlternativeMoments(0.013, 0.5)
    res = required_sample_size(m, mix, 0.01, 0.5)
    assert res.n == math.ceil(res.q_crit / m.mu)


def test_doubling_mu_never_increases_n():
    rng = np.random.default_rng(0)
    q = critical_value(UNIT, 0.05)
    for _ in range(50):
        mu, z1 = rng.uniform(0.001, 0.2), rng.uniform(0.001, 0.5)
        beta = rng.uniform(0.5, 0.95)
        a = required_sample_size(AlternativeMoments(mu, z1), UNIT, 0.05, beta, q_crit=q).n
        b = required_sample_size(AlternativeMoments(2 * mu, z1), UNIT, 0.05, beta, q_crit=q).n
        assert b <= a


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(1e-3, 2.0),
       st.lists(st.floats(-1, 1).filter(lambda v: abs(v) > 0.01), min_size=1, max_size=5),
       st.floats(0.001, 0.2), st.floats(0.05, 0.99))
def test_sample_size_minimal(mu, zeta1, weights, alpha, beta):
    mix = ChiSquareMixture(weights)
    m = AlternativeMoments(mu, zeta1)
    res = required_sample_size(m, mix, alpha, beta)
    assert _power_at(res.n, mu, zeta1, res.q_crit) >= beta
    if res.n > 2:
        assert _power_at(res.n - 1, mu, zeta1, res.q_crit) < beta


def test_zeta_ordering_invariant():
    assert AlternativeMoments(0.1, 0.04, 0.5).zeta0 >= 0.04
    with pytest.raises(ValueError):
        AlternativeMoments(0.1, 0.04, 0.01)


def test_estimate_moments_matches_definition():
    cfg = config_from_mapping({"n": 120, "mu_beta": 1.0, "sigma2_beta": 0.1, "seed": 3,
                               "maf_spectrum": "uniform:0.1:0.5"})
    G, Y = simulate_dataset(cfg, 0)
    m = estimate_moments(G, Y)
    Kc, Sc, _ = centered_kernels(G, Y)
    prod = Kc.values * Sc.values
    n = G.n
    rows = np.array([(prod[i].sum() - prod[i, i]) / (n - 1) for i in range(n)])
    off = prod[~np.eye(n, dtype=bool)]
    assert m.mu == pytest.approx(off.mean(), rel=1e-12)
    assert m.zeta1 == pytest.approx(rows.var(ddof=1), rel=1e-12)
    assert m.zeta0 == pytest.approx(off.var(), rel=1e-12)
    assert m.zeta0 >= m.zeta1


def test_estimate_moments_self_similarity_positive():
    rng = np.random.default_rng(1)
    G = sk.GenotypeMatrix(rng.integers(0, 3, size=(40, 10)).astype(float))
    y = G.values @ np.ones(10)
    m = estimate_moments(G, sk.PhenotypeTable(y), GsuOptions(genetic_kernel="ibs"))
    assert m.mu > 0


def test_estimate_moments_needs_twenty():
    rng = np.random.default_rng(2)
    G = sk.GenotypeMatrix(rng.integers(0, 3, size=(19, 5)).astype(float))
    with pytest.raises(ValueError):
        estimate_moments(G, sk.PhenotypeTable(rng.normal(size=19)))


def test_null_mu_centered_and_strong_signal_positive():
    null = SimConfig(n=100, seed=5)
    mus = []
    for r in range(200):
        G, Y = simulate_dataset(null, r)
        Kc, Sc, _ = centered_kernels(G, Y)
        prod = Kc.values * Sc.values
        mus.append((prod.sum() - np.trace(prod)) / (100 * 99))
    mus = np.array(mus)
    assert abs(mus.mean()) <= 3 * mus.std(ddof=1) / math.sqrt(200)

    alt = config_from_mapping({"n": 100, "mu_beta": 1.0, "sigma2_beta": 0.2, "causal_fraction": 0.5,
                               "seed": 6, "maf_spectrum": "uniform:0.05:0.5"})
    positive = 0
    for r in range(200):
        G, Y = simulate_dataset(alt, r)
        try:
            estimate_moments(G, Y)
            positive += 1
        except NoAssociationError:
            pass
    assert positive >= 190
