import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from gsu.qfdist import (
    ChiSquareMixture,
    DaviesFailure,
    QfAccuracy,
    cumulants,
    davies_survival,
    liu_survival,
    mc_survival,
    mixture_quantile,
    survival,
)


def imhof(weights, x, centered=True):
    """Independent oracle: Imhof's inversion integral by adaptive quadrature."""
    w = np.asarray(weights, float)
    c = x + (w.sum() if centered else 0.0)

    def f(u):
        theta = 0.5 * np.sum(np.arctan(w * u)) - 0.5 * c * u
        rho = np.prod((1 + (w * u) ** 2) ** 0.25)
        return math.sin(theta) / (u * rho)

    with warnings.catch_warnings():
        # quad flags the slowly decaying oscillation but still lands well inside 1e-7
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, 0, np.inf, limit=2000, epsabs=1e-12, epsrel=1e-10)
    return 0.5 + val / math.pi


def test_unit_weight_at_chi2_quantile():
    # 3.8415 is the 0.95 quantile rounded to four places; the exact tail there
    # is 0.0499988, so the engine is held to the exact law
    p, err = davies_survival(ChiSquareMixture([1.0]), 2.8415)
    assert abs(p - stats.chi2.sf(3.8415, 1)) < 1e-9
    p, _ = davies_survival(ChiSquareMixture([1.0]), stats.chi2.ppf(0.95, 1) - 1)
    assert abs(p - 0.05) <= 1e-9
    assert err <= 1e-9 + 1e-12


def test_two_half_weights_at_chi2_quantile():
    p, _ = davies_survival(ChiSquareMixture([0.5, 0.5]), 1.99573)
    assert abs(p - 0.05) <= 1e-6


def test_far_below_support_is_one():
    m = ChiSquareMixture([0.3, 0.2, 0.1])
    p, _ = davies_survival(m, -10.0)
    assert p == 1.0
    assert mc_survival(m, -float(np.sum(np.abs(m.weights))), draws=10_000) == 1.0


@pytest.mark.parametrize("weights", [[1.0, -0.4, 0.25], [2.0, 1.0, 0.5, 0.1], [-1.0, -0.5, 0.3]])
def test_davies_matches_imhof(weights):
    m = ChiSquareMixture(weights)
    for x in np.linspace(-2, 6, 9):
        p, _ = davies_survival(m, x)
        assert abs(p - imhof(weights, x)) < 1e-7


def test_uncentered_mixture():
    m = ChiSquareMixture([1.0, 1.0, 1.0], centered=False)
    assert m.mean == 3.0
    p, _ = davies_survival(m, 7.81473)
    assert abs(p - 0.05) < 1e-6


def test_davies_term_limit_signals_failure():
    m = ChiSquareMixture(np.linspace(0.01, 1, 50))
    with pytest.raises(DaviesFailure):
        davies_survival(m, 1.0, QfAccuracy(integration_terms_limit=5))


def test_zero_weights_dropped_and_empty_rejected():
    assert len(ChiSquareMixture([1.0, 0.0, 2.0])) == 2
    with pytest.raises(ValueError):
        ChiSquareMixture([0.0])
    with pytest.raises(ValueError):
        QfAccuracy(target_abs_error=0)


@pytest.mark.parametrize("x", np.linspace(-0.9, 8, 12))
def test_liu_exact_single_component(x):
    m = ChiSquareMixture([1.0])
    assert abs(liu_survival(m, x) - stats.chi2.sf(x + 1, 1)) < 1e-6


@pytest.mark.parametrize("c,k", [(0.3, 4), (2.0, 7), (-0.5, 3)])
def test_liu_exact_equal_weights(c, k):
    m = ChiSquareMixture([c] * k)
    for x in np.linspace(-2.5, 6, 10):
        exact = stats.chi2.sf(x / c + k, k) if c > 0 else stats.chi2.cdf(x / c + k, k)
        assert abs(liu_survival(m, x) - exact) < 1e-6


def _liu_errors(lo, seed=1):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(100):
        m = ChiSquareMixture(rng.uniform(lo, 1, 10))
        q = mixture_quantile(m, 0.95)
        errs.append(abs(liu_survival(m, q) - 0.05))
    return np.array(errs)


def test_liu_close_to_davies_positive_weights():
    assert _liu_errors(0.01).max() <= 5e-3


def test_liu_mixed_sign_typical_error():
    errs = _liu_errors(-1.0)
    assert np.median(errs) <= 5e-3
    assert errs.max() <= 0.02


@pytest.mark.xfail(strict=True, reason="four-cumulant surrogate reaches 0.011 on negatively skewed mixed-sign mixtures")
def test_liu_mixed_sign_worst_case_within_5e3():
    assert _liu_errors(-1.0).max() <= 5e-3


def test_mc_unit_weight_and_determinism():
    m = ChiSquareMixture([1.0])
    p = mc_survival(m, 2.8415, draws=1_000_000, seed=4)
    assert abs(p - 0.05) <= 1e-3
    assert p == mc_survival(m, 2.8415, draws=1_000_000, seed=4)
    with pytest.raises(ValueError):
        mc_survival(m, 0.0, draws=9_999)


@pytest.mark.parametrize("weights,prob,expect", [([1.0], 0.95, 2.8415), ([0.5, 0.5], 0.95, 1.99573)])
def test_quantile_examples(weights, prob, expect):
    assert abs(mixture_quantile(ChiSquareMixture(weights), prob) - expect) <= 1e-3


def test_fallback_to_liu_recorded():
    m = ChiSquareMixture([1.0, 0.5])
    res = survival(m, 1.0, QfAccuracy(integration_terms_limit=2))
    assert res.engine == "liu"
    assert res.notes


def test_p_clamped_to_floor():
    res = survival(ChiSquareMixture([1.0]), 500.0)
    assert res.p == 1e-16 and res.clamped


def _davies_or_none(m, x):
    # with one or two weights even the relaxed 1e-6 target can need more terms
    # than the limit near the lower end of the support
    try:
        return davies_survival(m, x)[0]
    except DaviesFailure:
        return None


weights_st = st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=8)


@settings(max_examples=40, deadline=None)
@given(weights_st)
def test_cumulant_identity(weights):
    k = cumulants(ChiSquareMixture(weights))
    w = np.asarray(weights)
    assert abs(k[0]) < 1e-12 * max(1.0, np.abs(w).sum())
    assert math.isclose(k[1], 2 * np.sum(w**2), rel_tol=1e-12)


@settings(max_examples=25, deadline=None)
@given(weights_st, st.floats(0.1, 20))
def test_positive_homogeneity(weights, c):
    m = ChiSquareMixture(weights)
    for x in (-1.0, 0.0, 1.5):
        p1, b1 = davies_survival(m, x)
        p2, b2 = davies_survival(m.scaled(c), c * x)
        assert abs(p1 - p2) < b1 + b2


@settings(max_examples=25, deadline=None)
@given(weights_st)
def test_survival_monotone(weights):
    m = ChiSquareMixture(weights)
    grid = np.linspace(-5, 10, 25)
    for fn in (_davies_or_none, lambda m, x: liu_survival(m, x),
               lambda m, x: mc_survival(m, x, draws=10_000, seed=3)):
        ps = [p for p in (fn(m, x) for x in grid) if p is not None]
        assert all(b <= a + 2e-6 for a, b in zip(ps, ps[1:]))


@settings(max_examples=20, deadline=None)
@given(weights_st, st.floats(0.02, 0.98))
def test_quantile_inverse_identity(weights, prob):
    m = ChiSquareMixture(weights)
    q = mixture_quantile(m, prob)
    assert abs(survival(m, q).p - (1 - prob)) <= 1e-6


def test_davies_relaxes_accuracy_near_lower_support():
    m = ChiSquareMixture([1.25])
    p, bound = davies_survival(m, -1.0)
    assert bound <= 1e-6 and abs(p - stats.chi2.sf(0.2, 1)) <= bound
    m = ChiSquareMixture([1.5, 0.25])
    q = mixture_quantile(m, 0.125)
    assert abs(survival(m, q).p - 0.875) <= 1e-6


def test_davies_mc_concordance():
    rng = np.random.default_rng(7)
    draws = 200_000
    checked = 0
    for _ in range(50):
        m = ChiSquareMixture(rng.uniform(-1, 1, rng.integers(1, 12)))
        pts = rng.uniform(-2, 4, 20)
        for j, x in enumerate(pts):
            pd = _davies_or_none(m, x)
            if pd is None:
                continue
            checked += 1
            pm = mc_survival(m, x, draws=draws, seed=j)
            se = math.sqrt(max(pd * (1 - pd), 1e-8) / draws)
            assert abs(pd - pm) <= 4 * se + 1e-6
    assert checked >= 900
