"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line; the lines are also
collected into a section of the pytest terminal summary.
"""
import math

import numpy as np
import pytest
from scipy import stats

from gsu import simkernel as sk
from gsu.gsucore import (
    GsuOptions,
    centered_kernels,
    compute_u,
    eigen_spectrum,
    gsu_test,
    null_mixture,
)
from gsu.power import AlternativeMoments, _power_at, required_sample_size
from gsu.qfdist import ChiSquareMixture, davies_survival, mc_samples, survival
from gsu.simlab import (
    SimConfig,
    config_from_mapping,
    draw_design,
    run_experiment,
    simulate_dataset,
    simulate_phenotype,
)

pytestmark = pytest.mark.acceptance

NULL_REPS = 1000
LOW, HIGH = 0.03, 0.07


@pytest.fixture(scope="module")
def null_cells():
    out = {}
    for code in "BGC":
        for n in (50, 200):
            cfg = config_from_mapping({"n": n, "phenotypes": code, "replicates": NULL_REPS,
                                       "seed": 1000 + n + ord(code)})
            out[code, n] = run_experiment(cfg)
    return out


def test_c1_type_one_error_univariate(null_cells, acceptance):
    rates = {f"{c}{n}": s.rejection_rate for (c, n), s in null_cells.items()}
    ok = all(LOW <= r <= HIGH for r in rates.values())
    acceptance(1, ok, " ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    assert ok


def test_c2_type_one_error_multivariate(acceptance):
    rates = {}
    for i, code in enumerate(("GGG", "CCC", "BGC")):
        cfg = config_from_mapping({"n": 100, "phenotypes": code, "replicates": NULL_REPS, "seed": 2000 + i})
        rates[code] = run_experiment(cfg).rejection_rate
    ok = all(LOW <= r <= HIGH for r in rates.values())
    acceptance(2, ok, " ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    assert ok


def test_c3_pvalue_uniformity(null_cells, acceptance):
    p = null_cells["G", 200].p_values
    d = stats.kstest(p, "uniform").statistic
    acceptance(3, d <= 0.06, f"KS={d:.4f} over {len(p)} p-values")
    assert d <= 0.06


MC_MIXTURES = 2


def test_c4_oracle_equivalence(acceptance):
    cfg = SimConfig(n=100, seed=404)
    gaps, worst_z, checked = [], 0.0, 0
    for r in range(20):
        G, Y = simulate_dataset(cfg, r)
        res = gsu_test(G, Y, GsuOptions(permutations=5000, seed=r))
        gaps.append(abs(res.p_asymptotic - res.p_permutation))
        if r >= MC_MIXTURES:
            continue
        Kc, Sc, _ = centered_kernels(G, Y)
        mix = null_mixture(eigen_spectrum(Kc, Sc), G.n)
        draws = mc_samples(mix, 1_000_000, seed=r)
        for x in np.quantile(draws, np.linspace(0.02, 0.98, 20)):
            p = davies_survival(mix, x)[0]
            se = math.sqrt(p * (1 - p) / draws.size)
            worst_z = max(worst_z, abs(np.mean(draws > x) - p) / se)
            checked += 1
    ok = max(gaps) <= 0.05 and worst_z <= 3 and checked == 20 * MC_MIXTURES
    acceptance(4, ok, f"max|p_asym-p_perm|={max(gaps):.4f}; davies vs MC worst {worst_z:.2f} SE "
                      f"over {checked} points")
    assert ok


def test_c5_closed_form_mixtures(acceptance):
    half = survival(ChiSquareMixture([0.5, 0.5]), 1.99573).p
    unit = survival(ChiSquareMixture([1.0]), 2.8415).p
    exact_q = stats.chi2.ppf(0.95, 1) - 1
    unit_exact = survival(ChiSquareMixture([1.0]), exact_q).p
    literal = abs(half - 0.05) <= 1e-6 and abs(unit - 0.05) <= 1e-6
    # 2.8415 is the 1-df quantile rounded to 4 decimals; the true tail there is 0.04999877
    sound = (abs(half - 0.05) <= 1e-6 and abs(unit - stats.chi2.sf(3.8415, 1)) <= 1e-9
             and abs(unit_exact - 0.05) <= 1e-9)
    acceptance(5, literal, f"{{0.5,0.5}}@1.99573 -> {half:.8f}; {{1}}@2.8415 -> {unit:.8f} "
                           f"(exact chi2 tail {stats.chi2.sf(3.8415, 1):.8f}); "
                           f"{{1}}@exact quantile -> {unit_exact:.10f}; "
                           "literal {1} target unattainable (rounded quantile)")
    assert sound


@pytest.mark.xfail(strict=True, reason="2.8415 is a rounded quantile; the true tail misses 0.05 by 1.23e-6")
def test_c5_literal_unit_weight():
    assert abs(survival(ChiSquareMixture([1.0]), 2.8415).p - 0.05) <= 1e-6


def test_c6_centering_identities(acceptance):
    rng = np.random.default_rng(6)
    worst_sum, worst_proj = 0.0, 0.0
    for n in (2, 5, 50, 200):
        a = rng.normal(size=(n, n))
        mats = [a + a.T]
        G = sk.GenotypeMatrix(rng.integers(0, 3, size=(n, 8)).astype(float))
        mats.append(sk.ibs_similarity(G).values)
        mats.append(sk.ed_phenotype_similarity(sk.rank_quantile_transform(rng.normal(size=(n, 2)))).values)
        for S in mats:
            scale = max(np.abs(S).max(), 1e-300)
            C = sk.center_similarity(S).values
            worst_sum = max(worst_sum, np.abs(C.sum(axis=0)).max() / scale, np.abs(C.sum(axis=1)).max() / scale)
            P = sk.covariate_adjusted_center(S, np.ones((n, 1))).values
            worst_proj = max(worst_proj, np.abs(P - C).max() / scale)
    ok = worst_sum <= 1e-10 and worst_proj <= 1e-10
    acceptance(6, ok, f"max row/col sum {worst_sum:.2e}; intercept projection vs centering {worst_proj:.2e}")
    assert ok


def test_c7_u_identities(acceptance):
    rng = np.random.default_rng(7)
    worst, exact = 0.0, True
    for n in (2, 3, 10, 57, 120, 200):
        a, b = rng.normal(size=(2, n, n))
        K = sk.center_similarity(a + a.T).values
        S = sk.center_similarity(b + b.T).values
        ref = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    ref += K[i, j] * S[i, j]
        ref /= n * (n - 1)
        u = compute_u(K, S).U
        worst = max(worst, abs(u - ref) / abs(ref))
        exact &= u == compute_u(S, K).U
    ok = worst <= 1e-12 and exact
    acceptance(7, ok, f"max relative gap to double loop {worst:.2e}; interchangeable exactly: {exact}")
    assert ok


def population_moments(maf, beta, model, N=4_000_000, bins=4000, seed=0, chunk=500_000):
    """Near-exact (mu, zeta1) for the population-centered wIBS x rank-ED kernel.

    The centered genetic kernel splits into per-variant terms that depend only
    on the two genotypes at that variant, so every sum over subject pairs of a
    large reference sample reduces to products of per-(variant, genotype)
    histograms of the phenotype quantile. Genotype centering uses the exact
    Binomial(2, maf) law; the phenotype quantile is N(0, 1), for which
    E exp(-(q - Q)^2) = exp(-q^2 / 3) / sqrt(3) and the grand mean is 1/sqrt(5).
    """
    M = maf.size
    w = sk.maf_weights(maf).w
    law = np.stack([(1 - maf) ** 2, 2 * maf * (1 - maf), maf**2])
    dist = np.stack([sum(law[u] * abs(v - u) for u in range(3)) for v in range(3)])
    dist_mean = (law * dist).sum(axis=0)
    c = np.empty((M, 3, 3))
    for v in range(3):
        for u in range(3):
            c[:, v, u] = -abs(v - u) + dist[v] + dist[u] - dist_mean
    c *= (w / (2 * w.sum()))[:, None, None]

    rng = np.random.default_rng(seed)
    gs, ys = [], []
    for start in range(0, N, chunk):
        g = rng.binomial(2, maf, size=(min(chunk, N - start), M))
        ys.append(simulate_phenotype(sk.GenotypeMatrix(g.astype(float)), model, beta, rng.integers(2**63)))
        gs.append(g.astype(np.int8))
    g, y = np.concatenate(gs), np.concatenate(ys)
    q = stats.norm.ppf((stats.rankdata(y) - 0.5) / N)
    edges = np.linspace(q.min() - 1e-9, q.max() + 1e-9, bins + 1)
    b = np.clip(np.searchsorted(edges, q) - 1, 0, bins - 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    mh = np.exp(-mid**2 / 3) / math.sqrt(3)
    h = np.exp(-np.subtract.outer(mid, mid) ** 2) - mh[:, None] - mh[None, :] + 1 / math.sqrt(5)
    hd = np.diag(h)

    H = np.zeros((M, 3, bins))
    for m in range(M):
        for v in range(3):
            H[m, v] = np.bincount(b[g[:, m] == v], minlength=bins)
    R = (H.reshape(3 * M, bins) @ h).reshape(M, 3, bins)
    total = 0.0
    row = np.zeros(N)
    for m in range(M):
        T = R[m] @ H[m].T
        T -= np.diag(H[m] @ hd)
        total += np.sum(c[m] * T)
        gm = g[:, m]
        row += np.einsum("nu,un->n", c[m][gm], R[m][:, b]) - c[m][gm, gm] * hd[b]
    mu = total / (N * (N - 1.0))
    zeta1 = (row / (N - 1)).var(ddof=1)
    return mu, zeta1, 2 * math.sqrt(zeta1 / N)


def test_c8_asymptotic_normality_under_alternative(acceptance):
    cfg = config_from_mapping({"n": 500, "M": 30, "maf_spectrum": "uniform:0.05:0.5", "mu_beta": 1.5,
                               "sigma2_beta": 0.01, "causal_fraction": 0.5, "fixed_design": "true",
                               "replicates": 500, "seed": 8})
    design = draw_design(cfg)
    mu, zeta1, mu_se = population_moments(design.maf, design.betas[0], cfg.models()[0])
    # population weights keep the genetic kernel a fixed function across replicates
    opts = GsuOptions(variant_weights=sk.maf_weights(design.maf).w)
    us = np.array([compute_u(*centered_kernels(*simulate_dataset(cfg, r, design), opts)[:2]).U
                   for r in range(cfg.replicates)])
    z = math.sqrt(cfg.n) * (us - mu) / (2 * math.sqrt(zeta1))
    ks = stats.kstest(z, "norm").statistic
    se = math.hypot(us.std(ddof=1) / math.sqrt(us.size), mu_se)
    dev = (us.mean() - mu) / se
    ok = ks <= 0.08 and abs(dev) <= 3
    acceptance(8, ok, f"KS={ks:.4f}; mean U {us.mean():.6g} vs mu {mu:.6g} ({dev:+.2f} SE)")
    assert ok


def test_c9_power_sample_size_consistency(acceptance):
    rng = np.random.default_rng(9)
    bad, zero_bad = 0, 0
    for _ in range(100):
        k = int(rng.integers(1, 6))
        mix = ChiSquareMixture(rng.uniform(0.05, 1, k) * rng.choice([-1, 1], k, p=[0.2, 0.8]))
        mu, zeta1 = rng.uniform(1e-3, 0.5), rng.uniform(1e-3, 1.0)
        alpha, beta = rng.uniform(0.001, 0.1), rng.uniform(0.5, 0.99)
        res = required_sample_size(AlternativeMoments(mu, zeta1), mix, alpha, beta)
        if _power_at(res.n, mu, zeta1, res.q_crit) < beta:
            bad += 1
        elif res.n > 2 and _power_at(res.n - 1, mu, zeta1, res.q_crit) >= beta:
            bad += 1
        half = required_sample_size(AlternativeMoments(mu, zeta1), mix, alpha, 0.5, q_crit=res.q_crit)
        zero_bad += half.n != max(2, math.ceil(res.q_crit / mu))
    ok = bad == 0 and zero_bad == 0
    acceptance(9, ok, f"{bad} bracket violations and {zero_bad} half-power mismatches in 100 sets")
    assert ok


def test_c10_power_monotone_in_n(acceptance):
    rates, ses = [], []
    for n in (50, 100, 200, 500):
        cfg = config_from_mapping({"n": n, "M": 30, "maf_spectrum": "uniform:0.05:0.5", "mu_beta": 0.12,
                                   "sigma2_beta": 0.005, "causal_fraction": 0.3, "fixed_design": "true",
                                   "replicates": 1000, "seed": 10})
        s = run_experiment(cfg)
        rates.append(s.rejection_rate)
        ses.append(s.mc_stderr)
    ok = all(rates[k + 1] >= rates[k] - 2 * math.hypot(ses[k], ses[k + 1]) for k in range(3))
    acceptance(10, ok, "power " + " ".join(f"n{n}={r:.3f}" for n, r in zip((50, 100, 200, 500), rates)))
    assert ok


def test_c11_determinism_across_threads(acceptance):
    cfgs = [SimConfig(n=60, replicates=40, seed=11),
            config_from_mapping({"n": 60, "phenotypes": "BGC", "mu_beta": 0.5, "sigma2_beta": 0.1,
                                 "replicates": 40, "seed": 12, "permutations": 100})]
    same = True
    for cfg in cfgs:
        a, b, c = run_experiment(cfg, threads=1), run_experiment(cfg, threads=8), run_experiment(cfg, threads=8)
        for x, y in ((a, b), (b, c)):
            same &= (np.array(x.p_values).tobytes() == np.array(y.p_values).tobytes()
                     and x.statistics == y.statistics and x.p_permutation == y.p_permutation)
    acceptance(11, same, "p-value tables bitwise identical for threads 1 and 8")
    assert same
