"""The GSU statistic, its eigen-spectrum null law, and p-values."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import simkernel as sk
from .qfdist import ChiSquareMixture, QfAccuracy, QfError, survival

logger = logging.getLogger(__name__)

SPECTRUM_TOL = 1e-10
MAX_MIXTURE_TERMS = 10_000
MIN_PERMUTATIONS = 100


class DegenerateKernelError(ValueError):
    """A centered similarity matrix has no usable spectrum."""


@dataclass(frozen=True)
class GsuStatistic:
    U: float
    n: int

    @property
    def scaled(self) -> float:
        return self.n * self.U


@dataclass(frozen=True)
class EigenSpectrum:
    genetic_eigs: np.ndarray
    phenotypic_eigs: np.ndarray
    truncation_tol: float
    dropped_mass: tuple  # (genetic, phenotypic) sum of |truncated eigenvalues|
    dropped_count: tuple = (0, 0)


@dataclass(frozen=True)
class NullMixture(ChiSquareMixture):
    """Null law of ``n U``; records what was cut from the cross-product grid."""

    dropped_terms: int = 0
    dropped_mass: float = 0.0


@dataclass
class TestResult:
    statistic: GsuStatistic
    p_asymptotic: Optional[float]
    p_engine: Optional[str]
    p_permutation: Optional[float] = None
    permutations_used: int = 0
    diagnostics: dict = field(default_factory=dict)


def _arr(M) -> np.ndarray:
    return M.values if hasattr(M, "values") else np.asarray(M, dtype=float)


def _zero_diag(a: np.ndarray) -> np.ndarray:
    a0 = np.array(a, dtype=float, copy=True)
    np.fill_diagonal(a0, 0.0)
    return a0


def compute_u(K, S) -> GsuStatistic:
    """``U = sum_{i != j} K_ij S_ij / (n (n - 1))`` for two centered matrices."""
    k = _arr(K)
    s = _arr(S)
    if k.shape != s.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"centered matrices must be square and of equal size, got {k.shape} and {s.shape}")
    ka = getattr(K, "source", {}).get("subject_ids")
    sa = getattr(S, "source", {}).get("subject_ids")
    if ka is not None and sa is not None and tuple(ka) != tuple(sa):
        raise ValueError("centered matrices use different subject orderings")
    n = k.shape[0]
    prod = k * s
    np.fill_diagonal(prod, 0.0)
    return GsuStatistic(float(prod.sum()) / (n * (n - 1)), n)


def _spectrum(a: np.ndarray, name: str) -> np.ndarray:
    try:
        e = np.linalg.eigvalsh(_zero_diag(a))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"eigendecomposition of the {name} matrix failed: n={a.shape[0]}, "
            f"max|entry|={np.abs(a).max():.3g}, finite={np.isfinite(a).all()}, "
            f"asymmetry={np.abs(a - a.T).max():.3g}"
        ) from exc
    return e[np.argsort(-np.abs(e), kind="stable")]


def _truncate(e: np.ndarray, tol: float):
    if e.size == 0 or e[0] == 0.0:
        return e[:0], float(np.abs(e).sum()), e.size
    keep = np.abs(e) >= tol * abs(e[0])
    return e[keep], float(np.abs(e[~keep]).sum()), int((~keep).sum())


def eigen_spectrum(K, S, tol: float = SPECTRUM_TOL) -> EigenSpectrum:
    """Eigenvalues of the diagonal-zeroed centered matrices, largest magnitude first.

    Eigenvalues smaller than ``tol`` times the largest magnitude are dropped
    and their absolute mass is reported.
    """
    eg, mg, cg = _truncate(_spectrum(_arr(K), "genetic"), tol)
    ep, mp, cp = _truncate(_spectrum(_arr(S), "phenotypic"), tol)
    return EigenSpectrum(eg, ep, tol, (mg, mp), (cg, cp))


def null_mixture(spec: EigenSpectrum, n: int, tol: float = SPECTRUM_TOL,
                 max_terms: int = MAX_MIXTURE_TERMS) -> NullMixture:
    """Centered chi-square mixture with weights ``(eta_t / n) (lambda_s / n)``.

    At most ``max_terms`` weights (largest magnitude) are kept.
    """
    if spec.genetic_eigs.size == 0 or spec.phenotypic_eigs.size == 0:
        raise DegenerateKernelError("degenerate kernel: empty retained spectrum")
    w = np.multiply.outer(spec.genetic_eigs / n, spec.phenotypic_eigs / n).ravel()
    mag = np.abs(w)
    keep = mag >= tol * mag.max()
    if keep.sum() > max_terms:
        top = np.argpartition(-mag, max_terms - 1)[:max_terms]
        keep = np.zeros_like(keep)
        keep[top] = True
    dropped = w[~keep]
    kept = w[keep]
    kept = kept[np.argsort(-np.abs(kept), kind="stable")]
    return NullMixture(kept, True, int(dropped.size), float(np.abs(dropped).sum()))


def permutation_moments(K, S):
    """Exact mean and variance of ``n U`` over all relabelings of ``S``.

    Closed-form Mantel moments of ``sum_{i != j} a_ij b_pi(i)pi(j)`` for
    symmetric matrices; diagonals are ignored.
    """
    a = _zero_diag(_arr(K))
    b = _zero_diag(_arr(S))
    n = a.shape[0]
    if n < 4:
        raise ValueError("permutation moments need n >= 4")

    def parts(m):
        r = m.sum(axis=1)
        return m.sum(), np.sum(m * m), np.sum(r * r)

    s1, s2, s3 = parts(a)
    t1, t2, t3 = parts(b)
    n1, n2, n3 = n * (n - 1), n * (n - 1) * (n - 2), n * (n - 1) * (n - 2) * (n - 3)
    mean = s1 * t1 / n1
    second = (2 * s2 * t2 / n1 + 4 * (s3 - s2) * (t3 - t2) / n2
              + (s1 * s1 + 2 * s2 - 4 * s3) * (t1 * t1 + 2 * t2 - 4 * t3) / n3)
    var = max(second - mean * mean, 0.0)
    return float(mean / (n - 1)), float(var / (n - 1) ** 2)


def asymptotic_pvalue(stat: GsuStatistic, mixture: ChiSquareMixture, acc: QfAccuracy = QfAccuracy(),
                      seed=0, engines: Sequence[str] = ("davies", "liu", "montecarlo"),
                      location: float = 0.0, scale: float = 1.0):
    """P(Q > x) under the null mixture, with engine fallback.

    ``x = (n U - location) * scale``; the defaults evaluate at ``n U``.
    Returns ``(p, engine, diagnostics)``.
    """
    x = (stat.scaled - location) * scale
    res = survival(mixture, x, acc, seed=seed, engines=engines)
    diag = {"error_bound": res.error_bound, "clamped": res.clamped, "fallback_notes": res.notes,
            "mixture_terms": len(mixture), "evaluated_at": x}
    if isinstance(mixture, NullMixture):
        diag["mixture_dropped_terms"] = mixture.dropped_terms
        diag["mixture_dropped_mass"] = mixture.dropped_mass
    return res.p, res.engine, diag


def _perm_rng(seed, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def permutation_pvalue(K, S, B: int, seed=0):
    """Add-one permutation p-value ``(1 + #{U_b >= U_obs}) / (B + 1)``.

    Subjects of ``S`` are relabeled (rows and columns together); the
    generator for replicate ``b`` is derived from ``(seed, b)``.
    """
    if B < MIN_PERMUTATIONS:
        raise ValueError(f"at least {MIN_PERMUTATIONS} permutations are required, got {B}")
    k0 = _zero_diag(_arr(K))
    s = _arr(S)
    n = s.shape[0]
    u_obs = float(np.sum(k0 * s))
    slack = 1e-12 * max(np.abs(k0).sum() * np.abs(s).max(), 1e-300)
    hits = 0
    for b in range(B):
        pi = _perm_rng(seed, b).permutation(n)
        if float(np.sum(k0 * s[np.ix_(pi, pi)])) >= u_obs - slack:
            hits += 1
    return (1 + hits) / (B + 1), B


# --------------------------------------------------------------------------
# End-to-end test
# --------------------------------------------------------------------------


@dataclass
class GsuOptions:
    genetic_kernel: str = "wibs"  # ibs | wibs | ed
    pheno_kernel: str = "ed"  # ed | ed-corr
    pheno_weights: Optional[np.ndarray] = None
    variant_weights: Optional[np.ndarray] = None  # overrides MAF weights
    covariates: Optional[np.ndarray] = None  # design incl. intercept
    covariate_mode: str = "projection"  # projection | residualize
    missing: str = "impute"  # impute | drop
    permutations: int = 0
    seed: int = 0
    spectrum_tol: float = SPECTRUM_TOL
    max_mixture_terms: int = MAX_MIXTURE_TERMS
    accuracy: QfAccuracy = field(default_factory=QfAccuracy)
    engines: tuple = ("davies", "liu", "montecarlo")
    # standardize n U to its exact permutation mean/variance before the mixture lookup
    small_sample_correction: bool = True


def genetic_similarity(G: sk.GenotypeMatrix, maf: np.ndarray, opts: GsuOptions) -> sk.SimilarityMatrix:
    if opts.genetic_kernel == "ibs":
        return sk.ibs_similarity(G)
    if opts.variant_weights is not None:
        w = np.asarray(opts.variant_weights, dtype=float)
        wv = sk.WeightVector(w, float(2.0 * w.sum()))
    else:
        wv = sk.maf_weights(maf)
    if opts.genetic_kernel == "wibs":
        return sk.wibs_similarity(G, wv)
    if opts.genetic_kernel == "ed":
        # scale so the exponent is at most 2, like the wIBS range
        return sk.ed_genotype_similarity(G, sk.WeightVector(wv.w / wv.upsilon, 0.5))
    raise ValueError(f"unknown genetic kernel {opts.genetic_kernel!r}")


def phenotype_similarity(Y: sk.PhenotypeTable, opts: GsuOptions) -> sk.SimilarityMatrix:
    y = Y.values
    if opts.covariates is not None and opts.covariate_mode == "residualize":
        y = sk.residualize(y, opts.covariates)
    q = sk.rank_quantile_transform(y)
    if opts.pheno_kernel == "ed":
        omega = Y.weights if opts.pheno_weights is None else opts.pheno_weights
        return sk.ed_phenotype_similarity(q, omega)
    if opts.pheno_kernel == "ed-corr":
        return sk.correlation_adjusted_similarity(q)
    raise ValueError(f"unknown phenotype kernel {opts.pheno_kernel!r}")


def centered_kernels(G: sk.GenotypeMatrix, Y: sk.PhenotypeTable, opts: Optional[GsuOptions] = None):
    """Build both centered similarity matrices for aligned ``G`` and ``Y``.

    Returns ``(K_centered, S_centered, info)``.
    """
    opts = opts or GsuOptions()
    if G.n != Y.n:
        raise ValueError(f"genotype and phenotype data disagree on n ({G.n} vs {Y.n})")
    G2, maf, keep = sk.prepare_genotypes(G, opts.missing)
    X = opts.covariates
    if keep.size < G.n:
        Y = Y.take_subjects(keep)
        if X is not None:
            X = np.asarray(X)[keep]
            opts = _replace(opts, covariates=X)
    if G2.m == 0:
        raise DegenerateKernelError("degenerate kernel: no polymorphic variants")
    if opts.variant_weights is not None and len(opts.variant_weights) != G2.m:
        raise ValueError("variant_weights must match the number of polymorphic variants")
    K = genetic_similarity(G2, maf, opts)
    S = phenotype_similarity(Y, opts)
    if X is not None and opts.covariate_mode == "projection":
        Kc = sk.covariate_adjusted_center(K, X)
        Sc = sk.covariate_adjusted_center(S, X)
    else:
        Kc = sk.center_similarity(K)
        Sc = sk.center_similarity(S)
    info = {"n": G2.n, "variants_used": G2.m, "variants_dropped": G.m - G2.m,
            "subjects_dropped": G.n - G2.n}
    return Kc, Sc, info


def _replace(opts: GsuOptions, **kw) -> GsuOptions:
    import dataclasses

    return dataclasses.replace(opts, **kw)


def gsu_test(G: sk.GenotypeMatrix, Y: sk.PhenotypeTable, options: Optional[GsuOptions] = None) -> TestResult:
    """Run the GSU association test for aligned genotype and phenotype data."""
    opts = options or GsuOptions()
    Kc, Sc, info = centered_kernels(G, Y, opts)
    stat = compute_u(Kc, Sc)
    diag = dict(info)
    if not np.any(Sc.values) or not np.any(Kc.values):
        warnings.warn("a centered similarity matrix is identically zero; U = 0 and p = 1", RuntimeWarning,
                      stacklevel=2)
        diag["degenerate"] = True
        p_perm = 1.0 if opts.permutations else None
        return TestResult(stat, 1.0, "degenerate", p_perm, opts.permutations, diag)
    spec = eigen_spectrum(Kc, Sc, opts.spectrum_tol)
    diag["spectrum"] = {"genetic_retained": int(spec.genetic_eigs.size),
                        "phenotypic_retained": int(spec.phenotypic_eigs.size),
                        "dropped_mass": list(spec.dropped_mass),
                        "truncation_tol": spec.truncation_tol}
    mixture = null_mixture(spec, stat.n, opts.spectrum_tol, opts.max_mixture_terms)
    location, scale = 0.0, 1.0
    if opts.small_sample_correction and stat.n >= 4:
        perm_mean, perm_var = permutation_moments(Kc, Sc)
        if perm_var > 0:
            location, scale = perm_mean, float(np.sqrt(mixture.variance / perm_var))
        diag["small_sample_correction"] = {"location": location, "scale": scale}
    p, engine, pdiag = asymptotic_pvalue(stat, mixture, opts.accuracy, seed=opts.seed, engines=opts.engines,
                                         location=location, scale=scale)
    diag.update(pdiag)
    p_perm = None
    used = 0
    if opts.permutations:
        p_perm, used = permutation_pvalue(Kc, Sc, opts.permutations, opts.seed)
    return TestResult(stat, p, engine, p_perm, used, diag)
