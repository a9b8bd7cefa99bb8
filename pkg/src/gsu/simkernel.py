"""Genotype and phenotype similarity matrices and their centered forms."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

GAMMA_COND_LIMIT = 1e12
BINARY = "binary"
CONTINUOUS = "continuous"


class KernelError(ValueError):
    """Invalid input to a kernel or centering routine."""


@dataclass(frozen=True)
class GenotypeMatrix:
    """n x M additive genotype codes; ``nan`` marks a missing call."""

    values: np.ndarray
    subject_ids: Sequence[str] = None
    variant_ids: Sequence[str] = None

    def __post_init__(self):
        g = np.array(self.values, dtype=float)
        if g.ndim != 2:
            raise KernelError("genotype matrix must be 2-dimensional")
        n, m = g.shape
        if n < 2 or m < 1:
            raise KernelError(f"need n >= 2 subjects and M >= 1 variants, got {g.shape}")
        ok = np.isnan(g) | (g == 0) | (g == 1) | (g == 2)
        if not ok.all():
            i, j = np.argwhere(~ok)[0]
            raise KernelError(f"genotype code {float(g[i, j])!r} at subject {i}, variant {j} is not 0/1/2")
        g.setflags(write=False)
        object.__setattr__(self, "values", g)
        sids = list(self.subject_ids) if self.subject_ids is not None else [f"s{i}" for i in range(n)]
        vids = list(self.variant_ids) if self.variant_ids is not None else [f"v{j}" for j in range(m)]
        if len(sids) != n or len(vids) != m:
            raise KernelError("id lists do not match the genotype matrix shape")
        object.__setattr__(self, "subject_ids", tuple(sids))
        object.__setattr__(self, "variant_ids", tuple(vids))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    # subsets of a validated (or imputed) matrix skip re-validation
    def take_subjects(self, idx) -> "GenotypeMatrix":
        idx = np.asarray(idx)
        return _unchecked(self.values[idx], tuple(self.subject_ids[i] for i in idx), self.variant_ids)

    def take_variants(self, idx) -> "GenotypeMatrix":
        idx = np.asarray(idx)
        return _unchecked(self.values[:, idx], self.subject_ids, tuple(self.variant_ids[j] for j in idx))


@dataclass(frozen=True)
class PhenotypeTable:
    """n x L phenotype values with per-column kind tags and weights.

    Weights default to ``1/L`` for every column.
    """

    values: np.ndarray
    kinds: Sequence[str] = None
    weights: Optional[np.ndarray] = None
    names: Sequence[str] = None
    subject_ids: Sequence[str] = None

    def __post_init__(self):
        y = np.array(self.values, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2:
            raise KernelError("phenotype table must be 1- or 2-dimensional")
        n, L = y.shape
        kinds = tuple(self.kinds) if self.kinds is not None else (CONTINUOUS,) * L
        if len(kinds) != L:
            raise KernelError("one kind tag per phenotype column is required")
        for l, k in enumerate(kinds):
            if k not in (BINARY, CONTINUOUS):
                raise KernelError(f"unknown phenotype kind {k!r}")
            if k == BINARY:
                col = y[:, l]
                col = col[~np.isnan(col)]
                if not np.isin(col, (0.0, 1.0)).all():
                    raise KernelError(f"binary phenotype column {l} has values other than 0/1")
        w = np.full(L, 1.0 / L) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != (L,):
            raise KernelError("one weight per phenotype column is required")
        if (w < 0).any():
            raise KernelError("phenotype weights must be nonnegative")
        y.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "weights", w)
        names = tuple(self.names) if self.names is not None else tuple(f"y{l}" for l in range(L))
        object.__setattr__(self, "names", names)
        sids = self.subject_ids if self.subject_ids is not None else [f"s{i}" for i in range(n)]
        object.__setattr__(self, "subject_ids", tuple(sids))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_phenotypes(self) -> int:
        return self.values.shape[1]

    def take_subjects(self, idx) -> "PhenotypeTable":
        idx = np.asarray(idx)
        return PhenotypeTable(self.values[idx], self.kinds, self.weights, self.names,
                              [self.subject_ids[i] for i in idx])


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray
    upsilon: float


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CenteredSimilarityMatrix:
    values: np.ndarray
    source: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# Allele frequencies and weights
# --------------------------------------------------------------------------


def compute_maf(G: GenotypeMatrix) -> np.ndarray:
    """Folded minor allele frequency per variant, over non-missing calls."""
    g = G.values
    observed = ~np.isnan(g)
    count = observed.sum(axis=0)
    empty = np.flatnonzero(count == 0)
    if empty.size:
        raise KernelError(f"variant {G.variant_ids[empty[0]]!r} has no observed genotypes")
    p = np.nansum(g, axis=0) / (2.0 * count)
    return np.minimum(p, 1.0 - p)


def maf_weights(maf) -> WeightVector:
    """``w_m = 1 / sqrt(maf (1 - maf))`` and the scaling constant ``2 * sum(w)``."""
    maf = np.asarray(maf, dtype=float)
    if (maf <= 0).any():
        raise KernelError("monomorphic variant (MAF 0) has no weight; filter monomorphic variants first")
    if (maf > 0.5).any():
        raise KernelError("MAF must not exceed 0.5")
    w = 1.0 / np.sqrt(maf * (1.0 - maf))
    return WeightVector(_frozen(w), float(2.0 * w.sum()))


def prepare_genotypes(G: GenotypeMatrix, missing: str = "impute"):
    """Resolve missing calls and drop monomorphic variants.

    ``missing="impute"`` replaces a missing call by the variant's mean dosage;
    ``missing="drop"`` removes subjects with any missing call. Returns the
    cleaned matrix, its MAFs, and the indices of kept subjects.
    """
    keep = np.arange(G.n)
    if G.has_missing:
        if missing == "drop":
            keep = np.flatnonzero(~np.isnan(G.values).any(axis=1))
            logger.info("dropped %d subjects with missing genotypes", G.n - keep.size)
            G = G.take_subjects(keep)
            maf = compute_maf(G)
        elif missing == "impute":
            maf = compute_maf(G)
            g = G.values.copy()
            dosage = np.nanmean(g, axis=0)
            rows, cols = np.nonzero(np.isnan(g))
            g[rows, cols] = dosage[cols]
            G = _imputed(G, g)
        else:
            raise KernelError(f"unknown missing-genotype policy {missing!r}")
    else:
        maf = compute_maf(G)
    poly = np.flatnonzero(maf > 0)
    if poly.size < maf.size:
        logger.info("dropped %d monomorphic variants", maf.size - poly.size)
        G = G.take_variants(poly)
        maf = maf[poly]
    return G, maf, keep


def _imputed(G: GenotypeMatrix, g: np.ndarray) -> GenotypeMatrix:
    # mean dosages are not 0/1/2 codes, so bypass the code check
    return _unchecked(g, G.subject_ids, G.variant_ids)


def _unchecked(g: np.ndarray, subject_ids, variant_ids) -> GenotypeMatrix:
    if g.shape[0] < 2 or g.shape[1] < 1:
        raise KernelError(f"need n >= 2 subjects and M >= 1 variants, got {g.shape}")
    out = object.__new__(GenotypeMatrix)
    g = np.array(g, dtype=float)
    g.setflags(write=False)
    object.__setattr__(out, "values", g)
    object.__setattr__(out, "subject_ids", tuple(subject_ids))
    object.__setattr__(out, "variant_ids", tuple(variant_ids))
    return out


# --------------------------------------------------------------------------
# Genetic kernels
# --------------------------------------------------------------------------


def _no_missing(G: GenotypeMatrix):
    if G.has_missing:
        raise KernelError("genotype matrix has missing calls; impute or drop them first")


def _check_weights(G: GenotypeMatrix, w: WeightVector):
    if np.shape(w.w) != (G.m,):
        raise KernelError(f"{np.size(w.w)} variant weights for {G.m} variants")


def ibs_similarity(G: GenotypeMatrix) -> SimilarityMatrix:
    """Unweighted identity-by-state similarity, ``mean_m (2 - |g_im - g_jm|) / 2``."""
    _no_missing(G)
    d = cdist(G.values, G.values, "cityblock")
    K = 1.0 - d / (2.0 * G.m)
    np.fill_diagonal(K, 1.0)
    return SimilarityMatrix(_frozen(K), "genetic", {"kernel": "ibs", "M": G.m})


def wibs_similarity(G: GenotypeMatrix, w: WeightVector) -> SimilarityMatrix:
    """Weighted IBS: ``sum_m w_m (2 - |g_im - g_jm|) / upsilon``."""
    _no_missing(G)
    _check_weights(G, w)
    d = cdist(G.values, G.values, "minkowski", p=1, w=w.w)
    K = (2.0 * np.sum(w.w) - d) / w.upsilon
    np.fill_diagonal(K, 2.0 * np.sum(w.w) / w.upsilon)
    return SimilarityMatrix(_frozen(K), "genetic", {"kernel": "wibs", "M": G.m})


def ed_genotype_similarity(G: GenotypeMatrix, w: WeightVector) -> SimilarityMatrix:
    """Gaussian-type similarity ``exp(-sum_m w_m (g_im - g_jm)^2)``."""
    _no_missing(G)
    _check_weights(G, w)
    d2 = cdist(G.values, G.values, "sqeuclidean", w=w.w) if np.any(w.w) else np.zeros((G.n, G.n))
    K = np.exp(-d2)
    np.fill_diagonal(K, 1.0)
    return SimilarityMatrix(_frozen(K), "genetic", {"kernel": "ed", "M": G.m})


# --------------------------------------------------------------------------
# Phenotype kernels
# --------------------------------------------------------------------------


def rank_quantile_transform(Y) -> np.ndarray:
    """Map each column to ``Phi^{-1}((rank - 0.5) / n)``, ties get average ranks.

    Accepts a :class:`PhenotypeTable` or a plain array. A constant column
    maps to zeros and triggers a warning.
    """
    y = Y.values if isinstance(Y, PhenotypeTable) else np.asarray(Y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if n < 2:
        raise KernelError("rank transform needs at least 2 subjects")
    if np.isnan(y).any():
        raise KernelError("phenotype values are missing; missing phenotypes are not imputed")
    r = stats.rankdata(y, method="average", axis=0)
    q = stats.norm.ppf((r - 0.5) / n)
    const = np.flatnonzero(np.ptp(y, axis=0) == 0)
    if const.size:
        warnings.warn(f"constant phenotype column(s) {const.tolist()} contribute nothing", RuntimeWarning,
                      stacklevel=2)
        q[:, const] = 0.0
    return q


def ed_phenotype_similarity(Q, omega=None) -> SimilarityMatrix:
    """``exp(-sum_l omega_l (q_il - q_jl)^2)`` over quantile-transformed phenotypes."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    L = Q.shape[1]
    omega = np.full(L, 1.0 / L) if omega is None else np.asarray(omega, dtype=float)
    if omega.shape != (L,):
        raise KernelError("one weight per phenotype column is required")
    if (omega < 0).any():
        raise KernelError("phenotype weights must be nonnegative")
    d2 = cdist(Q, Q, "sqeuclidean", w=omega) if np.any(omega) else np.zeros((Q.shape[0],) * 2)
    S = np.exp(-d2)
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(_frozen(S), "phenotypic", {"kernel": "ed", "weights": omega.tolist()})


def correlation_adjusted_similarity(Q, cond_limit: float = GAMMA_COND_LIMIT) -> SimilarityMatrix:
    """ED phenotype similarity with a Mahalanobis-type metric.

    ``Gamma`` is the inverse of the (uncentered) second-moment matrix
    ``Q^T Q / n``; the squared distance is divided by ``L``.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    n, L = Q.shape
    moment = Q.T @ Q / n
    cond = np.linalg.cond(moment)
    if not np.isfinite(cond) or cond > cond_limit:
        raise KernelError(
            f"phenotype moment matrix is singular or ill-conditioned (cond={cond:.3g}); "
            "use the unadjusted ED phenotype kernel"
        )
    gamma = np.linalg.inv(moment)
    gamma = 0.5 * (gamma + gamma.T)
    d2 = cdist(Q, Q, "mahalanobis", VI=gamma) ** 2
    S = np.exp(-d2 / L)
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(_frozen(S), "phenotypic", {"kernel": "ed-corr", "gamma": gamma.tolist()})


# --------------------------------------------------------------------------
# Centering
# --------------------------------------------------------------------------


def _values(S) -> np.ndarray:
    return S.values if isinstance(S, (SimilarityMatrix, CenteredSimilarityMatrix)) else np.asarray(S, float)


def _provenance(S) -> dict:
    if isinstance(S, SimilarityMatrix):
        return {"kind": S.kind, **S.provenance}
    if isinstance(S, CenteredSimilarityMatrix):
        return dict(S.source)
    return {}


def center_similarity(S) -> CenteredSimilarityMatrix:
    """Double centering ``(I - J) S (I - J)`` with ``J = 11^T / n``."""
    a = _values(S)
    row = a.mean(axis=1, keepdims=True)
    col = a.mean(axis=0, keepdims=True)
    c = a - row - col + a.mean()
    c = 0.5 * (c + c.T)
    return CenteredSimilarityMatrix(_frozen(c), {**_provenance(S), "centering": "intercept"})


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def residual_projector(X) -> np.ndarray:
    """``I - X (X^T X)^{-1} X^T`` for a full-column-rank design with ``p < n``."""
    X = _design(X)
    n, p = X.shape
    if p >= n:
        raise KernelError(f"covariate design needs fewer columns than subjects (p={p}, n={n})")
    q, r = np.linalg.qr(X)
    d = np.abs(np.diag(r))
    if d.min() <= 1e-10 * max(d.max(), 1.0):
        raise KernelError("covariate design is rank deficient")
    P = np.eye(n) - q @ q.T
    return 0.5 * (P + P.T)


def covariate_adjusted_center(S, X) -> CenteredSimilarityMatrix:
    """``P S P`` with ``P`` the residual projector of the covariate design ``X``.

    ``X`` should contain an intercept column; with the intercept alone this
    reduces to :func:`center_similarity`.
    """
    a = _values(S)
    P = residual_projector(X)
    if P.shape[0] != a.shape[0]:
        raise KernelError("covariate design and similarity matrix disagree on n")
    c = P @ a @ P
    c = 0.5 * (c + c.T)
    return CenteredSimilarityMatrix(_frozen(c), {**_provenance(S), "centering": "covariates",
                                                 "p": _design(X).shape[1]})


def residualize(y, X) -> np.ndarray:
    """Least-squares residuals of each column of ``y`` on ``X``."""
    y = np.asarray(y, dtype=float)
    P = residual_projector(X)
    return P @ y
