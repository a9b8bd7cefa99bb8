"""Synthetic genotype/phenotype data and replicate experiments.

Genotypes are independent Binomial(2, maf) draws with per-variant MAFs taken
from a configurable spectrum; there is no linkage disequilibrium. Phenotypes
follow logistic, linear-Gaussian or Cauchy models with uniform effects.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import simkernel as sk
from .gsucore import DegenerateKernelError, GsuOptions, gsu_test
from .qfdist import QfError

logger = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.01
PHENOTYPE_CODES = {"B": "binary-logistic", "G": "gaussian-linear", "C": "cauchy"}


class ExperimentFailed(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# MAF spectrum
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MafSpectrum:
    """Distribution of per-variant minor allele frequencies.

    ``rare``: with probability ``common_fraction`` draw Uniform(common_low,
    0.5), otherwise ``low + (high - low) * Beta(a, b)``.
    ``fixed``: every variant has MAF ``low``.
    ``uniform``: Uniform(low, high).
    """

    kind: str = "rare"
    low: float = 0.001
    high: float = 0.05
    a: float = 1.0
    b: float = 3.0
    common_fraction: float = 0.2
    common_low: float = 0.05

    @classmethod
    def parse(cls, text: str) -> "MafSpectrum":
        parts = text.strip().split(":")
        kind = parts[0]
        try:
            nums = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise ConfigError(f"bad maf_spectrum {text!r}") from exc
        if kind == "rare":
            names = ["low", "high", "common_fraction"]
            return cls("rare", **dict(zip(names, nums)))
        if kind == "fixed" and len(nums) == 1:
            return cls("fixed", low=nums[0], high=nums[0])
        if kind == "uniform" and len(nums) == 2:
            return cls("uniform", low=nums[0], high=nums[1])
        raise ConfigError(f"bad maf_spectrum {text!r}; use rare[:low:high:common_fraction], fixed:F or uniform:LO:HI")

    def draw(self, M: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(M, self.low)
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, M)
        common = rng.random(M) < self.common_fraction
        rare = self.low + (self.high - self.low) * rng.beta(self.a, self.b, M)
        return np.where(common, rng.uniform(self.common_low, 0.5, M), rare)

    def describe(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.low}"
        if self.kind == "uniform":
            return f"uniform:{self.low}:{self.high}"
        return f"rare:{self.low}:{self.high}:{self.common_fraction}"


def simulate_genotypes(n: int, M: int, maf_spectrum: MafSpectrum = MafSpectrum(), seed=0,
                       maf: Optional[np.ndarray] = None) -> sk.GenotypeMatrix:
    """n x M genotypes, Binomial(2, maf) per entry; pass ``maf`` to fix frequencies."""
    rng = np.random.default_rng(seed)
    if maf is None:
        maf = maf_spectrum.draw(M, rng)
    g = rng.binomial(2, maf, size=(n, M)).astype(float)
    return sk.GenotypeMatrix(g)


# --------------------------------------------------------------------------
# Phenotype models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectSpec:
    """Uniform effects with mean ``mu_beta`` and variance ``sigma2_beta`` on a causal subset."""

    mu_beta: float = 0.0
    sigma2_beta: float = 0.0
    causal_fraction: float = 0.2
    causal_indices: Optional[tuple] = None

    def __post_init__(self):
        if self.sigma2_beta < 0:
            raise ConfigError("sigma2_beta must be nonnegative")
        if not 0 < self.causal_fraction <= 1:
            raise ConfigError("causal_fraction must lie in (0, 1]")

    def draw(self, M: int, rng: np.random.Generator) -> np.ndarray:
        if self.causal_indices is not None:
            idx = np.asarray(self.causal_indices, dtype=int)
        else:
            k = max(1, int(round(self.causal_fraction * M)))
            idx = np.sort(rng.choice(M, size=k, replace=False))
        half = math.sqrt(3.0 * self.sigma2_beta)
        beta = np.zeros(M)
        beta[idx] = rng.uniform(self.mu_beta - half, self.mu_beta + half, idx.size)
        return beta


@dataclass(frozen=True)
class PhenotypeModel:
    kind: str = "gaussian-linear"  # binary-logistic | gaussian-linear | cauchy
    intercept: float = 0.0
    noise_var: float = 1.0
    cauchy_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in PHENOTYPE_CODES.values():
            raise ConfigError(f"unknown phenotype model {self.kind!r}")
        if self.noise_var <= 0 or self.cauchy_scale <= 0:
            raise ConfigError("noise variance and Cauchy scale must be positive")

    @property
    def is_binary(self) -> bool:
        return self.kind == "binary-logistic"


def simulate_phenotype(G: sk.GenotypeMatrix, model: PhenotypeModel, beta: np.ndarray, seed=0) -> np.ndarray:
    """One phenotype column for genotypes ``G`` and per-variant effects ``beta``."""
    rng = np.random.default_rng(seed)
    eta = model.intercept + G.values @ np.asarray(beta, dtype=float)
    n = G.n
    if model.kind == "binary-logistic":
        prob = 1.0 / (1.0 + np.exp(-eta))
        return (rng.random(n) < prob).astype(float)
    if model.kind == "gaussian-linear":
        return eta + rng.normal(0.0, math.sqrt(model.noise_var), n)
    return eta + model.cauchy_scale * rng.standard_cauchy(n)


# --------------------------------------------------------------------------
# Experiment configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    M: int = 30
    maf_spectrum: MafSpectrum = MafSpectrum()
    phenotypes: tuple = ("gaussian-linear",)
    effects: EffectSpec = EffectSpec()
    distinct_causal: bool = True
    fixed_design: bool = False
    intercept: float = 0.0
    noise_var: float = 1.0
    cauchy_scale: float = 1.0
    replicates: int = 1000
    alpha: float = 0.05
    seed: int = 0
    genetic_kernel: str = "wibs"
    pheno_kernel: str = "ed"
    permutations: int = 0

    def __post_init__(self):
        if self.n < 2 or self.M < 1:
            raise ConfigError("need n >= 2 and M >= 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")

    def models(self) -> List[PhenotypeModel]:
        return [PhenotypeModel(k, self.intercept, self.noise_var, self.cauchy_scale) for k in self.phenotypes]

    def gsu_options(self) -> GsuOptions:
        return GsuOptions(genetic_kernel=self.genetic_kernel, pheno_kernel=self.pheno_kernel,
                          permutations=self.permutations)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["maf_spectrum"] = self.maf_spectrum.describe()
        d["phenotypes"] = list(self.phenotypes)
        return d


_INT_KEYS = {"n", "M", "replicates", "seed", "permutations"}
_FLOAT_KEYS = {"intercept", "noise_var", "cauchy_scale", "alpha"}
_BOOL_KEYS = {"distinct_causal", "fixed_design"}
_EFFECT_KEYS = {"mu_beta", "sigma2_beta", "causal_fraction"}
_STR_KEYS = {"genetic_kernel", "pheno_kernel"}
VALID_KEYS = sorted(_INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _EFFECT_KEYS | _STR_KEYS | {"maf_spectrum", "phenotypes"})


def _parse_phenotypes(text: str) -> tuple:
    """``"BGC"`` or a comma list such as ``"binary, gaussian"``."""
    text = text.strip()
    if "," not in text and text and set(text) <= set(PHENOTYPE_CODES):
        return tuple(PHENOTYPE_CODES[c] for c in text)
    aliases = {"binary": "binary-logistic", "gaussian": "gaussian-linear", "cauchy": "cauchy"}
    out = []
    for it in (t.strip() for t in text.split(",")):
        kind = aliases.get(it, it)
        if kind not in PHENOTYPE_CODES.values():
            raise ConfigError(f"unknown phenotype model {it!r}")
        out.append(kind)
    return tuple(out)


def _parse_bool(key: str, text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def config_from_mapping(items: dict) -> SimConfig:
    unknown = sorted(set(items) - set(VALID_KEYS))
    if unknown:
        raise ConfigError(f"invalid config key(s) {unknown}; valid keys: {', '.join(VALID_KEYS)}")
    kw = {}
    eff = {}
    for key, raw in items.items():
        text = str(raw)
        try:
            if key in _INT_KEYS:
                kw[key] = int(text)
            elif key in _FLOAT_KEYS:
                kw[key] = float(text)
            elif key in _BOOL_KEYS:
                kw[key] = _parse_bool(key, text)
            elif key in _EFFECT_KEYS:
                eff[key] = float(text)
            elif key in _STR_KEYS:
                kw[key] = text.strip()
            elif key == "maf_spectrum":
                kw[key] = MafSpectrum.parse(text)
            elif key == "phenotypes":
                kw[key] = _parse_phenotypes(text)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    if eff:
        kw["effects"] = EffectSpec(**eff)
    return SimConfig(**kw)


def read_config(path) -> SimConfig:
    """Parse a ``key = value`` config file; ``#`` starts a comment."""
    items = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            items[key] = value
    return config_from_mapping(items)


# --------------------------------------------------------------------------
# Replicates
# --------------------------------------------------------------------------


@dataclass
class ExperimentSummary:
    rejection_rate: float
    mc_stderr: float
    p_values: List[float]
    failures: int
    replicates: int
    wall_time: float
    config: dict = field(default_factory=dict)
    p_permutation: Optional[List[float]] = None
    statistics: Optional[List[float]] = None
    replicate_index: Optional[List[int]] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, allow_nan=True)

    def table(self) -> str:
        lines = [
            f"{'replicates':<16}{self.replicates}",
            f"{'failures':<16}{self.failures}",
            f"{'alpha':<16}{self.config.get('alpha')}",
            f"{'rejection rate':<16}{self.rejection_rate:.4f}",
            f"{'MC std. error':<16}{self.mc_stderr:.4f}",
            f"{'wall time (s)':<16}{self.wall_time:.1f}",
        ]
        return "\n".join(lines)


@dataclass(frozen=True)
class Design:
    """Quantities held fixed across replicates when ``fixed_design`` is set."""

    maf: Optional[np.ndarray]
    betas: Optional[List[np.ndarray]]


def _replicate_seeds(seed: int, rep: int, k: int):
    return np.random.SeedSequence(seed, spawn_key=(rep,)).spawn(k)


def draw_design(cfg: SimConfig) -> Design:
    if not cfg.fixed_design:
        return Design(None, None)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2**31,)))
    maf = cfg.maf_spectrum.draw(cfg.M, rng)
    return Design(maf, _draw_betas(cfg, rng))


def _draw_betas(cfg: SimConfig, rng: np.random.Generator) -> List[np.ndarray]:
    L = len(cfg.phenotypes)
    if cfg.distinct_causal:
        return [cfg.effects.draw(cfg.M, rng) for _ in range(L)]
    shared = cfg.effects.draw(cfg.M, rng)
    return [shared] * L


def simulate_dataset(cfg: SimConfig, rep: int, design: Optional[Design] = None):
    """Genotypes and phenotype table for replicate ``rep``; fully determined by ``(cfg.seed, rep)``."""
    design = design or Design(None, None)
    L = len(cfg.phenotypes)
    s_geno, s_eff, *s_pheno = _replicate_seeds(cfg.seed, rep, 2 + L)
    G = simulate_genotypes(cfg.n, cfg.M, cfg.maf_spectrum, s_geno, maf=design.maf)
    betas = design.betas if design.betas is not None else _draw_betas(cfg, np.random.default_rng(s_eff))
    models = cfg.models()
    cols = [simulate_phenotype(G, m, b, s) for m, b, s in zip(models, betas, s_pheno)]
    kinds = [sk.BINARY if m.is_binary else sk.CONTINUOUS for m in models]
    Y = sk.PhenotypeTable(np.column_stack(cols), kinds)
    return G, Y


def _one_replicate(cfg: SimConfig, rep: int, design: Design, opts: GsuOptions):
    G, Y = simulate_dataset(cfg, rep, design)
    o = dataclasses.replace(opts, seed=int(np.random.SeedSequence(cfg.seed, spawn_key=(rep, 1)).generate_state(1)[0]))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = gsu_test(G, Y, o)
    except (QfError, DegenerateKernelError, sk.KernelError) as exc:
        logger.debug("replicate %d failed: %s", rep, exc)
        return None
    return res.p_asymptotic, res.p_permutation, res.statistic.U


def run_experiment(cfg: SimConfig, threads: int = 1, options: Optional[GsuOptions] = None) -> ExperimentSummary:
    """Simulate ``cfg.replicates`` datasets, test each, and summarize rejections at ``cfg.alpha``.

    Replicates that fail entirely are excluded and counted; more than 1%
    failures raises :class:`ExperimentFailed`. Output does not depend on
    ``threads``.
    """
    t0 = time.perf_counter()
    opts = options or cfg.gsu_options()
    design = draw_design(cfg)
    reps = range(cfg.replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(lambda r: _one_replicate(cfg, r, design, opts), reps))
    else:
        out = [_one_replicate(cfg, r, design, opts) for r in reps]
    failures = sum(o is None for o in out)
    if failures > MAX_FAILURE_RATE * cfg.replicates:
        raise ExperimentFailed(f"{failures} of {cfg.replicates} replicates failed")
    index = [r for r, o in zip(reps, out) if o is not None]
    ok = [o for o in out if o is not None]
    p = [o[0] for o in ok]
    rate = float(np.mean(np.asarray(p) < cfg.alpha)) if p else float("nan")
    se = math.sqrt(rate * (1 - rate) / len(p)) if p else float("nan")
    perm = [o[1] for o in ok] if opts.permutations else None
    return ExperimentSummary(
        rejection_rate=rate,
        mc_stderr=se,
        p_values=p,
        failures=failures,
        replicates=cfg.replicates,
        wall_time=time.perf_counter() - t0,
        config=cfg.to_dict(),
        p_permutation=perm,
        statistics=[o[2] for o in ok],
        replicate_index=index,
    )
