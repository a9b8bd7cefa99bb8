"""Power and sample size for the GSU test under a fixed alternative."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .gsucore import GsuOptions, centered_kernels, compute_u
from .qfdist import ChiSquareMixture, QfAccuracy, mixture_quantile
from . import simkernel as sk

logger = logging.getLogger(__name__)

MIN_PILOT_N = 20
SMALL_N_WARNING = 100


class NoAssociationError(ValueError):
    """Pilot data show no positive association, so power is undefined."""


class SampleSizeInconsistency(RuntimeError):
    pass


@dataclass(frozen=True)
class AlternativeMoments:
    """Mean ``mu`` of the similarity-product kernel and its variances.

    ``zeta1`` is the variance of the kernel's conditional mean given one
    subject; ``zeta0`` the unconditional variance (diagnostic only).
    """

    mu: float
    zeta1: float
    zeta0: float = float("nan")

    def __post_init__(self):
        if math.isfinite(self.zeta0) and math.isfinite(self.zeta1) and self.zeta0 < self.zeta1:
            raise ValueError(f"zeta0 ({self.zeta0}) must be at least zeta1 ({self.zeta1})")


@dataclass(frozen=True)
class PowerResult:
    power: float
    n: int
    alpha: float
    q_crit: float


@dataclass(frozen=True)
class SampleSizeResult:
    n: int
    target_power: float
    achieved_power: float
    alpha: float
    q_crit: float
    closed_form: float


def estimate_moments(G: sk.GenotypeMatrix, Y: sk.PhenotypeTable,
                     options: Optional[GsuOptions] = None) -> AlternativeMoments:
    """Plug-in estimates of ``mu``, ``zeta1`` and ``zeta0`` from pilot data.

    ``mu`` is the U statistic itself. ``zeta1`` is the sample variance
    over subjects of the row means of the off-diagonal products
    ``K_ij S_ij``; ``zeta0`` the variance of all off-diagonal products.
    """
    if G.n < MIN_PILOT_N:
        raise ValueError(f"pilot data need at least {MIN_PILOT_N} subjects, got {G.n}")
    Kc, Sc, _ = centered_kernels(G, Y, options)
    mu = compute_u(Kc, Sc).U
    if not mu > 0:
        raise NoAssociationError(f"no detectable association in pilot data (estimated mu = {mu:.4g})")
    prod = Kc.values * Sc.values
    n = prod.shape[0]
    off = ~np.eye(n, dtype=bool)
    row_means = np.where(off, prod, 0.0).sum(axis=1) / (n - 1)
    zeta1 = float(np.var(row_means, ddof=1))
    zeta0 = float(np.var(prod[off]))
    return AlternativeMoments(mu, zeta1, zeta0)


def _check(m: AlternativeMoments):
    if not m.mu > 0:
        raise NoAssociationError(f"power needs mu > 0, got {m.mu}")
    if not m.zeta1 > 0:
        raise ValueError(f"power needs zeta1 > 0, got {m.zeta1}")


def _power_at(n: int, mu: float, zeta1: float, q: float) -> float:
    return float(stats.norm.cdf((n * mu - q) / (2.0 * math.sqrt(n * zeta1))))


def critical_value(mixture: ChiSquareMixture, alpha: float, acc: QfAccuracy = QfAccuracy()) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return mixture_quantile(mixture, 1.0 - alpha, acc)


def compute_power(m: AlternativeMoments, mixture: ChiSquareMixture, alpha: float, n: int,
                  q_crit: Optional[float] = None) -> PowerResult:
    """``Phi((n mu - q) / (2 sqrt(n zeta1)))`` with ``q`` the null ``1 - alpha`` quantile."""
    _check(m)
    if n < 2:
        raise ValueError("n must be at least 2")
    if n < SMALL_N_WARNING:
        warnings.warn(f"n={n}: the normal approximation ignores the degenerate remainder and may be poor",
                      RuntimeWarning, stacklevel=2)
    q = critical_value(mixture, alpha) if q_crit is None else q_crit
    return PowerResult(_power_at(n, m.mu, m.zeta1, q), int(n), alpha, q)


def closed_form_n(mu: float, zeta1: float, q: float, beta: float) -> float:
    z = stats.norm.ppf(beta)
    if z == 0.0:
        return q / mu
    disc = z * z * zeta1 + mu * q
    if disc < 0:
        return 0.0
    return (z * math.sqrt(zeta1) + math.sqrt(disc)) ** 2 / mu**2


def required_sample_size(m: AlternativeMoments, mixture: ChiSquareMixture, alpha: float, beta: float,
                         q_crit: Optional[float] = None) -> SampleSizeResult:
    """Smallest ``n`` whose power reaches ``beta``.

    The closed-form bound is ceiled, then checked against the power formula
    at ``n`` and ``n - 1``; a disagreement of more than one subject is
    treated as a numerical fault.
    """
    _check(m)
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    q = critical_value(mixture, alpha) if q_crit is None else q_crit
    bound = closed_form_n(m.mu, m.zeta1, q, beta)
    n0 = max(2, math.ceil(bound))
    n = n0
    if _power_at(n, m.mu, m.zeta1, q) < beta:
        n += 1
    elif n > 2 and _power_at(n - 1, m.mu, m.zeta1, q) >= beta:
        n -= 1
    ok_here = _power_at(n, m.mu, m.zeta1, q) >= beta
    ok_below = n == 2 or _power_at(n - 1, m.mu, m.zeta1, q) < beta
    if not (ok_here and ok_below):
        raise SampleSizeInconsistency(
            f"closed-form n={n0} disagrees with the power formula by more than one subject"
        )
    if n != n0:
        logger.debug("sample size adjusted from %d to %d by the bracket check", n0, n)
    return SampleSizeResult(n, beta, _power_at(n, m.mu, m.zeta1, q), alpha, q, bound)
