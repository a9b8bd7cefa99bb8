"""Tail probabilities of weighted sums of independent 1-df chi-square variables.

Three engines are provided:

* :func:`davies_survival` -- numerical inversion of the characteristic
  function (Davies' algorithm) with an explicit error bound.
* :func:`liu_survival` -- cumulant matching to a scaled noncentral
  chi-square surrogate.
* :func:`mc_survival` -- plain Monte Carlo, used as an oracle.

:func:`survival` chains them with fallback, :func:`mixture_quantile` inverts
the survival function.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

logger = logging.getLogger(__name__)

P_FLOOR = 1e-16
DAVIES_FALLBACK_BOUND = 1e-6
_LOG28 = 0.0866  # log(2) / 8


class QfError(RuntimeError):
    """Raised when an engine cannot produce a tail probability."""


class DaviesFailure(QfError):
    """Davies' inversion gave up (term limit or call limit exceeded)."""

    def __init__(self, message: str, ifault: int):
        super().__init__(message)
        self.ifault = ifault


@dataclass(frozen=True)
class ChiSquareMixture:
    """Law of ``sum_i w_i * chi2_1`` (or ``sum_i w_i * (chi2_1 - 1)`` if centered).

    Zero weights are removed on construction.
    """

    weights: np.ndarray
    centered: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if not np.all(np.isfinite(w)):
            raise ValueError("mixture weights must be finite")
        w = w[w != 0.0]
        if w.size == 0:
            raise ValueError("mixture needs at least one nonzero weight")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def shift(self) -> float:
        """Amount added to an ``x`` on the centered scale to reach the raw scale."""
        return float(self.weights.sum()) if self.centered else 0.0

    @property
    def mean(self) -> float:
        return 0.0 if self.centered else float(self.weights.sum())

    @property
    def variance(self) -> float:
        return 2.0 * float(np.sum(self.weights**2))

    def scaled(self, c: float) -> "ChiSquareMixture":
        return ChiSquareMixture(self.weights * c, self.centered)

    def __len__(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class QfAccuracy:
    target_abs_error: float = 1e-9
    integration_terms_limit: int = 1_000_000
    mc_draws: int = 1_000_000

    def __post_init__(self):
        if not self.target_abs_error > 0:
            raise ValueError("target_abs_error must be positive")


@dataclass
class SurvivalResult:
    p: float
    engine: str
    error_bound: Optional[float] = None
    clamped: bool = False
    notes: list = field(default_factory=list)


def cumulants(m: ChiSquareMixture, order: int = 4) -> np.ndarray:
    """First ``order`` cumulants of the mixture law.

    ``kappa_r = 2**(r-1) (r-1)! sum w**r``, with ``kappa_1`` shifted by
    ``-sum w`` for a centered mixture.
    """
    w = m.weights
    out = np.empty(order)
    for r in range(1, order + 1):
        out[r - 1] = 2.0 ** (r - 1) * math.factorial(r - 1) * np.sum(w**r)
    if m.centered:
        out[0] -= w.sum()
    return out


def _clamp(p: float) -> Tuple[float, bool]:
    q = min(max(p, P_FLOOR), 1.0)
    return q, q != p


# ---------------------------------------------------------------------------
# Davies (1980), algorithm AS 155, central 1-df terms, no normal component.
# ---------------------------------------------------------------------------


def _log1(x, first: bool):
    """log(1+x) (``first``) or log(1+x) - x, elementwise and accurate near 0."""
    x = np.asarray(x, dtype=float)
    if first:
        return np.log1p(x)
    return np.log1p(x) - x


def _exp1(x):
    return np.where(x < -50.0, 0.0, np.exp(np.maximum(x, -50.0)))


class _Davies:
    def __init__(self, lb: np.ndarray, c: float, lim: int, acc: float):
        self.lb = lb
        self.c = c
        self.lim = lim
        self.acc = acc
        self.count = 0
        self.sigsq = 0.0
        self.intl = 0.0
        self.ersm = 0.0
        self.fail = False
        self.lmax = max(float(lb.max()), 0.0)
        self.lmin = min(float(lb.min()), 0.0)
        self.mean = float(lb.sum())
        # |lb| descending; cfe walks it from the smallest up
        self.th = np.argsort(-np.abs(lb), kind="stable")
        self.nterms = 0

    def counter(self):
        self.count += 1
        if self.count > self.lim:
            raise DaviesFailure("Davies: evaluation limit exceeded", 4)

    def errbd(self, u: float) -> Tuple[float, float]:
        self.counter()
        xconst = u * self.sigsq
        sum1 = u * xconst
        u2 = 2.0 * u
        x = u2 * self.lb
        y = 1.0 - x
        xconst += float(np.sum(self.lb / y))
        sum1 += float(np.sum(x * x / y + _log1(-x, False)))
        return float(_exp1(-0.5 * sum1)), xconst

    def ctff(self, accx: float, upn: float) -> Tuple[float, float]:
        u2 = upn
        u1 = 0.0
        c1 = self.mean
        rb = 2.0 * (self.lmax if u2 > 0 else self.lmin)
        while True:
            u = u2 / (1.0 + u2 * rb)
            bound, c2 = self.errbd(u)
            if bound <= accx:
                break
            u1 = u2
            c1 = c2
            u2 *= 2.0
        while (c1 - self.mean) / (c2 - self.mean) < 0.9:
            u = 0.5 * (u1 + u2)
            bound, xconst = self.errbd(u / (1.0 + u * rb))
            if bound > accx:
                u1 = u
                c1 = xconst
            else:
                u2 = u
                c2 = xconst
        return c2, u2

    def truncation(self, u: float, tausq: float) -> float:
        self.counter()
        sum2 = (self.sigsq + tausq) * u * u
        prod1 = 2.0 * sum2
        u2 = 2.0 * u
        x = (u2 * self.lb) ** 2
        big = x > 1.0
        lx = np.log1p(x)
        prod2 = float(np.sum(np.log(x[big])))
        prod3 = float(np.sum(lx[big]))
        s = int(np.count_nonzero(big))
        prod1 += float(np.sum(lx[~big]))
        prod2 += prod1
        prod3 += prod1
        x = float(_exp1(-0.25 * prod2)) / math.pi
        y = float(_exp1(-0.25 * prod3)) / math.pi
        err1 = 1.0 if s == 0 else x * 2.0 / s
        err2 = 2.5 * y if prod3 > 1.0 else 1.0
        if err2 < err1:
            err1 = err2
        x = 0.5 * sum2
        err2 = 1.0 if x <= y else y / x
        return err1 if err1 < err2 else err2

    def findu(self, utx: float, accx: float) -> float:
        ut = utx
        u = ut / 4.0
        if self.truncation(u, 0.0) > accx:
            u = ut
            while self.truncation(u, 0.0) > accx:
                ut *= 4.0
                u = ut
        else:
            ut = u
            u = u / 4.0
            while self.truncation(u, 0.0) <= accx:
                ut = u
                u = u / 4.0
        for divis in (2.0, 1.4, 1.2, 1.1):
            u = ut / divis
            if self.truncation(u, 0.0) <= accx:
                ut = u
        return ut

    def integrate(self, nterm: int, interv: float, tausq: float, mainx: bool):
        inpi = interv / math.pi
        lb2 = 2.0 * self.lb
        # chunk over integration points to bound memory at nterm x r
        chunk = max(1, 2_000_000 // max(self.lb.size, 1))
        ks = np.arange(nterm, -1, -1, dtype=float)
        for start in range(0, ks.size, chunk):
            u = (ks[start:start + chunk] + 0.5) * interv
            x = np.multiply.outer(u, lb2)
            z = np.arctan(x)
            sum1 = -2.0 * u * self.c + z.sum(axis=1)
            sum2 = np.abs(-2.0 * u * self.c) + np.abs(z).sum(axis=1)
            sum3 = -0.5 * self.sigsq * u * u - 0.25 * np.log1p(x * x).sum(axis=1)
            w = inpi * _exp1(sum3) / u
            if not mainx:
                w = w * (1.0 - _exp1(-0.5 * tausq * u * u))
            self.intl += float(np.sum(np.sin(0.5 * sum1) * w))
            self.ersm += float(np.sum(0.5 * sum2 * w))

    def cfe(self, x: float) -> float:
        self.counter()
        axl = abs(x)
        sxl = 1.0 if x > 0 else -1.0
        sum1 = 0.0
        th = self.th
        for j in range(th.size - 1, -1, -1):
            t = th[j]
            if self.lb[t] * sxl > 0:
                lj = abs(self.lb[t])
                axl1 = axl - lj
                axl2 = lj / _LOG28
                if axl1 > axl2:
                    axl = axl1
                else:
                    if axl > axl2:
                        axl = axl2
                    sum1 = (axl - axl1) / lj + j
                    break
        if sum1 > 100.0:
            self.fail = True
            return 1.0
        return 2.0 ** (sum1 / 4.0) / (math.pi * axl * axl)

    def run(self) -> Tuple[float, float]:
        acc1 = self.acc
        xlim = float(self.lim)
        lb = self.lb
        sd = math.sqrt(float(np.sum(2.0 * lb * lb)) + self.sigsq)
        almx = max(self.lmax, -self.lmin)
        utx = 16.0 / sd
        up = 4.5 / sd
        un = -up
        utx = self.findu(utx, 0.5 * acc1)
        c = self.c
        if c != 0.0 and almx > 0.07 * sd:
            tausq = 0.25 * acc1 / self.cfe(c)
            if self.fail:
                self.fail = False
            elif self.truncation(utx, tausq) < 0.2 * acc1:
                self.sigsq += tausq
                utx = self.findu(utx, 0.25 * acc1)
        acc1 *= 0.5

        while True:
            ctup, up = self.ctff(acc1, up)
            d1 = ctup - c
            if d1 < 0.0:
                return 1.0, 0.0
            ctun, un = self.ctff(acc1, un)
            d2 = c - ctun
            if d2 < 0.0:
                return 0.0, 0.0
            intv = 2.0 * math.pi / max(d1, d2)
            xnt = utx / intv
            xntm = 3.0 / math.sqrt(acc1)
            if xnt > xntm * 1.5:
                if xntm > xlim:
                    raise DaviesFailure("Davies: required accuracy needs too many terms", 1)
                ntm = int(math.floor(xntm + 0.5))
                intv1 = utx / ntm
                x = 2.0 * math.pi / intv1
                if x <= abs(c):
                    break
                tausq = 0.33 * acc1 / (1.1 * (self.cfe(c - x) + self.cfe(c + x)))
                if self.fail:
                    break
                acc1 *= 0.67
                self.integrate(ntm, intv1, tausq, False)
                self.nterms += ntm + 1
                xlim -= xntm
                self.sigsq += tausq
                utx = self.findu(utx, 0.25 * acc1)
                acc1 *= 0.75
                continue
            break

        if xnt > xlim:
            raise DaviesFailure("Davies: required accuracy needs too many terms", 1)
        nt = int(math.floor(xnt + 0.5))
        self.integrate(nt, intv, 0.0, True)
        self.nterms += nt + 1
        cdf = 0.5 - self.intl
        # round-off check from the original: acc/10 must be visible next to ersm
        eps_err = self.ersm * np.finfo(float).eps * 8.0
        return cdf, eps_err


def davies_survival(
    m: ChiSquareMixture, x: float, acc: QfAccuracy = QfAccuracy()
) -> Tuple[float, float]:
    """P(Q > x) by characteristic-function inversion.

    Returns ``(p, error_bound)``; ``p`` is clamped to ``[1e-16, 1]``. When the
    requested accuracy exhausts the term limit it is relaxed tenfold, up to
    1e-6, and the bound reports the accuracy reached. Raises
    :class:`DaviesFailure` if even that fails.
    """
    p, bound = _davies_tail(m, x, acc)
    return _clamp(p)[0], bound


def _davies_tail(m: ChiSquareMixture, x: float, acc: QfAccuracy) -> Tuple[float, float]:
    c = float(x) + m.shift
    lb = np.asarray(m.weights, dtype=float)
    # few-term mixtures near the lower support can exhaust the term limit at
    # tight accuracy; loosen tenfold at a time, up to the acceptance bound
    target = acc.target_abs_error
    while True:
        try:
            cdf, roundoff = _Davies(lb, c, lim=acc.integration_terms_limit, acc=target).run()
        except DaviesFailure:
            if target * 10 > max(DAVIES_FALLBACK_BOUND, acc.target_abs_error) * (1 + 1e-9):
                raise
            target *= 10
            continue
        return 1.0 - cdf, float(target + roundoff)


# ---------------------------------------------------------------------------
# Liu, Tang & Zhang (2009) moment matching
# ---------------------------------------------------------------------------


def _liu_positive_skew(k: np.ndarray, t: float) -> float:
    # c_r = sum w^r, recovered from the cumulants
    c1, c2, c3, c4 = k[0], k[1] / 2.0, k[2] / 8.0, k[3] / 48.0
    s1 = c3 / c2**1.5
    s2 = c4 / c2**2
    if s1 * s1 > s2:
        a = 1.0 / (s1 - math.sqrt(s1 * s1 - s2))
        delta = s1 * a**3 - a * a
        dof = a * a - 2.0 * delta
    else:
        a = 1.0 / s1
        delta = 0.0
        dof = a * a
    mu_x = dof + delta
    sigma_x = math.sqrt(2.0) * a
    tstar = (t - c1) / math.sqrt(2.0 * c2)
    arg = tstar * sigma_x + mu_x
    if delta == 0.0:
        return float(stats.chi2.sf(arg, dof))
    return float(stats.ncx2.sf(arg, dof, delta))


def liu_survival(m: ChiSquareMixture, x: float) -> float:
    """P(Q > x) via a scaled noncentral chi-square matched on four cumulants.

    Exact for a single weight or for equal weights; an approximation
    otherwise, with no accuracy guarantee in the far tail. Mixtures with
    negative skew are handled by reflecting ``Q -> -Q``.
    """
    raw = ChiSquareMixture(m.weights, centered=False)
    t = float(x) + m.shift
    k = cumulants(raw)
    if k[2] > 0:
        p = _liu_positive_skew(k, t)
    elif k[2] < 0:
        kneg = cumulants(raw.scaled(-1.0))
        p = 1.0 - _liu_positive_skew(kneg, -t)
    else:
        p = float(stats.norm.sf((t - k[0]) / math.sqrt(k[1])))
    return _clamp(p)[0]


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

MC_MIN_DRAWS = 10_000
_MC_CHUNK_ELEMS = 4_000_000


def mc_samples(m: ChiSquareMixture, draws: int, seed) -> np.ndarray:
    """``draws`` realizations of the mixture, reproducible for a given seed."""
    w = m.weights
    per_chunk = max(1, _MC_CHUNK_ELEMS // w.size)
    n_chunks = -(-draws // per_chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    out = np.empty(draws)
    for i, ss in enumerate(children):
        lo = i * per_chunk
        hi = min(draws, lo + per_chunk)
        z = np.random.default_rng(ss).standard_normal((hi - lo, w.size))
        out[lo:hi] = (z * z) @ w
    if m.centered:
        out -= w.sum()
    return out


def mc_survival(m: ChiSquareMixture, x: float, draws: int = 1_000_000, seed=0) -> float:
    """Empirical P(Q > x) over ``draws`` simulated realizations."""
    if draws < MC_MIN_DRAWS:
        raise ValueError(f"mc_survival needs at least {MC_MIN_DRAWS} draws, got {draws}")
    q = mc_samples(m, draws, seed)
    return float(np.mean(q > x))


# ---------------------------------------------------------------------------
# Engine chain and quantiles
# ---------------------------------------------------------------------------


def survival(
    m: ChiSquareMixture,
    x: float,
    acc: QfAccuracy = QfAccuracy(),
    seed=0,
    engines: Sequence[str] = ("davies", "liu", "montecarlo"),
) -> SurvivalResult:
    """P(Q > x) from the first engine in ``engines`` that succeeds.

    Davies is accepted when its error bound is at most 1e-6. Liu is
    accepted whenever its output is a finite probability.
    """
    notes = []
    for engine in engines:
        if engine == "davies":
            try:
                p, bound = _davies_tail(m, x, acc)
            except DaviesFailure as exc:
                notes.append(f"davies failed: {exc}")
                continue
            if bound > DAVIES_FALLBACK_BOUND:
                notes.append(f"davies error bound {bound:.3g} above {DAVIES_FALLBACK_BOUND}")
                continue
            p, clamped = _clamp(p)
            return SurvivalResult(p, "davies", bound, clamped, notes)
        if engine == "liu":
            try:
                p = liu_survival(m, x)
            except (ValueError, ZeroDivisionError, FloatingPointError) as exc:
                notes.append(f"liu failed: {exc}")
                continue
            if not np.isfinite(p):
                notes.append("liu returned a non-finite value")
                continue
            p, clamped = _clamp(p)
            return SurvivalResult(p, "liu", None, clamped, notes)
        if engine == "montecarlo":
            p = mc_survival(m, x, acc.mc_draws, seed)
            p, clamped = _clamp(p)
            se = math.sqrt(max(p * (1 - p), 1.0 / acc.mc_draws) / acc.mc_draws)
            return SurvivalResult(p, "montecarlo", 3 * se, clamped, notes)
        raise ValueError(f"unknown engine {engine!r}")
    raise QfError("all p-value engines failed: " + "; ".join(notes))


def mixture_quantile(
    m: ChiSquareMixture,
    prob: float,
    acc: QfAccuracy = QfAccuracy(),
    max_expansions: int = 60,
) -> float:
    """Value ``q`` with ``P(Q > q) = 1 - prob``."""
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must lie in (0, 1)")
    target = 1.0 - prob

    def g(q):
        return survival(m, q, acc, engines=("davies", "liu")).p - target

    sd = math.sqrt(m.variance)
    lo = m.mean - sd
    hi = m.mean + sd
    step = sd
    for _ in range(max_expansions):
        if g(lo) > 0:
            break
        lo -= step
        step *= 2.0
    else:
        raise QfError("mixture_quantile: could not bracket from below")
    step = sd
    for _ in range(max_expansions):
        if g(hi) < 0:
            break
        hi += step
        step *= 2.0
    else:
        raise QfError("mixture_quantile: could not bracket from above")
    return float(optimize.brentq(g, lo, hi, xtol=1e-12 * max(sd, 1.0), rtol=1e-13, maxiter=200))
