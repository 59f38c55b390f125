"""Distributional targets for the explosion and absorption times.

The explosion time of the birth chain started at ``y0`` is a sum of
independent exponentials with rates ``lambda_y = (2y+1)(2y+2)``, ``y >= y0``.
Its CDF is evaluated from a finite partial-fraction formula for the first
levels, and the remaining infinite tail ``S`` is handled by rigorous tail
bounds, so every CDF value comes as an interval ``(lower, upper)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import digamma, polygamma

from .kernels import kernel_K_eval
from .poly import birth_rate

__all__ = [
    "CancellationError",
    "HypoexpSpec",
    "explosion_mean",
    "explosion_variance",
    "hypoexp_cdf",
    "absorption_cdf_from",
    "absorption_mean_from",
    "scale_speed",
    "ks_statistic",
    "ks_critical_value",
    "step_bounds",
    "write_cdf_csv",
]

DEFAULT_N_TRUNC = 25


class CancellationError(ArithmeticError):
    """The partial-fraction sum lost too many digits to be trusted."""


def explosion_mean(y0: int) -> float:
    """``sum_{y >= y0} 1/lambda_y``.

    ``1/lambda_y = 1/(2y+1) - 1/(2y+2)``, so the sum is a tail of the
    alternating harmonic series, ``(psi(y0+1) - psi(y0+1/2)) / 2``; ``ln 2``
    from level 0.
    """
    if y0 < 0:
        raise ValueError("y0 must be >= 0")
    if y0 == 0:
        return math.log(2.0)
    return 0.5 * float(digamma(y0 + 1.0) - digamma(y0 + 0.5))


def explosion_variance(y0: int) -> float:
    """``sum_{y >= y0} 1/lambda_y^2``, via trigamma; ``pi^2/6 - 2 ln 2`` from 0."""
    if y0 < 0:
        raise ValueError("y0 must be >= 0")
    if y0 == 0:
        return math.pi**2 / 6.0 - 2.0 * math.log(2.0)
    if y0 >= 1000:
        # the trigamma form cancels; Euler-Maclaurin is accurate to ~1e-8 relative here
        a = 2.0 * y0 + 1.0
        return 1.0 / (6.0 * a**3) + 1.0 / (4.0 * a**4)
    s = 0.25 * float(polygamma(1, y0 + 0.5) + polygamma(1, y0 + 1.0))
    return s - 2.0 * explosion_mean(y0)


@dataclass(frozen=True)
class HypoexpSpec:
    """Explosion time from ``start`` split as ``T_n + S``.

    ``T_n`` sums the exponential holding times of levels ``start..n_trunc``;
    ``S`` is the remainder with exact mean ``tail_mean`` and variance
    ``tail_var``.
    """

    start: int
    n_trunc: int = DEFAULT_N_TRUNC

    def __post_init__(self):
        if self.start < 0 or self.n_trunc < self.start:
            raise ValueError("need 0 <= start <= n_trunc")

    @property
    def rates(self) -> np.ndarray:
        return np.array([birth_rate(y) for y in range(self.start, self.n_trunc + 1)], float)

    @property
    def tail_mean(self) -> float:
        return explosion_mean(self.n_trunc + 1)

    @property
    def tail_var(self) -> float:
        return explosion_variance(self.n_trunc + 1)

    @property
    def weights(self) -> np.ndarray:
        return _weights(self.start, self.n_trunc)


@lru_cache(maxsize=None)
def _weights(start: int, n_trunc: int) -> np.ndarray:
    # w_y = prod_{z != y} lambda_z / (lambda_z - lambda_y), exact in rationals
    lam = [birth_rate(y) for y in range(start, n_trunc + 1)]
    out = []
    for i, a in enumerate(lam):
        w = Fraction(1)
        for j, b in enumerate(lam):
            if j != i:
                w *= Fraction(b, b - a)
        out.append(float(w))
    w = np.array(out)
    w.setflags(write=False)
    return w


def _truncated_cdf(t: np.ndarray, spec: HypoexpSpec, check: bool = True) -> np.ndarray:
    """``P(T_n <= t)`` from the distinct-rate partial fractions."""
    t = np.asarray(t, dtype=float)
    flat = t.reshape(-1)
    out = np.zeros_like(flat)
    pos = np.flatnonzero(flat > 0)
    w, rates = spec.weights, spec.rates
    chunk = max(1, 2_000_000 // rates.size)
    for start in range(0, pos.size, chunk):
        idx = pos[start : start + chunk]
        terms = w[None, :] * np.exp(-np.outer(flat[idx], rates))
        # rates ascend, so reversed columns add the smallest terms first
        survival = terms[:, ::-1].sum(axis=1)
        if check:
            magnitude = np.abs(terms).sum(axis=1)
            bad = (magnitude > 1e6 * np.abs(survival)) & (magnitude > 1e-300)
            if bad.any():
                raise CancellationError(
                    "partial-fraction sum cancels; reduce n_trunc or use a simulation estimate"
                )
        out[idx] = np.clip(1.0 - survival, 0.0, 1.0)
    return out.reshape(t.shape)


_DELTAS = np.geomspace(1e-7, 10.0, 240)


@lru_cache(maxsize=None)
def _tail_probability_bounds(n_trunc: int) -> tuple[np.ndarray, np.ndarray]:
    """Bounds on ``P(S > delta)`` and ``P(S < delta)`` on the delta grid.

    Markov: ``P(S > d) <= E S / d``.  Chernoff: ``P(S > d) <= exp(L+(th) - th d)``
    and ``P(S < d) <= exp(L-(th) + th d)`` with ``L+-`` upper bounds on the log
    moment generating functions of ``+-S``.
    """
    mean = explosion_mean(n_trunc + 1)
    explicit = 4000
    ys = np.arange(n_trunc + 1, n_trunc + 1 + explicit, dtype=float)
    lam = (2 * ys + 1) * (2 * ys + 2)
    lam_next = (2 * (n_trunc + 1 + explicit) + 1.0) * (2 * (n_trunc + 1 + explicit) + 2.0)
    rest_mean = explosion_mean(n_trunc + 1 + explicit)

    thetas = lam[0] * (1.0 - np.geomspace(1e-4, 1.0, 300)[::-1] * 0.9999)
    thetas = np.unique(np.concatenate([[0.0], thetas]))
    thetas = thetas[thetas < lam[0]]
    # -log(1 - u) <= u / (1 - u) bounds the remainder of the series
    log_mgf_up = np.array(
        [-np.log1p(-th / lam).sum() + th * rest_mean / (1.0 - th / lam_next) for th in thetas]
    )
    # dropping the positive terms log(1 + th/lam) beyond the explicit range keeps an upper bound
    thetas_lo = np.geomspace(1e-2, 1e8, 300)
    log_mgf_lo = np.array([-np.log1p(th / lam).sum() for th in thetas_lo])

    d = _DELTAS
    with np.errstate(over="ignore"):
        p_above = np.exp((log_mgf_up[None, :] - np.outer(d, thetas)).min(axis=1))
        p_below = np.exp((log_mgf_lo[None, :] + np.outer(d, thetas_lo)).min(axis=1))
    p_above = np.minimum(np.minimum(p_above, mean / d), 1.0)
    p_below = np.minimum(p_below, 1.0)
    return p_above, p_below


def hypoexp_cdf(t, spec: HypoexpSpec) -> tuple:
    """Interval ``(lower, upper)`` containing ``P(T <= t)``, ``T = T_n + S``.

    ``lower = max_d F_n(t - d) - P(S > d)`` and
    ``upper = min(F_n(t), min_d F_n(t - d) + P(S < d))`` over a log-spaced grid
    of shifts ``d``, with the tail probabilities bounded as in
    :func:`_tail_probability_bounds`.  Scalars in, scalars out.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    p_above, p_below = _tail_probability_bounds(spec.n_trunc)
    lower = np.empty_like(t)
    upper = np.empty_like(t)
    chunk = max(1, 4_000_000 // (_DELTAS.size * (spec.n_trunc - spec.start + 1)))
    for i in range(0, t.size, chunk):
        tc = t[i : i + chunk]
        fn = _truncated_cdf(tc, spec)
        shifted = _truncated_cdf(tc[:, None] - _DELTAS[None, :], spec, check=False)
        lower[i : i + chunk] = (shifted - p_above[None, :]).max(axis=1)
        upper[i : i + chunk] = np.minimum(fn, (shifted + p_below[None, :]).min(axis=1))
    upper = np.clip(upper, 0.0, 1.0)
    lower = np.clip(lower, 0.0, upper)
    if scalar:
        return float(lower[0]), float(upper[0])
    return lower, upper


def _mixture_levels(x: float, mass_tol: float) -> tuple[np.ndarray, float]:
    """Weights ``K(x, 0..Y)`` with remaining mass ``x^(2(Y+1)) < mass_tol``."""
    weights = []
    y = 0
    remaining = 1.0
    while remaining >= mass_tol:
        w = kernel_K_eval(x, y)
        weights.append(w)
        remaining = x ** (2 * (y + 1))
        y += 1
        if x == 0.0:
            remaining = 0.0
    return np.array(weights), remaining


def absorption_cdf_from(x: float, t, n_trunc: int = DEFAULT_N_TRUNC, mass_tol: float = 1e-10):
    """Interval for the absorption-time CDF of the reflected diffusion from ``x``.

    The absorption time has the law of the explosion time started from a
    ``K(x, .)``-distributed level; the mixture is truncated once the
    remaining weight drops below ``mass_tol`` and that weight is added to
    the upper bound.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if x == 1.0:
        ones = np.ones_like(t)
        return (1.0, 1.0) if scalar else (ones, ones.copy())
    weights, remaining = _mixture_levels(x, mass_tol)
    lower = np.zeros_like(t)
    upper = np.zeros_like(t)
    for y, w in enumerate(weights):
        lo, up = hypoexp_cdf(t, HypoexpSpec(y, max(n_trunc, y)))
        lower += w * lo
        upper += w * up
    upper = np.minimum(upper + remaining, 1.0)
    if scalar:
        return float(lower[0]), float(upper[0])
    return lower, upper


def absorption_mean_from(x: float) -> float:
    """``sum_y K(x, y) * explosion_mean(y)``."""
    if x == 1.0:
        return 0.0
    weights, remaining = _mixture_levels(x, 1e-16)
    return float(sum(w * explosion_mean(y) for y, w in enumerate(weights)))


def scale_speed(y: int, x: float) -> tuple[float, float]:
    """Scale derivative and speed density of the level-``y`` diffusion."""
    if not 0.0 < x < 1.0:
        raise ValueError("scale and speed are singular at x = 0 and x = 1")
    if y < 0:
        raise ValueError("y must be >= 0")
    w = x ** (4 * y)
    one_minus = 1.0 - x * x
    return 1.0 / (w * one_minus**2), w * one_minus


def ks_statistic(samples, cdf_lower: Callable, cdf_upper: Callable | None = None) -> float:
    """Kolmogorov-Smirnov distance against a CDF known up to an interval.

    ``sup max(F_emp - upper, lower - F_emp, 0)``, with the empirical CDF taken
    on both sides of each jump.  Equal bounds give the classical statistic.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    if x.size == 0:
        raise ValueError("samples must be nonempty")
    cdf_upper = cdf_lower if cdf_upper is None else cdf_upper
    n = x.size
    lo = np.asarray(cdf_lower(x), dtype=float)
    up = np.asarray(cdf_upper(x), dtype=float)
    # ties: the empirical CDF after the last copy of each value
    after = np.searchsorted(x, x, side="right") / n
    before = np.searchsorted(x, x, side="left") / n
    d = max(float((after - up).max()), float((lo - before).max()), 0.0)
    return d


def ks_critical_value(n: int, m: int | None = None, alpha: float = 0.01) -> float:
    """Asymptotic KS critical value; ``1.63 / sqrt(n)`` at the 1% level."""
    c = {0.01: 1.63, 0.05: 1.36, 0.1: 1.22}[alpha]
    eff = n if m is None else n * m / (n + m)
    return c / math.sqrt(eff)


def step_bounds(grid, lower, upper) -> tuple[Callable, Callable]:
    """Monotone bracketing of tabulated CDF bounds.

    For ``t`` between grid points, the lower bound at the grid point below and
    the upper bound at the grid point above remain valid bounds.
    """
    grid = np.asarray(grid, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def lo(t):
        i = np.searchsorted(grid, t, side="right") - 1
        return np.where(i >= 0, lower[np.clip(i, 0, None)], 0.0)

    def up(t):
        i = np.searchsorted(grid, t, side="left")
        return np.where(i < grid.size, upper[np.clip(i, None, grid.size - 1)], 1.0)

    return lo, up


def write_cdf_csv(path, t, lower, upper) -> Path:
    """CDF table with columns ``t,lower,upper``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lower", "upper"])
        for row in zip(np.asarray(t, float), np.asarray(lower, float), np.asarray(upper, float)):
            w.writerow([repr(float(v)) for v in row])
    return path
