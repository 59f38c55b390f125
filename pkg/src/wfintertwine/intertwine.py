"""The coupled generator and checks of the intertwining identities.

Every identity is checked as a matrix identity on a finite invariant subspace,
so exact (``Fraction``) runs certify it with residual zero and float runs only
carry rounding and matrix-exponential error.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernels import (
    CoupledFunction,
    coupled_dim,
    kernel_K_eval,
    kernel_K_matrix,
    lambda_matrix,
    psi_matrix,
)
from .poly import (
    FLOAT,
    INF,
    RATIONAL,
    EvenPolynomial,
    GeneratorMatrix,
    _check_arithmetic,
    apply_semigroup_P,
    birth_rate,
    build_G_matrix,
    build_H_matrix,
    matrix_exp,
)

__all__ = [
    "CoupledGeneratorMatrix",
    "VerificationReport",
    "ApproximationReport",
    "MaximumPrincipleReport",
    "build_coupled_generator",
    "coupled_generator_at",
    "verify_GK_KH",
    "verify_PtK_KQt",
    "verify_Lambda_intertwining",
    "verify_Psi_intertwining",
    "verify_Pt_approximation",
    "positive_maximum_check",
    "APPROX_TIMES",
    "APPROX_POINTS",
]

DEFAULT_FLOAT_TOL = 1e-12

# small times and sample points used by default in the semigroup limit check
APPROX_TIMES = (1e-2, 10**-3.5, 1e-3)
APPROX_POINTS = ((0.5, 0), (0.3, 0), (0.6, 1), (0.8, 2), (0.7, 3))
_APPROX_DEGREE_CAP = 256


@dataclass(frozen=True, eq=False)
class CoupledGeneratorMatrix(GeneratorMatrix):
    """Coupled generator on levels ``0..y0`` of even polynomials of degree
    bound ``n`` plus the tail value; index ``y * (n + 1) + k`` holds the
    coefficient of ``x^(2k)`` at level ``y`` and the last index the tail."""

    n: int = 0
    y0: int = 0

    def index(self, y: int, k: int) -> int:
        return y * (self.n + 1) + k


def _drift_diffusion_up(k: int, y: int) -> int:
    # coefficient sent from x^(2k) down to x^(2k-2)
    return 2 * k * (2 * k - 1) + 8 * k * y


def _drift_diffusion_diag(k: int, y: int) -> int:
    return 2 * k * (2 * k - 1) + 8 * k * (y + 1)


def build_coupled_generator(
    n: int, arithmetic: str = FLOAT, y0: int | None = None
) -> CoupledGeneratorMatrix:
    """Matrix of the coupled generator on the invariant subspace ``L_n``.

    On ``x^(2k)`` at level ``y`` the diffusion term ``(1 - x^2) d^2/dx^2`` and
    the drift ``4 (y/x - (y+1) x) d/dx`` combine to
    ``[2k(2k-1) + 8ky] x^(2k-2) - [2k(2k-1) + 8k(y+1)] x^(2k)``; the singular
    ``y/x`` part is polynomial on even monomials, so no limit is taken
    numerically.  The jump part sends level ``y+1`` into level ``y`` with
    weight ``lambda_y`` (the tail when ``y = y0``).  The tail row is zero.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    y0 = n if y0 is None else y0
    arithmetic = _check_arithmetic(arithmetic)
    size = coupled_dim(n, y0)
    if arithmetic == RATIONAL:
        m = np.empty((size, size), dtype=object)
        m[:] = Fraction(0)
        conv = Fraction
    else:
        m = np.zeros((size, size))
        conv = float
    tail = size - 1
    w = n + 1
    for y in range(y0 + 1):
        lam = conv(birth_rate(y))
        for k in range(n + 1):
            i = y * w + k
            m[i, i] -= lam
            if y < y0:
                m[i, (y + 1) * w + k] += lam
            elif k == 0:
                m[i, tail] += lam
            if k > 0:
                m[i - 1, i] += conv(_drift_diffusion_up(k, y))
                m[i, i] -= conv(_drift_diffusion_diag(k, y))
    return CoupledGeneratorMatrix(m, "coupled", arithmetic, n=n, y0=y0)


def _generator_on_level(p: EvenPolynomial, y: int, u: np.ndarray) -> np.ndarray:
    """Diffusion and drift part at level ``y`` written in ``u = x^2``.

    With ``f(x) = p(x^2)`` the term equals
    ``(1-u)(2p' + 4u p'') + 8(y - (y+1)u) p'``, finite at ``u = 0``.
    """
    c = p.coeffs.astype(float)
    poly = np.polynomial.Polynomial(c)
    d1 = poly.deriv(1)(u) if c.size > 1 else np.zeros_like(u)
    d2 = poly.deriv(2)(u) if c.size > 2 else np.zeros_like(u)
    return (1.0 - u) * (2.0 * d1 + 4.0 * u * d2) + 8.0 * (y - (y + 1) * u) * d1


def coupled_generator_at(f: CoupledFunction, x, y):
    """Pointwise value of the coupled generator at ``(x, y)``.

    Accepts functions outside the domain (``beyond`` set), where the formula
    is still meaningful pointwise.  Returns 0 at ``y = inf``.
    """
    if y == INF:
        return 0.0
    x = np.asarray(x, dtype=float)
    u = x * x
    lam = birth_rate(int(y))
    jump = lam * (f.level(y + 1).evaluate(x) - f.level(y).evaluate(x))
    out = jump + _generator_on_level(f.level(y), int(y), u)
    return out if np.ndim(out) else float(out)


@dataclass
class VerificationReport:
    identity: str
    n: int
    mode: str
    max_abs_residual: float
    tolerance: float
    passed: bool
    elapsed: float
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _residual(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    if d.size == 0:
        return 0.0
    if d.dtype == object:
        return float(max(abs(v) for v in d.flat))
    return float(np.abs(d).max())


def _report(identity, n, mode, a, b, tol, started, **details) -> VerificationReport:
    res = _residual(a, b)
    tol = 0.0 if mode == RATIONAL else tol
    return VerificationReport(
        identity, n, mode, res, tol, res <= tol, time.perf_counter() - started, details
    )


def verify_GK_KH(
    y0: int,
    arithmetic: str = RATIONAL,
    tol: float = DEFAULT_FLOAT_TOL,
    rates: Mapping[int, float] | None = None,
) -> VerificationReport:
    """Residual of ``G K - K H`` on lattice functions with cutoff ``y0``.

    ``rates`` perturbs the birth rates in ``H`` only (negative control).
    """
    started = time.perf_counter()
    arithmetic = _check_arithmetic(arithmetic)
    G = build_G_matrix(y0 + 1, arithmetic).entries
    H = build_H_matrix(y0, arithmetic, rates=rates).entries
    K = kernel_K_matrix(y0, arithmetic)
    return _report("GK=KH", y0, arithmetic, G @ K, K @ H, tol, started)


def verify_PtK_KQt(t: float, y0: int, tol: float = 1e-10) -> VerificationReport:
    """Residual of ``exp(tG) K - K exp(tH)``; both act exactly on the
    finite subspaces, so only exponential and rounding error remain."""
    started = time.perf_counter()
    K = kernel_K_matrix(y0, FLOAT)
    Pt = matrix_exp(build_G_matrix(y0 + 1, FLOAT), t).entries
    Qt = matrix_exp(build_H_matrix(y0, FLOAT), t).entries
    return _report("PtK=KQt", y0, FLOAT, Pt @ K, K @ Qt, tol, started, t=t)


def verify_Lambda_intertwining(
    n: int, arithmetic: str = RATIONAL, tol: float = DEFAULT_FLOAT_TOL
) -> VerificationReport:
    """Residual of ``Lambda Gc - G Lambda`` on every basis element of ``L_n``."""
    started = time.perf_counter()
    arithmetic = _check_arithmetic(arithmetic)
    Gc = build_coupled_generator(n, arithmetic).entries
    Lam = lambda_matrix(n, n, arithmetic)
    G = build_G_matrix(2 * n + 1, arithmetic).entries
    return _report("Lambda.Gc=G.Lambda", n, arithmetic, Lam @ Gc, G @ Lam, tol, started)


def verify_Psi_intertwining(
    y0: int, arithmetic: str = RATIONAL, tol: float = DEFAULT_FLOAT_TOL, n: int | None = None
) -> VerificationReport:
    """Residual of ``Gc Psi - Psi H`` on lattice functions with cutoff ``y0``."""
    started = time.perf_counter()
    arithmetic = _check_arithmetic(arithmetic)
    n = y0 if n is None else n
    Gc = build_coupled_generator(n, arithmetic, y0=y0).entries
    Psi = psi_matrix(y0, n, arithmetic)
    H = build_H_matrix(y0, arithmetic).entries
    return _report("Gc.Psi=Psi.H", y0, arithmetic, Gc @ Psi, Psi @ H, tol, started)


# -- the small-time approximation of the coupled semigroup ------------------


@dataclass
class ApproximationReport:
    times: list
    deviations: list
    per_point: list
    order: float
    excluded: list
    passed: bool

    def to_json(self) -> dict:
        return asdict(self)


def _times_K(p: EvenPolynomial, z: int) -> EvenPolynomial:
    """Coefficients of ``p(x) (1 - x^2) x^(2z)``."""
    c = p.coeffs.astype(float)
    out = np.zeros(c.size + z + 1)
    out[z : z + c.size] += c
    out[z + 1 : z + 1 + c.size] -= c
    return EvenPolynomial(out)


def _birth_row(t: float, y: int, mass_tol: float = 1e-17) -> np.ndarray:
    """``Q_t(y, z)`` for ``z = y..Z`` with ``Z`` large enough that the mass
    beyond ``Z`` is below ``mass_tol``."""
    Z = y + 8
    while True:
        row = matrix_exp(build_H_matrix(Z, FLOAT), t).entries[y]
        if row[-1] < mass_tol or Z > y + 200:
            return row[y:-1]
        Z += 8


def approximate_coupled_semigroup(f: CoupledFunction, t: float, x: float, y: int, floor=1e-14):
    """``Q_t (P_t(fK) / P_t K)`` at ``(x, y)``.

    Returns the value and the list of levels whose quotient was skipped
    because ``P_t K(x, z)`` fell below ``floor``.
    """
    weights = _birth_row(t, y)
    total = 0.0
    skipped = []
    for j, w in enumerate(weights):
        z = y + j
        kz = _times_K(EvenPolynomial.constant(1.0), z)
        # K(., z) has degree z + 1; at small t the coefficients stay tame beyond the default cap
        den = apply_semigroup_P(t, kz, max_degree=_APPROX_DEGREE_CAP).evaluate(x)
        if den < floor:
            skipped.append({"x": x, "y": y, "z": z, "weight": float(w)})
            continue
        num = apply_semigroup_P(t, _times_K(f.level(z), z), max_degree=_APPROX_DEGREE_CAP).evaluate(x)
        total += w * num / den
    return total, skipped


def verify_Pt_approximation(
    t_sequence: Sequence[float],
    f: CoupledFunction,
    sample_points: Iterable[tuple],
    min_order: float = 0.8,
) -> ApproximationReport:
    """Compare ``(P^(t) f - f) / t`` with the coupled generator at sample points.

    The deviation (max over points) should shrink like ``t``; the empirical
    order is the slope of a least squares fit of ``log deviation`` on ``log t``.
    """
    points = [(float(x), int(y)) for x, y in sample_points]
    for x, y in points:
        if not (0.0 < x < 1.0) or kernel_K_eval(x, y) <= 0.0:
            raise ValueError(f"sample point {(x, y)} has K(x, y) = 0")
    times = sorted((float(t) for t in t_sequence), reverse=True)
    if any(t <= 0 for t in times):
        raise ValueError("times must be > 0")
    target = [coupled_generator_at(f, x, y) for x, y in points]
    deviations, per_point, excluded = [], [], []
    for t in times:
        row = []
        for (x, y), g in zip(points, target):
            value, skipped = approximate_coupled_semigroup(f, t, x, y)
            excluded.extend(dict(s, t=t) for s in skipped)
            row.append(abs((value - f.evaluate(x, y)) / t - g))
        per_point.append(row)
        deviations.append(max(row))
    if len(times) >= 2 and all(d > 0 for d in deviations):
        order = float(np.polyfit(np.log(times), np.log(deviations), 1)[0])
    elif all(d == 0 for d in deviations):
        order = math.inf
    else:
        order = math.nan
    decreasing = all(a >= b for a, b in zip(deviations, deviations[1:]))
    passed = decreasing and order >= min_order
    return ApproximationReport(times, deviations, per_point, order, excluded, passed)


# -- positive maximum principle ---------------------------------------------


@dataclass
class MaximumPrincipleReport:
    n: int
    trials: int
    applicable: int
    violations: int
    worst_excess: float
    examples: list

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_json(self) -> dict:
        return dict(asdict(self), passed=self.passed)


GRID_POINTS = 2001


def _polish(coeffs: np.ndarray, u0: float) -> tuple[float, float]:
    """Refine a grid maximiser ``u0`` of ``p(u) = sum c_k u^k`` on ``[0, 1]``.

    Candidates are ``u0`` and the real roots of ``p'`` in ``(0, 1)`` after one
    Newton step each; ties go to the smaller ``u``.
    """
    poly = np.polynomial.Polynomial(coeffs)
    cand_u = [u0]
    if coeffs.size >= 3:
        dp = poly.deriv()
        ddp = dp.deriv()
        for r in dp.roots():
            if abs(r.imag) < 1e-9 and 0.0 < r.real < 1.0:
                u = r.real
                curv = ddp(u)
                if curv != 0:
                    u = min(max(u - dp(u) / curv, 0.0), 1.0)
                cand_u.append(u)
    cand_u = np.array(cand_u)
    cand_v = poly(cand_u)
    u = cand_u[cand_v >= cand_v.max()].min()
    return float(u), float(poly(u))


def positive_maximum_check(
    n: int,
    trials: int,
    rng: np.random.Generator,
    rel_tol: float = 1e-8,
    max_examples: int = 5,
) -> MaximumPrincipleReport:
    """Random ``f`` in ``L_n``: at a nonnegative global maximum the coupled
    generator must be ``<= rel_tol * (1 + ||f||)``.

    The maximum is searched over a uniform grid of ``GRID_POINTS`` values of
    ``x`` on every level plus the point ``(1, inf)``, then polished on each
    level through the critical points of the level polynomial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    grid_u = np.linspace(0.0, 1.0, GRID_POINTS) ** 2
    vander = np.vander(grid_u, n + 1, increasing=True)
    applicable = violations = 0
    worst = 0.0
    examples = []
    for _ in range(trials):
        coeffs = rng.standard_normal((n + 1, n + 1))
        tail = float(rng.standard_normal())
        f = CoupledFunction(tuple(EvenPolynomial(c) for c in coeffs), tail)
        values = coeffs @ vander.T
        sup_norm = max(abs(tail), float(np.abs(values).max()))
        level_max = values.max(axis=1)
        # only levels whose grid maximum is close to the best can win after polishing
        margin = 1e-3 * (1.0 + sup_norm)
        best_val, best_pt = tail, (1.0, INF)
        for y in np.flatnonzero(level_max >= max(level_max.max(), tail) - margin):
            u, v = _polish(coeffs[y], grid_u[int(np.argmax(values[y]))])
            x = math.sqrt(u)
            if v > best_val or (v == best_val and x < best_pt[0]):
                best_val, best_pt = v, (x, int(y))
        if best_val < 0:
            continue
        applicable += 1
        g = coupled_generator_at(f, *best_pt)
        excess = g - rel_tol * (1.0 + sup_norm)
        if excess > 0:
            violations += 1
            worst = max(worst, excess)
            if len(examples) < max_examples:
                examples.append({"point": [best_pt[0], best_pt[1]], "value": best_val, "Gf": g})
    return MaximumPrincipleReport(n, trials, applicable, violations, worst, examples)
