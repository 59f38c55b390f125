"""The kernel K and the lifting/averaging kernels of the coupled process.

``K(x, .)`` is a geometric law on the lattice with success parameter
``1 - x^2`` (all mass at ``inf`` when ``x = 1``).  ``Lambda`` averages a coupled
function over ``K(x, .)``; ``Phi`` and ``Psi`` lift functions of ``x`` or of
``y`` alone to coupled functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .poly import (
    FLOAT,
    INF,
    RATIONAL,
    EvenPolynomial,
    LatticeFunction,
    _check_arithmetic,
    _zeros,
)

__all__ = [
    "CoupledFunction",
    "kernel_K_eval",
    "kernel_K_apply",
    "kernel_K_matrix",
    "sample_K",
    "lambda_apply",
    "lambda_matrix",
    "psi_lift",
    "psi_matrix",
    "phi_lift",
]


def _check_unit(x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")


def kernel_K_eval(x: float, y) -> float:
    """``K(x, y) = (1 - x^2) x^(2y)`` for finite ``y``; ``K(x, inf) = 1[x = 1]``."""
    _check_unit(x)
    if y == INF:
        return 1.0 if x == 1.0 else 0.0
    if y < 0:
        raise ValueError("y must be >= 0")
    return (1.0 - x * x) * x ** (2 * int(y))


def kernel_K_apply(f: LatticeFunction) -> EvenPolynomial:
    """``Kf`` as an even polynomial of degree bound ``cutoff + 1``.

    Telescoping the geometric weights gives ``c_0 = f(0)``,
    ``c_y = f(y) - f(y-1)`` for ``1 <= y <= cutoff`` and
    ``c_{cutoff+1} = f(inf) - f(cutoff)``, so ``Kf(1) = f(inf)``.
    """
    v = f.as_vector()
    c = np.empty_like(v)
    c[0] = v[0]
    c[1:] = v[1:] - v[:-1]
    return EvenPolynomial(c)


def kernel_K_matrix(y0: int, arithmetic: str = FLOAT) -> np.ndarray:
    """Matrix of ``kernel_K_apply`` from lattice values to coefficients."""
    arithmetic = _check_arithmetic(arithmetic)
    m = _zeros(y0 + 2, arithmetic)
    one = Fraction(1) if arithmetic == RATIONAL else 1.0
    for j in range(y0 + 2):
        m[j, j] = one
        if j > 0:
            m[j, j - 1] = -one
    return m


def sample_K(x: float, rng: np.random.Generator):
    """Draw from ``K(x, .)``: a geometric count for ``x < 1``, ``inf`` at ``x = 1``.

    Inversion: ``P(Y >= k) = x^(2k)``, so ``Y = floor(log U / log x^2)``.
    """
    _check_unit(x)
    if x == 1.0:
        return INF
    if x == 0.0:
        return 0
    u = 1.0 - rng.random()
    return int(math.floor(math.log(u) / (2.0 * math.log(x))))


@dataclass(frozen=True, eq=False)
class CoupledFunction:
    """A function on the coupled state space.

    ``levels[y]`` is the even polynomial ``f(., y)`` for ``y <= cutoff``; all
    levels share one degree bound.  Beyond the cutoff ``f(., y)`` equals
    ``beyond`` when given, otherwise the constant ``tail``; ``tail`` is the value
    at the compactification point ``(1, inf)``.  Functions with ``beyond=None``
    are exactly the domain elements the coupled generator acts on.
    """

    levels: tuple
    tail: object
    beyond: EvenPolynomial | None = field(default=None)

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ValueError("need at least one level")
        n = max(p.degree_bound for p in levels)
        levels = tuple(p if p.degree_bound == n else p.padded(n) for p in levels)
        object.__setattr__(self, "levels", levels)

    @property
    def cutoff(self) -> int:
        return len(self.levels) - 1

    @property
    def degree_bound(self) -> int:
        return self.levels[0].degree_bound

    @property
    def in_domain(self) -> bool:
        return self.beyond is None

    def level(self, y) -> EvenPolynomial:
        if y == INF:
            return EvenPolynomial.constant(self.tail)
        if y <= self.cutoff:
            return self.levels[int(y)]
        if self.beyond is not None:
            return self.beyond
        return EvenPolynomial.constant(self.tail)

    def evaluate(self, x, y):
        if y == INF:
            return self.tail
        return self.level(y).evaluate(x)

    __call__ = evaluate

    def as_vector(self) -> np.ndarray:
        """Coefficients ``c[y, k]`` in row-major order followed by the tail."""
        if not self.in_domain:
            raise ValueError("only domain elements have a finite coefficient vector")
        parts = [p.coeffs for p in self.levels]
        return np.append(np.concatenate(parts), self.tail)

    @classmethod
    def from_vector(cls, vec, n: int, y0: int) -> "CoupledFunction":
        vec = np.asarray(vec)
        if vec.size != (y0 + 1) * (n + 1) + 1:
            raise ValueError("vector length does not match (n, y0)")
        body = vec[:-1].reshape(y0 + 1, n + 1)
        return cls(tuple(EvenPolynomial(row) for row in body), vec[-1])

    @classmethod
    def constant(cls, c, n: int = 0, y0: int = 0) -> "CoupledFunction":
        return cls(tuple(EvenPolynomial.constant(c, n) for _ in range(y0 + 1)), c)


def coupled_dim(n: int, y0: int) -> int:
    return (y0 + 1) * (n + 1) + 1


def _zero_vector(size: int, dtype) -> np.ndarray:
    out = np.zeros(size, dtype=dtype)
    if out.dtype == object:
        out[:] = 0
    return out


def lambda_apply(f: CoupledFunction) -> EvenPolynomial:
    """``Lambda f(x) = sum_y K(x, y) f(x, y)`` expanded in even monomials.

    Level ``y`` contributes ``(x^(2y) - x^(2y+2)) f(x, y)``; all levels beyond
    the cutoff together contribute ``x^(2(cutoff+1))`` times the beyond
    polynomial (the constant tail for domain elements).  The result is exact:
    Fraction coefficients stay Fractions.
    """
    y0 = f.cutoff
    beyond = f.beyond if f.beyond is not None else EvenPolynomial.constant(f.tail)
    deg = max(f.degree_bound + y0 + 1, beyond.degree_bound + y0 + 1)
    dtype = np.result_type(*(p.coeffs.dtype for p in f.levels), beyond.coeffs.dtype)
    out = _zero_vector(deg + 1, dtype)
    for y, p in enumerate(f.levels):
        m = p.coeffs.size
        out[y : y + m] += p.coeffs
        out[y + 1 : y + 1 + m] -= p.coeffs
    out[y0 + 1 : y0 + 1 + beyond.coeffs.size] += beyond.coeffs
    return EvenPolynomial(out)


def lambda_matrix(n: int, y0: int, arithmetic: str = FLOAT) -> np.ndarray:
    """Matrix of ``Lambda`` from coupled coefficients (degree ``n``, cutoff
    ``y0``) to even-polynomial coefficients of degree bound ``n + y0 + 1``."""
    arithmetic = _check_arithmetic(arithmetic)
    one = Fraction(1) if arithmetic == RATIONAL else 1.0
    rows = n + y0 + 2
    cols = coupled_dim(n, y0)
    if arithmetic == RATIONAL:
        m = np.empty((rows, cols), dtype=object)
        m[:] = Fraction(0)
    else:
        m = np.zeros((rows, cols))
    for y in range(y0 + 1):
        for k in range(n + 1):
            col = y * (n + 1) + k
            m[y + k, col] += one
            m[y + k + 1, col] -= one
    m[y0 + 1, cols - 1] += one
    return m


def psi_lift(g: LatticeFunction, n: int = 0) -> CoupledFunction:
    """``(Psi g)(x, y) = g(y)``: constant in ``x`` on every level."""
    levels = tuple(EvenPolynomial.constant(v, n) for v in g.values)
    return CoupledFunction(levels, g.tail)


def psi_matrix(y0: int, n: int, arithmetic: str = FLOAT) -> np.ndarray:
    """Matrix of ``Psi`` from lattice values to coupled coefficients."""
    arithmetic = _check_arithmetic(arithmetic)
    one = Fraction(1) if arithmetic == RATIONAL else 1.0
    rows = coupled_dim(n, y0)
    if arithmetic == RATIONAL:
        m = np.empty((rows, y0 + 2), dtype=object)
        m[:] = Fraction(0)
    else:
        m = np.zeros((rows, y0 + 2))
    for y in range(y0 + 1):
        m[y * (n + 1), y] = one
    m[rows - 1, y0 + 1] = one
    return m


def phi_lift(p: EvenPolynomial, y0: int = 0) -> CoupledFunction:
    """``(Phi p)(x, y) = p(x)`` on every level; the value at ``(1, inf)`` is ``p(1)``.

    Non-constant ``p`` do not become constant in ``y``, so the result carries
    ``beyond = p`` and lies outside the generator's domain.
    """
    c = p.coeffs
    tail = c.sum() if c.dtype == object else float(c.sum())
    return CoupledFunction(tuple(p for _ in range(y0 + 1)), tail, beyond=p)
