"""Finite-dimensional generators and semigroups on invariant subspaces.

The reflected Wright-Fisher generator ``G f = (1 - x^2) f''`` maps the even
polynomials of degree at most ``2n`` into themselves, and the pure birth
generator ``H f(y) = lambda_y (f(y+1) - f(y))`` maps lattice functions that are
constant beyond a cutoff into themselves.  Both are therefore represented
exactly by small square matrices, and their semigroups by matrix exponentials.

Coefficient vectors act as column vectors: ``(M @ c)`` is the image of ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Mapping

import numpy as np

__all__ = [
    "INF",
    "FLOAT_DEGREE_CAP",
    "NumericFailure",
    "EvenPolynomial",
    "LatticeFunction",
    "GeneratorMatrix",
    "birth_rate",
    "build_G_matrix",
    "build_H_matrix",
    "matrix_exp",
    "apply_semigroup_P",
    "apply_semigroup_Q",
]

#: The point at infinity of the compactified lattice.
INF = math.inf

#: Largest even-polynomial subspace index used by default in float mode.
FLOAT_DEGREE_CAP = 24

RATIONAL = "rational"
FLOAT = "float"


class NumericFailure(ArithmeticError):
    """Overflow or non-finite values in a floating point computation."""


def _check_arithmetic(arithmetic: str) -> str:
    if arithmetic == "exact":
        return RATIONAL
    if arithmetic not in (RATIONAL, FLOAT):
        raise ValueError(f"arithmetic must be 'rational' or 'float', got {arithmetic!r}")
    return arithmetic


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _as_vector(values, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.dtype.kind not in "fiuO":
        arr = arr.astype(float)
    if arr.dtype.kind in "iu":
        arr = arr.astype(float)
    return arr.reshape(-1)


@dataclass(frozen=True, eq=False)
class EvenPolynomial:
    """``sum_k coeffs[k] * x**(2k)``; ``degree_bound`` is ``len(coeffs) - 1``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = _as_vector(self.coeffs)
        if c.size == 0:
            raise ValueError("an even polynomial needs at least one coefficient")
        object.__setattr__(self, "coeffs", _frozen(c))

    @property
    def degree_bound(self) -> int:
        return self.coeffs.size - 1

    @classmethod
    def constant(cls, c, n: int = 0) -> "EvenPolynomial":
        coeffs = np.zeros(n + 1)
        coeffs[0] = c
        return cls(coeffs)

    @classmethod
    def monomial(cls, k: int, n: int | None = None) -> "EvenPolynomial":
        """The monomial ``x**(2k)`` inside the subspace of index ``n``."""
        n = k if n is None else n
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        coeffs = np.zeros(n + 1)
        coeffs[k] = 1.0
        return cls(coeffs)

    def padded(self, n: int) -> "EvenPolynomial":
        if n < self.degree_bound:
            raise ValueError("cannot pad to a smaller degree bound")
        out = np.zeros(n + 1, dtype=self.coeffs.dtype)
        if out.dtype == object:
            out[:] = 0
        out[: self.coeffs.size] = self.coeffs
        return EvenPolynomial(out)

    def evaluate(self, x):
        """Value at ``x`` (scalar or array), Horner's rule in ``x**2``."""
        u = np.asarray(x, dtype=float) ** 2
        acc = np.zeros_like(u) + float(self.coeffs[-1])
        for c in self.coeffs[-2::-1]:
            acc = acc * u + float(c)
        return acc if acc.ndim else float(acc)

    __call__ = evaluate

    def __repr__(self):
        return f"EvenPolynomial({list(self.coeffs)!r})"


@dataclass(frozen=True, eq=False)
class LatticeFunction:
    """A function on ``{0, 1, ..., inf}`` that is constant beyond ``cutoff``.

    ``values`` holds ``f(0), ..., f(cutoff)``; ``f(y) = tail`` for ``y > cutoff``
    and at ``y = inf``.
    """

    values: np.ndarray
    tail: float

    def __post_init__(self):
        v = _as_vector(self.values)
        if v.size == 0:
            raise ValueError("a lattice function needs at least f(0)")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def cutoff(self) -> int:
        return self.values.size - 1

    @classmethod
    def constant(cls, c, cutoff: int = 0) -> "LatticeFunction":
        return cls(np.full(cutoff + 1, c, dtype=float), c)

    @classmethod
    def indicator(cls, y: int, cutoff: int | None = None) -> "LatticeFunction":
        """Indicator of the single level ``{y}``."""
        cutoff = y if cutoff is None else cutoff
        v = np.zeros(cutoff + 1)
        v[y] = 1.0
        return cls(v, 0.0)

    def as_vector(self) -> np.ndarray:
        """Values ``(f(0), ..., f(cutoff), f(inf))`` in the order used by H."""
        return np.append(self.values, self.tail)

    @classmethod
    def from_vector(cls, vec) -> "LatticeFunction":
        vec = np.asarray(vec)
        return cls(vec[:-1], vec[-1])

    def extended(self, cutoff: int) -> "LatticeFunction":
        if cutoff < self.cutoff:
            raise ValueError("cannot shrink the cutoff")
        extra = np.full(cutoff - self.cutoff, self.tail, dtype=self.values.dtype)
        return LatticeFunction(np.concatenate([self.values, extra]), self.tail)

    def __call__(self, y):
        if y == INF or y > self.cutoff:
            return self.tail
        if y < 0:
            raise ValueError("lattice points are nonnegative")
        return self.values[int(y)]


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Dense matrix of a generator (or semigroup) restricted to a subspace.

    ``basis`` is one of ``"even-poly"``, ``"lattice"`` or ``"coupled"``.
    """

    entries: np.ndarray
    basis: str
    arithmetic: str

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("generator matrices are square")
        object.__setattr__(self, "arithmetic", _check_arithmetic(self.arithmetic))
        object.__setattr__(self, "entries", _frozen(e))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def as_float(self) -> "GeneratorMatrix":
        if self.arithmetic == FLOAT:
            return self
        return GeneratorMatrix(self.entries.astype(float), self.basis, FLOAT)

    def apply(self, vec) -> np.ndarray:
        return self.entries @ np.asarray(vec)

    def to_json(self) -> dict:
        rows = [[_json_scalar(v) for v in row] for row in self.entries]
        return {"basis": self.basis, "arithmetic": self.arithmetic, "entries": rows}


def _json_scalar(v):
    if isinstance(v, Fraction):
        return str(v) if v.denominator != 1 else v.numerator
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def birth_rate(y: int) -> int:
    """Jump rate ``(2y+1)(2y+2)`` of the pure birth process out of level ``y``."""
    if y < 0:
        raise ValueError(f"birth rates are defined for y >= 0, got {y}")
    return (2 * y + 1) * (2 * y + 2)


def _zeros(m: int, arithmetic: str) -> np.ndarray:
    if arithmetic == RATIONAL:
        out = np.empty((m, m), dtype=object)
        out[:] = Fraction(0)
        return out
    return np.zeros((m, m))


def _scalar(v, arithmetic: str):
    return Fraction(v) if arithmetic == RATIONAL else float(v)


def build_G_matrix(n: int, arithmetic: str = FLOAT) -> GeneratorMatrix:
    """Matrix of ``(1 - x^2) d^2/dx^2`` on even polynomials of degree <= 2n.

    ``G x^{2k} = lambda_{k-1} x^{2k-2} - lambda_{k-1} x^{2k}``, so column ``k``
    has ``lambda_{k-1}`` in row ``k-1`` and ``-lambda_{k-1}`` on the diagonal.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    arithmetic = _check_arithmetic(arithmetic)
    m = _zeros(n + 1, arithmetic)
    for k in range(1, n + 1):
        lam = _scalar(birth_rate(k - 1), arithmetic)
        m[k - 1, k] = lam
        m[k, k] = -lam
    return GeneratorMatrix(m, "even-poly", arithmetic)


def build_H_matrix(
    y0: int, arithmetic: str = FLOAT, rates: Mapping[int, float] | None = None
) -> GeneratorMatrix:
    """Pure birth generator on ``(f(0), ..., f(y0), f(inf))``.

    Row ``y0`` jumps into the ``inf`` slot because ``f(y0+1) = f(inf)`` for
    lattice functions with cutoff ``y0``.  ``rates`` overrides individual
    ``lambda_y`` (negative controls only).
    """
    if y0 < 0:
        raise ValueError("y0 must be >= 0")
    arithmetic = _check_arithmetic(arithmetic)
    rates = rates or {}
    m = _zeros(y0 + 2, arithmetic)
    for y in range(y0 + 1):
        lam = _scalar(rates.get(y, birth_rate(y)), arithmetic)
        m[y, y] = -lam
        m[y, y + 1] = lam
    return GeneratorMatrix(m, "lattice", arithmetic)


# Taylor/scaling-and-squaring.  theta bounds the scaled norm; the Taylor series
# is summed until the next term is below tol relative to the partial sum.
_THETA = 0.5
_MAX_TERMS = 60


def _expm(a: np.ndarray, tol: float) -> np.ndarray:
    m = a.shape[0]
    norm = np.abs(a).sum(axis=0).max() if m else 0.0
    if not math.isfinite(norm):
        raise NumericFailure("non-finite entries in matrix exponential argument")
    squarings = max(0, math.ceil(math.log2(norm / _THETA))) if norm > 0 else 0
    b = a / 2.0**squarings
    result = np.eye(m)
    term = np.eye(m)
    for j in range(1, _MAX_TERMS + 1):
        term = term @ b / j
        result = result + term
        if np.abs(term).max() <= tol * np.abs(result).max():
            break
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(squarings):
            result = result @ result
    if not np.all(np.isfinite(result)):
        raise NumericFailure("matrix exponential overflowed")
    return result


@lru_cache(maxsize=512)
def _expm_cached(key: bytes, shape: tuple, t: float, tol: float) -> np.ndarray:
    a = np.frombuffer(key, dtype=float).reshape(shape)
    return _frozen(_expm(t * a, tol))


def matrix_exp(M: GeneratorMatrix, t: float, tol: float = 1e-15) -> GeneratorMatrix:
    """``exp(t M)`` for a float generator matrix.

    Scaling and squaring of a truncated Taylor series; ``t = 0`` returns the
    identity exactly.
    """
    if M.arithmetic != FLOAT:
        raise TypeError("matrix_exp needs a float matrix; call as_float() first")
    if t < 0:
        raise ValueError("t must be >= 0")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if t == 0:
        return GeneratorMatrix(np.eye(M.size), M.basis, FLOAT)
    a = np.ascontiguousarray(M.entries, dtype=float)
    e = _expm_cached(a.tobytes(), a.shape, float(t), float(tol))
    return GeneratorMatrix(e.copy(), M.basis, FLOAT)


@lru_cache(maxsize=256)
def _G_float(n: int) -> GeneratorMatrix:
    return build_G_matrix(n, FLOAT)


@lru_cache(maxsize=256)
def _H_float(y0: int) -> GeneratorMatrix:
    return build_H_matrix(y0, FLOAT)


def apply_semigroup_P(
    t: float, p: EvenPolynomial, tol: float = 1e-15, max_degree: int = FLOAT_DEGREE_CAP
) -> EvenPolynomial:
    """Wright-Fisher semigroup applied to an even polynomial (exact subspace).

    The monomial basis loses accuracy in double precision as the degree
    grows, so degree bounds above ``max_degree`` are refused.
    """
    if p.degree_bound > max_degree:
        raise ValueError(f"degree bound {p.degree_bound} exceeds the float cap {max_degree}")
    e = matrix_exp(_G_float(p.degree_bound), t, tol)
    return EvenPolynomial(e.entries @ p.coeffs.astype(float))


def apply_semigroup_Q(t: float, f: LatticeFunction, tol: float = 1e-15) -> LatticeFunction:
    """Pure birth semigroup applied to a lattice function; the tail is fixed."""
    e = matrix_exp(_H_float(f.cutoff), t, tol)
    return LatticeFunction.from_vector(e.entries @ f.as_vector().astype(float))

