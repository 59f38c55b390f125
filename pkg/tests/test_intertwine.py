import json
import math
from fractions import Fraction

import numpy as np
import pytest
import sympy as sp

from wfintertwine.intertwine import (
    APPROX_POINTS,
    APPROX_TIMES,
    approximate_coupled_semigroup,
    build_coupled_generator,
    coupled_generator_at,
    positive_maximum_check,
    verify_GK_KH,
    verify_Lambda_intertwining,
    verify_Psi_intertwining,
    verify_Pt_approximation,
    verify_PtK_KQt,
)
from wfintertwine.kernels import CoupledFunction, phi_lift, psi_lift
from wfintertwine.poly import FLOAT, INF, RATIONAL, EvenPolynomial, LatticeFunction, birth_rate

X = sp.symbols("x", positive=True)


def symbolic_generator(levels, tail, y):
    """Coupled generator at level ``y`` by symbolic differentiation."""
    f = levels[y]
    nxt = levels[y + 1] if y + 1 < len(levels) else sp.Integer(tail)
    lam = (2 * y + 1) * (2 * y + 2)
    expr = lam * (nxt - f) + (1 - X**2) * sp.diff(f, X, 2) + 4 * (sp.Integer(y) / X - (y + 1) * X) * sp.diff(f, X)
    return sp.expand(sp.cancel(expr))


@pytest.mark.parametrize("n, y0", [(1, 1), (2, 3), (3, 2)])
def test_coupled_generator_matches_symbolic(n, y0):
    rng = np.random.default_rng(n * 10 + y0)
    ints = rng.integers(-5, 6, size=(y0 + 1) * (n + 1) + 1)
    vec = np.array([Fraction(int(v)) for v in ints], dtype=object)
    Gc = build_coupled_generator(n, RATIONAL, y0=y0)
    out = Gc.entries @ vec
    body = vec[:-1].reshape(y0 + 1, n + 1)
    levels = [sum(int(c) * X ** (2 * k) for k, c in enumerate(row)) for row in body]
    for y in range(y0 + 1):
        want = sp.Poly(symbolic_generator(levels, int(vec[-1]), y), X)
        got = sum(out[Gc.index(y, k)] * X ** (2 * k) for k in range(n + 1))
        assert sp.expand(got - want.as_expr()) == 0
    assert out[-1] == 0


def test_coupled_generator_annihilates_constants():
    for n in range(13):
        Gc = build_coupled_generator(n, RATIONAL)
        ones = np.zeros(Gc.size, dtype=object)
        ones[:] = Fraction(0)
        for y in range(n + 1):
            ones[Gc.index(y, 0)] = Fraction(1)
        ones[-1] = Fraction(1)
        assert all(v == 0 for v in Gc.entries @ ones)


def test_coupled_generator_jump_blocks():
    n, y0 = 3, 4
    Gc = build_coupled_generator(n, FLOAT, y0=y0).entries
    w = n + 1
    for y in range(y0 + 1):
        for z in range(y0 + 1):
            block = Gc[y * w : (y + 1) * w, z * w : (z + 1) * w]
            if z == y + 1:
                np.testing.assert_array_equal(block, birth_rate(y) * np.eye(w))
            elif z != y:
                assert not block.any()


def test_coupled_generator_pointwise_agrees_with_matrix(rng):
    n, y0 = 3, 3
    vec = rng.standard_normal((y0 + 1) * (n + 1) + 1)
    f = CoupledFunction.from_vector(vec, n, y0)
    g = CoupledFunction.from_vector(build_coupled_generator(n, FLOAT, y0=y0).entries @ vec, n, y0)
    for x in (0.0, 0.3, 0.9, 1.0):
        for y in range(y0 + 1):
            assert coupled_generator_at(f, x, y) == pytest.approx(g(x, y), abs=1e-10)
    assert coupled_generator_at(f, 1.0, INF) == 0.0


def test_GK_KH_exact_and_float():
    for y0 in range(13):
        r = verify_GK_KH(y0, RATIONAL)
        assert r.passed and r.max_abs_residual == 0.0 and r.tolerance == 0.0
    for y0 in range(21):
        r = verify_GK_KH(y0, FLOAT)
        assert r.passed and r.max_abs_residual <= 1e-12


def test_GK_KH_negative_control():
    r = verify_GK_KH(3, RATIONAL, rates={1: 13})
    assert not r.passed and r.max_abs_residual > 0
    r = verify_GK_KH(3, FLOAT, rates={1: 12.5})
    assert not r.passed


@pytest.mark.parametrize("t", [0.0, 0.01, 0.1, 1.0])
def test_PtK_KQt(t):
    r = verify_PtK_KQt(t, 12)
    assert r.passed and r.max_abs_residual <= 1e-10
    if t == 0.0:
        assert r.max_abs_residual == 0.0


def test_PtK_KQt_residual_stays_small_up_to_t5():
    res = [verify_PtK_KQt(t, 12).max_abs_residual for t in (0.5, 1, 2, 3, 4, 5)]
    assert max(res) <= 1e-10


@pytest.mark.parametrize("n", [0, 1, 4, 8])
def test_Lambda_and_Psi_exact(n):
    r = verify_Lambda_intertwining(n, RATIONAL)
    assert r.passed and r.max_abs_residual == 0.0
    r = verify_Psi_intertwining(n, RATIONAL)
    assert r.passed and r.max_abs_residual == 0.0


def test_Lambda_float_small_residual():
    r = verify_Lambda_intertwining(6, FLOAT)
    assert r.passed


def test_report_serialises():
    r = verify_Psi_intertwining(2, RATIONAL)
    d = json.loads(json.dumps(r.to_json()))
    assert d["identity"] == "Gc.Psi=Psi.H" and d["passed"] is True


# -- small-time approximation ------------------------------------------------


def test_approximation_of_constant_is_exact():
    f = CoupledFunction.constant(1.0)
    for t in (1e-2, 1e-3):
        value, skipped = approximate_coupled_semigroup(f, t, 0.5, 1)
        assert value == pytest.approx(1.0, abs=1e-12)
        assert not skipped


def test_approximation_indicator_example():
    f = psi_lift(LatticeFunction.indicator(0, 0))
    t = 1e-3
    value, _ = approximate_coupled_semigroup(f, t, 0.5, 0)
    assert coupled_generator_at(f, 0.5, 0) == -2.0
    assert abs((value - 1.0) / t + 2.0) <= 10 * t


def test_approximation_halving_on_phi_x2():
    f = phi_lift(EvenPolynomial([0.0, 1.0]))
    r = verify_Pt_approximation([2e-3, 1e-3], f, [(0.6, 1)])
    ratio = r.deviations[0] / r.deviations[1]
    assert 1.6 <= ratio <= 2.4


def test_approximation_default_grid_orders():
    for f in (psi_lift(LatticeFunction.indicator(0, 0)), phi_lift(EvenPolynomial([0.0, 1.0]))):
        r = verify_Pt_approximation(APPROX_TIMES, f, APPROX_POINTS)
        assert r.passed and r.order >= 0.8
        assert all(a >= b for a, b in zip(r.deviations, r.deviations[1:]))


def test_approximation_reports_excluded_quotients():
    f = phi_lift(EvenPolynomial([0.0, 1.0]))
    value, skipped = approximate_coupled_semigroup(f, 1e-3, 0.02, 0)
    assert math.isfinite(value)
    assert skipped and all(s["z"] > 0 for s in skipped)


def test_approximation_rejects_bad_points():
    f = CoupledFunction.constant(1.0)
    with pytest.raises(ValueError):
        verify_Pt_approximation([1e-3], f, [(1.0, 0)])
    with pytest.raises(ValueError):
        verify_Pt_approximation([0.0], f, [(0.5, 0)])


# -- positive maximum principle ------------------------------------------------


def test_maximum_principle_examples():
    const = CoupledFunction.constant(1.0, 2, 2)
    assert coupled_generator_at(const, 0.4, 1) == pytest.approx(0.0, abs=1e-12)
    y0 = 3
    neg = CoupledFunction(tuple(EvenPolynomial([0.0, -1.0]) for _ in range(y0 + 1)), -1.0)
    for y in range(y0 + 1):
        assert coupled_generator_at(neg, 0.0, y) <= 0.0


def test_maximum_principle_random():
    r = positive_maximum_check(5, 500, np.random.default_rng(3))
    assert r.violations == 0 and r.applicable > 0 and r.passed
    json.dumps(r.to_json())
    with pytest.raises(ValueError):
        positive_maximum_check(5, 0, np.random.default_rng(3))
