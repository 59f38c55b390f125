import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import polynomial as P

from wfintertwine.poly import (
    FLOAT,
    INF,
    RATIONAL,
    EvenPolynomial,
    GeneratorMatrix,
    LatticeFunction,
    NumericFailure,
    apply_semigroup_P,
    apply_semigroup_Q,
    birth_rate,
    build_G_matrix,
    build_H_matrix,
    matrix_exp,
)


def dense_coeffs(p: EvenPolynomial) -> np.ndarray:
    """Ordinary power-series coefficients of an even polynomial."""
    out = np.zeros(2 * p.coeffs.size - 1)
    out[::2] = p.coeffs.astype(float)
    return out


def wf_generator_oracle(p: EvenPolynomial) -> np.ndarray:
    # (1 - x^2) p'' with numpy's polynomial calculus
    second = P.polyder(dense_coeffs(p), 2)
    return P.polymul([1.0, 0.0, -1.0], second)


# -- rates and polynomials ----------------------------------------------------


@pytest.mark.parametrize("y, rate", [(0, 2), (1, 12), (4, 90)])
def test_birth_rate_values(y, rate):
    assert birth_rate(y) == rate


def test_birth_rate_rejects_negative():
    with pytest.raises(ValueError):
        birth_rate(-1)


def test_even_polynomial_evaluation():
    p = EvenPolynomial([1.0, -2.0, 3.0])
    x = np.linspace(0, 1, 7)
    np.testing.assert_allclose(p(x), 1 - 2 * x**2 + 3 * x**4, rtol=0, atol=1e-15)
    assert p.degree_bound == 2
    assert p.padded(4).coeffs.tolist() == [1, -2, 3, 0, 0]


def test_even_polynomial_rejects_empty_and_bad_padding():
    with pytest.raises(ValueError):
        EvenPolynomial([])
    with pytest.raises(ValueError):
        EvenPolynomial([1.0, 2.0]).padded(0)
    with pytest.raises(ValueError):
        EvenPolynomial.monomial(3, 2)


def test_lattice_function_tail_semantics():
    f = LatticeFunction([1.0, 2.0, 3.0], 7.0)
    assert f.cutoff == 2
    assert f(0) == 1.0 and f(2) == 3.0
    assert f(3) == 7.0 and f(100) == 7.0 and f(INF) == 7.0
    assert f.as_vector().tolist() == [1, 2, 3, 7]
    g = f.extended(4)
    assert g.values.tolist() == [1, 2, 3, 7, 7] and g.tail == 7.0


# -- generator matrices ---------------------------------------------------------


def test_G_small_cases():
    np.testing.assert_array_equal(build_G_matrix(0).entries, [[0.0]])
    g1 = build_G_matrix(1).entries
    # column of x^2 is (2, -2): G x^2 = 2 - 2 x^2
    np.testing.assert_array_equal(g1[:, 1], [2.0, -2.0])
    np.testing.assert_array_equal(g1[:, 0], [0.0, 0.0])
    assert build_G_matrix(2).entries[1, 2] == 12.0


@pytest.mark.parametrize("n", [1, 3, 6, 10])
def test_G_matches_differentiation(n):
    G = build_G_matrix(n)
    for k in range(n + 1):
        e = EvenPolynomial.monomial(k, n)
        got = dense_coeffs(EvenPolynomial(G.apply(e.coeffs)))
        want = wf_generator_oracle(e)
        m = max(got.size, want.size)
        np.testing.assert_allclose(np.pad(got, (0, m - got.size)), np.pad(want, (0, m - want.size)), atol=0)


def test_H_small_cases():
    np.testing.assert_array_equal(build_H_matrix(0).entries, [[-2.0, 2.0], [0.0, 0.0]])
    np.testing.assert_array_equal(build_H_matrix(1).entries[1], [0.0, -12.0, 12.0])
    np.testing.assert_array_equal(build_H_matrix(3).entries[-1], np.zeros(5))


@pytest.mark.parametrize("n", [0, 5, 20])
def test_generators_annihilate_constants(n):
    for arith in (RATIONAL, FLOAT):
        G = build_G_matrix(n, arith).entries
        assert all(v == 0 for v in G[:, 0])
        H = build_H_matrix(n, arith).entries
        assert all(v == 0 for v in H.sum(axis=1))


def test_H_action_matches_definition(rng):
    y0 = 6
    f = LatticeFunction(rng.standard_normal(y0 + 1), 0.3)
    got = build_H_matrix(y0).apply(f.as_vector())
    want = [birth_rate(y) * (f(y + 1) - f(y)) for y in range(y0 + 1)] + [0.0]
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_rational_entries_are_fractions():
    G = build_G_matrix(3, RATIONAL)
    assert all(isinstance(v, Fraction) for v in G.entries.flat)
    assert G.to_json()["entries"][0][1] == 2


def test_generator_matrix_must_be_square():
    with pytest.raises(ValueError):
        GeneratorMatrix(np.zeros((2, 3)), "lattice", FLOAT)


# -- matrix exponential -------------------------------------------------------


def test_expm_two_state_closed_form():
    e = matrix_exp(build_H_matrix(0), 1.0).entries
    q = math.exp(-2.0)
    np.testing.assert_allclose(e, [[q, 1 - q], [0, 1]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("t", [0.1, 1.0, 5.0])
def test_expm_three_state_closed_form(t):
    # rates 2 and 12 then absorption: Q(0,0)=e^{-2t}, Q(0,1)=(e^{-2t}-e^{-12t})/5
    e = matrix_exp(build_H_matrix(1), t).entries
    a, b = math.exp(-2 * t), math.exp(-12 * t)
    want = np.array([[a, 0.2 * (a - b), 1 - a - 0.2 * (a - b)], [0, b, 1 - b], [0, 0, 1]])
    np.testing.assert_allclose(e, want, rtol=0, atol=1e-12)


def test_expm_zero_time_is_identity():
    for M in (build_G_matrix(7), build_H_matrix(4)):
        e = matrix_exp(M, 0.0).entries
        assert np.array_equal(e, np.eye(M.size))


@pytest.mark.parametrize("n, t", [(4, 0.3), (12, 1.0), (24, 5.0)])
def test_expm_agrees_with_scipy(n, t):
    for M in (build_G_matrix(n), build_H_matrix(n)):
        ours = matrix_exp(M, t).entries
        ref = scipy.linalg.expm(t * M.entries)
        assert np.abs(ours - ref).max() <= 1e-11 * max(1.0, np.abs(ref).max())


def test_expm_rejects_bad_input():
    with pytest.raises(TypeError):
        matrix_exp(build_H_matrix(1, RATIONAL), 1.0)
    with pytest.raises(ValueError):
        matrix_exp(build_H_matrix(1), -1.0)
    with pytest.raises(ValueError):
        matrix_exp(build_H_matrix(1), 1.0, tol=0.0)


def test_expm_reports_overflow():
    M = GeneratorMatrix(np.array([[1e300, 0.0], [0.0, 0.0]]), "lattice", FLOAT)
    with pytest.raises(NumericFailure):
        matrix_exp(M, 10.0)


# -- semigroups -----------------------------------------------------------------


def test_P_on_x_squared_closed_form():
    p = EvenPolynomial([0.0, 1.0])
    for t in (0.0, 0.25, 0.5, 2.0):
        q = apply_semigroup_P(t, p)
        np.testing.assert_allclose(q.coeffs, [1 - math.exp(-2 * t), math.exp(-2 * t)], atol=1e-15)
    assert apply_semigroup_P(0.5, p)(0.0) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert apply_semigroup_P(40.0, p).coeffs == pytest.approx([1.0, 0.0], abs=1e-15)


def test_P_and_Q_fix_constants():
    assert apply_semigroup_P(0.7, EvenPolynomial.constant(3.0, 5)).coeffs == pytest.approx([3, 0, 0, 0, 0, 0])
    f = apply_semigroup_Q(0.7, LatticeFunction.constant(2.5, 4))
    np.testing.assert_allclose(f.as_vector(), 2.5, rtol=1e-14)


def test_Q_indicator_closed_form():
    f = apply_semigroup_Q(1.0, LatticeFunction.indicator(0, 0))
    assert f(0) == pytest.approx(math.exp(-2.0), abs=1e-15)
    assert f.tail == 0.0
    g = LatticeFunction([0.2, 0.4], 1.0)
    assert apply_semigroup_Q(0.0, g).as_vector().tolist() == g.as_vector().tolist()


def test_P_refuses_degree_above_cap():
    with pytest.raises(ValueError):
        apply_semigroup_P(0.1, EvenPolynomial.monomial(25))


@settings(max_examples=25, deadline=None)
@given(
    coeffs=st.lists(st.floats(-3, 3), min_size=1, max_size=8),
    s=st.sampled_from([0.1, 0.3]),
    t=st.sampled_from([0.1, 0.3]),
)
def test_semigroup_property_P(coeffs, s, t):
    p = EvenPolynomial(coeffs)
    lhs = apply_semigroup_P(s + t, p).coeffs
    rhs = apply_semigroup_P(t, apply_semigroup_P(s, p)).coeffs
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-11 * (1 + np.abs(coeffs).max()))


@settings(max_examples=25, deadline=None)
@given(
    values=st.lists(st.floats(-3, 3), min_size=1, max_size=8),
    tail=st.floats(-3, 3),
    s=st.sampled_from([0.1, 0.3]),
    t=st.sampled_from([0.1, 0.3]),
)
def test_semigroup_property_Q(values, tail, s, t):
    f = LatticeFunction(values, tail)
    lhs = apply_semigroup_Q(s + t, f).as_vector()
    rhs = apply_semigroup_Q(t, apply_semigroup_Q(s, f)).as_vector()
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    roots=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=4),
    t=st.sampled_from([0.05, 0.5, 2.0]),
)
def test_P_preserves_positivity(roots, t):
    # products of (x^2 - r)^2 are nonnegative even polynomials
    c = np.array([1.0])
    for r in roots:
        c = np.convolve(c, np.convolve([-r, 1.0], [-r, 1.0]))
    grid = np.linspace(0, 1, 1000)
    assert apply_semigroup_P(t, EvenPolynomial(c))(grid).min() >= -1e-8


def test_P_x_squared_monotone_in_t():
    grid = np.linspace(0, 1, 101)
    vals = [apply_semigroup_P(t, EvenPolynomial([0.0, 1.0]))(grid) for t in (0, 0.25, 0.5, 1, 2)]
    assert all(np.all(b >= a - 1e-15) for a, b in zip(vals, vals[1:]))


@settings(max_examples=20, deadline=None)
@given(y0=st.integers(0, 15), t=st.floats(0.0, 3.0))
def test_Q_rows_are_probability_vectors(y0, t):
    e = matrix_exp(build_H_matrix(y0), t).entries
    assert e.min() >= -1e-14
    np.testing.assert_allclose(e.sum(axis=1), 1.0, atol=1e-13)
