import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lcskit.forms import (
    KFormField,
    KFormValue,
    SmoothMap,
    VectorField,
    exterior_derivative,
    form_from_spec,
    interior_product,
    lie_derivative,
    lie_derivative_fd,
    max_coeff,
    nondegeneracy,
    pullback,
    wedge,
    wedge_fields,
)

# expression-built test forms: {degree: [(multi-index, text), ...]}
FORMS = {
    2: {
        0: [((), "sin(x1)*x2 + x1^2")],
        1: [((1,), "x1*x2^2"), ((2,), "cos(x1 + x2)")],
        2: [((1, 2), "exp(x1 - x2) + 0.5")],
    },
    4: {
        0: [((), "x1*x3 - sin(x2*x4)")],
        1: [((1,), "x2*x4"), ((2,), "sin(x3)"), ((3,), "x1^2 - x4"), ((4,), "exp(0.3*x2)")],
        2: [((1, 2), "x3*x4"), ((1, 3), "1 + x2^2"), ((2, 4), "cos(x1)"), ((3, 4), "x1*x2 - x3")],
        3: [((1, 2, 3), "x4^2"), ((2, 3, 4), "sin(x1 + x2)")],
    },
}


def field(n, k):
    return form_from_spec(FORMS[n][k], n, k)


def sym(n, k):
    return {tuple(i - 1 for i in I): oracles.sym(t, n) for I, t in FORMS[n][k]}


def points(n, count=120, seed=0):
    return np.random.default_rng(seed).uniform(-1.2, 1.2, (count, n))


# ------------------------------------------------------------ pointwise algebra


def test_basis_wedge():
    v = wedge(KFormValue.basis(2, [1]), KFormValue.basis(2, [2]))
    assert v.k == 2 and v.coeffs.tolist() == [1.0]


def test_wedge_by_hand():
    # (3 dx1 + 5 dx2) ^ (2 dx1) = 10 dx2^dx1 = -10 dx1^dx2
    a = KFormValue(2, 1, [3.0, 5.0])
    b = KFormValue(2, 1, [2.0, 0.0])
    assert wedge(a, b).coeffs.tolist() == [-10.0]


def test_wedge_beyond_dimension_is_empty_zero():
    w = wedge(KFormValue.basis(2, [1, 2]), KFormValue.basis(2, [1]))
    assert w.k == 3 and w.coeffs.size == 0 and w.max_abs() == 0.0


def test_wedge_dimension_mismatch():
    with pytest.raises(ValueError):
        wedge(KFormValue.basis(2, [1]), KFormValue.basis(3, [1]))


@settings(max_examples=200)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_alpha_wedge_alpha_is_exactly_zero(c):
    a = KFormValue(4, 1, c)
    assert np.all(wedge(a, a).coeffs == 0.0)


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_graded_commutativity_and_associativity(seed):
    r = np.random.default_rng(seed)
    a = KFormValue(4, 1, r.standard_normal(4))
    b = KFormValue(4, 2, r.standard_normal(6))
    c = KFormValue(4, 1, r.standard_normal(4))
    assert np.allclose(wedge(a, b).coeffs, wedge(b, a).coeffs)  # (-1)^{1*2} = +1
    assert np.allclose(wedge(a, c).coeffs, -wedge(c, a).coeffs)
    assert np.allclose(wedge(wedge(a, b), c).coeffs, wedge(a, wedge(b, c)).coeffs)


def test_evaluation_uses_determinant_convention():
    w = KFormValue.basis(2, [1, 2])
    assert w((1, 0), (0, 1)) == 1.0
    assert w((0, 1), (1, 0)) == -1.0
    assert w.matrix().tolist() == [[0.0, 1.0], [-1.0, 0.0]]


def test_interior_examples():
    assert interior_product([1, 0], KFormValue.basis(2, [1, 2])).coeffs.tolist() == [0.0, 1.0]
    omega = KFormValue.basis(4, [1, 3]) + KFormValue.basis(4, [2, 4])
    assert interior_product([1, 0, 0, 0], omega).coeffs.tolist() == [0.0, 0.0, 1.0, 0.0]
    a = KFormValue(4, 2, np.arange(1.0, 7.0))
    X = [0.3, -1.0, 2.0, 0.5]
    assert np.array_equal(interior_product(X, 2.5 * a).coeffs, 2.5 * interior_product(X, a).coeffs)
    with pytest.raises(ValueError):
        interior_product([1.0], KFormValue(1, 0, [1.0]))


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_interior_nilpotent(seed):
    r = np.random.default_rng(seed)
    for k in (2, 3):
        size = len(KFormValue.zero(4, k).coeffs)
        # dyadic inputs keep every product exact, so the cancellation is exact
        X = r.integers(-8, 9, 4) / 4.0
        w = KFormValue(4, k, r.integers(-8, 9, size) / 8.0)
        assert np.all(interior_product(X, interior_product(X, w)).coeffs == 0.0)
        # general floats: roundoff only
        X = r.standard_normal(4)
        w = KFormValue(4, k, r.standard_normal(size))
        scale = np.abs(X).sum() ** 2 * np.abs(w.coeffs).max()
        assert np.all(np.abs(interior_product(X, interior_product(X, w)).coeffs) <= 4e-16 * scale)


def test_interior_matches_oracle():
    X = [0.3, -1.1, 0.8, 2.0]
    p = [0.2, -0.5, 0.9, 0.4]
    w = field(4, 3)
    got = interior_product(X, w.at(p)).coeffs
    expect = oracles.evaluate(oracles.interior(X, sym(4, 3), 4), 4, 2, p)
    assert np.allclose(got, expect, atol=1e-13)


def test_nondegeneracy_examples():
    nd = nondegeneracy(KFormValue.basis(2, [1, 2]))
    assert nd.nondegenerate and nd.condition == pytest.approx(1.0)
    assert not nondegeneracy(KFormValue.zero(4, 2)).nondegenerate
    assert not nondegeneracy(KFormValue(3, 2, [1.0, 2.0, 3.0])).nondegenerate
    # omega_theta = dp1^dx1 + dp2^dx2 - a p2 dx1^dx2 at p2 = 1, a = 1
    # coefficients (12, 13, 14, 23, 24, 34) = (-1, -1, 0, 0, -1, 0); det = 1 by cofactor expansion
    nd = nondegeneracy(KFormValue(4, 2, [-1.0, -1.0, 0.0, 0.0, -1.0, 0.0]))
    assert nd.nondegenerate and nd.determinant == pytest.approx(1.0)


# ---------------------------------------------------------------- calculus


def test_d_examples():
    w = form_from_spec([((2,), "x1")], 2, 1)
    assert exterior_derivative(w).at([0.4, 0.9]).coeffs.tolist() == [1.0]
    f = form_from_spec([((), "sin(x1)*x2")], 2, 0)
    assert max_coeff(exterior_derivative(exterior_derivative(f)), points(2)) == 0.0
    top = form_from_spec([((1, 2), "x1")], 2, 2)
    assert exterior_derivative(top).k == 3 and exterior_derivative(top).values(points(2, 3)).shape == (3, 0)


@pytest.mark.parametrize("n, k", [(2, 0), (2, 1), (4, 0), (4, 1), (4, 2), (4, 3)])
def test_d_matches_symbolic_oracle(n, k):
    P = points(n, 6, seed=k)
    got = exterior_derivative(field(n, k)).values(P)
    ref = oracles.d(sym(n, k), n)
    for p, row in zip(P, got):
        assert np.allclose(row, oracles.evaluate(ref, n, k + 1, p), atol=1e-12)


def test_wedge_fields_match_symbolic_oracle():
    P = points(4, 5)
    got = wedge_fields(field(4, 1), field(4, 2)).values(P)
    ref = oracles.wedge(sym(4, 1), sym(4, 2))
    for p, row in zip(P, got):
        assert np.allclose(row, oracles.evaluate(ref, 4, 3, p), atol=1e-12)


MAP4 = ["x1 + 0.2*sin(x2)", "x2*exp(0.1*x1)", "x3 - 0.3*x1*x4", "x4 + 0.1*x3^2"]
MAP4_B = ["cos(x1)*x2", "x1 + x3", "x4^2 - x2", "sin(x3) + x1"]


def test_pullback_matches_symbolic_oracle():
    F = SmoothMap.from_exprs(MAP4, 4)
    Fs = [oracles.sym(t, 4) for t in MAP4]
    P = points(4, 4)
    got = pullback(F, field(4, 2)).values(P)
    ref = oracles.pullback(Fs, sym(4, 2), 4, 2)
    for p, row in zip(P, got):
        assert np.allclose(row, oracles.evaluate(ref, 4, 2, p), atol=1e-12)


def test_pullback_identity_and_linear():
    w = field(4, 2)
    P = points(4, 20)
    assert np.array_equal(pullback(SmoothMap.identity(4), w).values(P), w.values(P))
    A = np.array([[2.0, 1.0], [0.5, -3.0]])
    area = form_from_spec([((1, 2), "1")], 2, 2)
    assert pullback(SmoothMap.linear(A), area).at([0.3, 0.1]).coeffs[0] == pytest.approx(np.linalg.det(A))


def test_pullback_by_collapse_onto_q_kills_form_vanishing_on_q():
    # phi_0 collapses R^2 onto the x-axis; tau restricted to T(x-axis) pairs is trivially 0
    collapse = SmoothMap.from_exprs(["x1", "0"], 2)
    tau = form_from_spec([((1, 2), "1 + x1*x2")], 2, 2)
    assert max_coeff(pullback(collapse, tau), points(2)) == 0.0


def test_lie_examples():
    X = VectorField.constant([1.0, 0.0])
    w = form_from_spec([((2,), "x1")], 2, 1)
    assert lie_derivative(X, w).at([0.7, -0.2]).coeffs.tolist() == [0.0, 1.0]
    const = form_from_spec([((1, 2), "3")], 2, 2)
    assert max_coeff(lie_derivative(VectorField.constant([0.4, -2.0]), const), points(2)) == 0.0


def test_lie_matches_flow_derivative_oracle():
    Xt = ["x2", "-x1 + 0.5*x3", "sin(x4)", "x1*x2"]
    X = VectorField.from_exprs(Xt, 4)
    Xs = [oracles.sym(t, 4) for t in Xt]
    P = points(4, 3)
    got = lie_derivative(X, field(4, 2)).values(P)
    ref = oracles.lie_by_flow(Xs, sym(4, 2), 4, 2)
    for p, row in zip(P, got):
        assert np.allclose(row, oracles.evaluate(ref, 4, 2, p), atol=1e-11)


def test_smooth_map_jacobian_cross_check():
    F = SmoothMap.from_exprs(MAP4, 4)
    assert F.check_jacobian(points(4, 10)) < 1e-8


def test_black_box_field_uses_central_differences():
    ref = field(4, 1)
    bb = KFormField.from_callable(4, 1, lambda P: ref.values(P))
    assert not bb.exact
    P = points(4, 100)
    assert np.allclose(exterior_derivative(bb).values(P), exterior_derivative(ref).values(P), atol=1e-8)
    assert max_coeff(exterior_derivative(exterior_derivative(bb)), P) <= 1e-5


def test_form_from_spec_validation():
    assert max_coeff(form_from_spec([], 3, 2), points(3, 5)) == 0.0
    assert form_from_spec([((1, 2), "1")], 2, 2).at([5.0, -1.0]).coeffs.tolist() == [1.0]
    eta = form_from_spec([((1,), "p1"), ((2,), "p2")], 4, 1, "cotangent")
    assert eta.at([9.0, 9.0, 3.0, 5.0]).coeffs.tolist() == [3.0, 5.0, 0.0, 0.0]
    for bad in ([((2, 1), "1")], [((1, 2), "1"), ((1, 2), "x1")], [((1, 3), "1")], [((1,), "1")]):
        with pytest.raises(ValueError):
            form_from_spec(bad, 2, 2)


def test_values_shape_and_value_errors():
    w = field(4, 2)
    assert w.values(points(4, 7)).shape == (7, 6)
    with pytest.raises(ValueError):
        KFormValue(2, 1, [1.0])
    with pytest.raises(ValueError):
        KFormValue.basis(2, [1, 2]) + KFormValue.basis(2, [1])
