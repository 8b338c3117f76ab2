import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lcskit import dual
from lcskit.config import Tolerances
from lcskit.cotangent import CotangentModel, hr_form
from lcskit.forms import (
    KFormField,
    exterior_derivative,
    form_from_spec,
    function_field,
    max_coeff,
    scale,
)
from lcskit.lcs import (
    ConformalFactor,
    LcsStructure,
    NotClosedError,
    StarPatch,
    check_lcs,
    conformal_equivalence,
    conformal_rescale,
    d_theta,
    local_potential,
    potential_residual,
    transition_constant,
)

STD4 = form_from_spec([((1, 3), "1"), ((2, 4), "1")], 4, 2)
ZERO4 = KFormField.zero(4, 1)


def pts(n, count=80, seed=0, r=1.0):
    return np.random.default_rng(seed).uniform(-r, r, (count, n))


def test_d_theta_untwisted_limit_is_d():
    w = form_from_spec([((1,), "x2*x3"), ((3,), "sin(x1)")], 3, 1)
    P = pts(3)
    diff = d_theta(w, KFormField.zero(3, 1)).values(P) - exterior_derivative(w).values(P)
    assert np.max(np.abs(diff)) == 0.0


def test_d_theta_kills_conformal_multiple_of_closed_form():
    f = function_field("sin(x1*x2) + x3^2", 4)
    w = conformal_rescale(STD4, f, sign=1)
    assert max_coeff(d_theta(w, exterior_derivative(f)), pts(4)) <= 1e-8


def test_d_theta_rejects_bad_theta():
    with pytest.raises(ValueError):
        d_theta(STD4, STD4)


def test_check_lcs_standard_passes():
    rep = check_lcs(LcsStructure(STD4, ZERO4), pts(4))
    assert rep.passed
    assert rep["lcs-condition"].max_residual == 0.0


def test_check_lcs_fails_on_lcs_condition():
    theta = form_from_spec([((1,), "1")], 4, 1)
    rep = check_lcs(LcsStructure(STD4, theta), pts(4))
    assert rep.failed() == ["lcs-condition"]
    # dx1 ^ (dx1^dx3 + dx2^dx4) = dx1^dx2^dx4, coefficient one everywhere
    assert rep["lcs-condition"].max_residual == pytest.approx(1.0)


def test_check_lcs_haller_rybicki_passes():
    hr = hr_form(CotangentModel(2), form_from_spec([((1,), "cos(x2)"), ((2,), "-x1*sin(x2)")], 2, 1))
    assert check_lcs(hr.structure(), pts(4, seed=3)).passed


def test_check_lcs_odd_dimension_degenerate():
    w = form_from_spec([((1, 2), "1")], 3, 2)
    rep = check_lcs(LcsStructure(w, KFormField.zero(3, 1)), pts(3))
    assert rep.failed() == ["nondegenerate"]


# ------------------------------------------------------------------ potentials


def ball(n, r=2.0, seed=1, base=None):
    base = np.zeros(n) if base is None else np.asarray(base, float)
    S = pts(n, 40, seed, r / 2) + base
    return StarPatch.ball(base, r, samples=S)


def test_potential_of_dx1_is_x1():
    theta = form_from_spec([((1,), "1")], 3, 1)
    F = local_potential(theta, ball(3))
    P = pts(3, seed=5)
    assert np.max(np.abs(F(P) - P[:, 0])) <= 1e-14


def test_potential_of_zero_is_anchor():
    F = local_potential(KFormField.zero(2, 1), ball(2), anchor_value=1.75)
    assert np.all(F(pts(2)) == 1.75)


def test_potential_of_exact_form_matches_antiderivative():
    theta = exterior_derivative(function_field("sin(x1*x2)", 2))
    b = np.array([0.3, -0.2])
    F = local_potential(theta, ball(2, base=b), anchor_value=0.5)
    P = pts(2, seed=7) + b
    expect = np.sin(P[:, 0] * P[:, 1]) - np.sin(b[0] * b[1]) + 0.5
    assert np.max(np.abs(F(P) - expect)) <= 1e-8
    assert np.max(potential_residual(F, theta, P)) <= Tolerances().potential


def test_potential_rejects_non_closed_form():
    theta = form_from_spec([((1,), "x2")], 2, 1)
    with pytest.raises(NotClosedError) as info:
        local_potential(theta, ball(2))
    assert info.value.residual == pytest.approx(1.0)


def test_conformal_rescale_identity_and_inverse():
    w = form_from_spec([((1, 2), "1 + x1^2"), ((2, 3), "x3")], 3, 2)
    f = function_field("x1*x2 - cos(x3)", 3)
    P = pts(3)
    assert np.array_equal(conformal_rescale(w, function_field("0", 3)).values(P), w.values(P))
    back = conformal_rescale(conformal_rescale(w, f, -1), f, 1)
    assert np.max(np.abs(back.values(P) - w.values(P))) <= 1e-12
    with pytest.raises(ValueError):
        conformal_rescale(w, f, 2)


def test_rescaled_lcs_form_is_closed():
    # omega_theta with an exact Lee form, rescaled by its potential
    base_theta = exterior_derivative(function_field("x1^2*x2", 2))
    hr = hr_form(CotangentModel(2), base_theta)
    patch = ball(4, r=3.0)
    F = local_potential(hr.lee, patch)
    closed = conformal_rescale(hr.omega_theta, F, -1)
    assert max_coeff(exterior_derivative(closed), pts(4, seed=9)) <= 1e-7


def test_conformal_equivalence_recovers_factor():
    P = pts(4)
    g, rep = conformal_equivalence(STD4, STD4, P)
    assert rep.passed and np.all(g == 0.0)
    w_a = scale(KFormField(4, 0, lambda xs: [dual.exp(xs[0])]), STD4)
    g, rep = conformal_equivalence(w_a, STD4, P)
    assert rep.passed and np.max(np.abs(g - P[:, 0])) <= 1e-9


def test_conformal_equivalence_detects_perturbation():
    w_a = STD4 + form_from_spec([((1, 2), "1")], 4, 2)
    _, rep = conformal_equivalence(w_a, STD4, pts(4))
    assert not rep.passed


def test_conformal_equivalence_flags_vanishing_and_sign():
    w = form_from_spec([((1, 2), "x1")], 2, 2)
    P = np.array([[0.0, 1.0], [0.5, 0.0], [-0.5, 0.0]])
    g, rep = conformal_equivalence(form_from_spec([((1, 2), "1")], 2, 2), w, P)
    c = rep["conformal-equivalence"]
    assert c.detail["excluded"] == 1 and c.detail["sign_mismatch"] == 1 and not c.passed
    assert np.isnan(g[0]) and np.isnan(g[2])


@settings(max_examples=50)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_conformal_equivalence_symmetric(a, b):
    w_a = scale(KFormField(4, 0, lambda xs: [dual.exp(a * xs[0] + b * xs[3])]), STD4)
    P = pts(4, 20)
    g_ab, r1 = conformal_equivalence(w_a, STD4, P)
    g_ba, r2 = conformal_equivalence(STD4, w_a, P)
    assert r1.passed and r2.passed
    assert np.max(np.abs(g_ab + g_ba)) <= 1e-12


# ------------------------------------------------------------- transitions


def _const_factor(n, value, text="x1*x2"):
    f = function_field(text, n) + function_field(repr(value), n) if value else function_field(text, n)
    return ConformalFactor(f, np.zeros(n), value)


def test_transition_constant_examples():
    P = pts(2)
    assert transition_constant(_const_factor(2, 0), _const_factor(2, 0), P).c == 0.0
    r = transition_constant(_const_factor(2, 3.5), _const_factor(2, 0), P)
    assert r.c == pytest.approx(3.5, abs=1e-14) and r.report.passed
    with pytest.raises(ValueError):
        transition_constant(_const_factor(2, 0), _const_factor(2, 0), np.zeros((0, 2)))


def test_transition_constant_cocycle_mismatch():
    a, b = _const_factor(2, 1.0), _const_factor(2, 0)
    r = transition_constant(a, b, pts(2), f1_pair=(a, _const_factor(2, 0.5)))
    assert r.c_prime == pytest.approx(0.5) and not r.report.passed


def test_angular_potentials_differ_by_winding():
    theta = form_from_spec([((1,), "-x2/(x1^2 + x2^2)"), ((2,), "x1/(x1^2 + x2^2)")], 2, 1)
    rng = np.random.default_rng(2)
    ang = rng.uniform(-np.pi, np.pi, 200)
    rad = rng.uniform(0.5, 2.0, 200)
    ring = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    east = StarPatch.wedge(0.0, 0.75 * np.pi, name="east")
    west = StarPatch.wedge(np.pi, 0.75 * np.pi, name="west", anchor=np.pi)
    east.samples = ring[east.member(ring)]
    west.samples = ring[west.member(ring)]
    east.validate()
    west.validate()
    fe = local_potential(theta, east, 0.0)
    fw = local_potential(theta, west, np.pi)
    both = east.member(ring) & west.member(ring)
    upper = ring[both & (ring[:, 1] > 0)]
    lower = ring[both & (ring[:, 1] < 0)]
    for part, c_expect in ((upper, 0.0), (lower, -2 * np.pi)):
        r = transition_constant(fe, fw, part)
        assert r.report.passed
        assert r.c == pytest.approx(c_expect, abs=1e-9)
        oracle = oracles.winding_branch_difference(part)
        assert np.max(np.abs(oracle - r.c)) <= 1e-9


def test_star_patch_validation():
    box = StarPatch.box([0, 0], [-1, -1], [1, 1], samples=[[0.5, 0.5], [-0.9, 0.2]])
    box.validate()
    with pytest.raises(ValueError, match="outside"):
        StarPatch.box([0, 0], [-1, -1], [1, 1], samples=[[2.0, 0.0]]).validate()
    with pytest.raises(ValueError, match="basepoint"):
        StarPatch.box([3, 0], [-1, -1], [1, 1]).validate()
    # an annulus is not star-shaped about any of its points
    ring = StarPatch([1.5, 0], lambda P: np.hypot(P[:, 0], P[:, 1]) > 1.0, samples=[[-1.5, 0.0]])
    with pytest.raises(ValueError, match="star-shaped"):
        ring.validate()
