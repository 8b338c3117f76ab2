import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lcskit.config import FlowConfig
from lcskit.forms import KFormField, KFormValue, exterior_derivative, form_from_spec, interior_product
from lcskit.lcs import StarPatch
from lcskit.moser import (
    DegenerateFormError,
    FlowAborted,
    HypothesisError,
    MoserSystem,
    SubmanifoldModel,
    TubularModel,
    build_retraction,
    darboux_weinstein,
    gluing_check,
    homotopy_sigma,
    integrate_moser_flow,
    moser_field,
)

AREA = form_from_spec([((1, 2), "1")], 2, 2)
ZERO1 = KFormField.zero(2, 1)
ORIGIN = SubmanifoldModel.point([0.0, 0.0])
X_AXIS = SubmanifoldModel.from_exprs(["s1", "0"], [["0", "1"]], 2, lower=(-2.0,), upper=(2.0,))

# planar model: eta_1 = (1 + lam x) dx^dy agrees with dx^dy at the origin
LAM = 0.3
PLANAR_SEEDS = np.array([[0.5, 0.3], [-0.8, 0.6], [1.2, -0.4], [-0.3, -1.1]])
# DOP853 (rtol 1e-13) on the closed-form field, see oracles.planar_flow
PLANAR_IMAGES = np.array([
    [0.4777006782938248, 0.2866204069762948],
    [-0.8814616725874108, 0.6610962544405581],
    [1.0875402181250193, -0.3625134060416731],
    [-0.30974774727175486, -1.135741739996435],
])


def disc(n, count, r, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((count, n))
    return g / np.linalg.norm(g, axis=1, keepdims=True) * (r * rng.random(count) ** (1 / n))[:, None]


# ------------------------------------------------------------------ retraction


def test_retraction_to_a_point_scales_linearly():
    r = build_retraction(TubularModel(ORIGIN, 2.0))
    p = np.array([[0.4, -0.7]])
    for t in (0.0, 0.3, 1.0):
        assert np.allclose(r.phi(t, p), t * p, atol=0, rtol=0)
    assert np.array_equal(r.velocity(0.5, p), p)
    assert np.allclose(r.phi_jacobian(0.3, p)[0], 0.3 * np.eye(2))


def test_retraction_fixes_q_and_is_identity_at_one():
    r = build_retraction(TubularModel(X_AXIS, 1.0))
    q = np.array([[0.3, 0.0], [-1.1, 0.0]])
    for t in (0.0, 0.5, 1.0):
        assert np.max(np.abs(r.phi(t, q) - q)) <= 1e-14
    assert np.max(np.abs(r.velocity(0.2, q))) <= 1e-14
    p = np.array([[0.3, 0.2], [1.0, -0.5]])
    assert np.max(np.abs(r.phi(1.0, p) - p)) <= 1e-14
    assert np.allclose(r.phi(0.25, p), [[0.3, 0.05], [1.0, -0.125]])


def test_retraction_rejects_points_outside():
    r = build_retraction(TubularModel(X_AXIS, 0.5))
    with pytest.raises(ValueError, match="outside"):
        r.phi(0.5, [[0.0, 0.8]])
    with pytest.raises(ValueError):
        TubularModel(X_AXIS, 0.0)


def test_tube_projection_is_injective():
    tube = TubularModel(X_AXIS, 0.7)
    assert tube.check_injective(50, np.random.default_rng(0)).passed
    P = tube.sample(100, np.random.default_rng(1), fraction=0.5)
    assert np.all(tube.normal_distance(P) < 0.35 + 1e-12)


# ---------------------------------------------------------------- homotopy form


def test_sigma_of_zero_is_zero():
    sig = homotopy_sigma(KFormField.zero(2, 2), build_retraction(TubularModel(ORIGIN, 2.0)))
    assert np.all(sig.values(disc(2, 20, 1.5)) == 0.0)


def test_radial_sigma_closed_form():
    sig = homotopy_sigma(AREA, build_retraction(TubularModel(ORIGIN, 2.0)))
    P = disc(2, 50, 1.5)
    expect = 0.5 * np.column_stack([-P[:, 1], P[:, 0]])
    assert np.max(np.abs(sig.values(P) - expect)) <= 1e-14
    dsig = exterior_derivative(sig).values(P)
    assert np.max(np.abs(dsig - 1.0)) <= 1e-12


def test_sigma_for_line_vanishes_on_q_and_integrates_tau():
    tau = form_from_spec([((1, 2), "x2*cos(x1) + x2^2")], 2, 2)
    tube = TubularModel(X_AXIS, 1.0)
    P = tube.sample(60, np.random.default_rng(2), 0.9)
    sig = homotopy_sigma(tau, build_retraction(tube), P)
    q = np.column_stack([np.linspace(-1.5, 1.5, 9), np.zeros(9)])
    assert np.max(np.abs(sig.values(q))) <= 1e-10
    assert np.max(np.abs(exterior_derivative(sig).values(P) - tau.values(P))) <= 1e-8


def test_planar_sigma_matches_oracle():
    tau = form_from_spec([((1, 2), f"{LAM}*x1")], 2, 2)
    sig = homotopy_sigma(tau, build_retraction(TubularModel(ORIGIN, 2.0)))
    P = disc(2, 30, 1.5)
    expect = np.array([oracles.planar_sigma(LAM, p) for p in P])
    assert np.max(np.abs(sig.values(P) - expect)) <= 1e-14


# ----------------------------------------------------------------- Moser field


def test_moser_field_zero_sigma():
    assert np.array_equal(moser_field(0.0, [0, 0], KFormValue(2, 2, [1.0]), [0.0, 0.0]), [0.0, 0.0])


def test_moser_field_planar_example():
    # A = [[0, 1], [-1, 0]], sigma = dx1
    Y = moser_field(0.0, [0, 0], KFormValue(2, 2, [1.0]), KFormValue(2, 1, [1.0, 0.0]))
    assert Y.tolist() == [0.0, 1.0]
    contracted = interior_product(Y, KFormValue(2, 2, [1.0]))
    assert contracted.coeffs.tolist() == [-1.0, 0.0]


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 6]))
def test_moser_field_solves_skew_system(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = M - M.T
    margin = np.linalg.svd(A, compute_uv=False)[-1]
    if margin < 1e-3:
        return
    s = rng.standard_normal(n)
    Y = moser_field(0.0, np.zeros(n), A, s)
    scale = max(1.0, np.linalg.norm(A) * np.linalg.norm(Y))
    assert np.max(np.abs(A @ Y - s)) <= 1e-12 * scale


def test_moser_field_degenerate():
    with pytest.raises(DegenerateFormError) as info:
        moser_field(0.5, [1.0, 2.0], np.zeros((2, 2)), [1.0, 0.0])
    assert info.value.margin == 0.0
    with pytest.raises(DegenerateFormError):
        moser_field(0.0, [0, 0, 0], np.zeros((3, 3)), [0.0, 0.0, 0.0])


# ------------------------------------------------------------------------ flow


def planar_system():
    eta1 = form_from_spec([((1, 2), f"1 + {LAM}*x1")], 2, 2)
    tube = TubularModel(ORIGIN, 2.0)
    sigma = homotopy_sigma(eta1 - AREA, build_retraction(tube))
    return eta1, sigma


def test_planar_flow_matches_oracle():
    eta1, sigma = planar_system()
    res = integrate_moser_flow(PLANAR_SEEDS, AREA, eta1, sigma, steps=200)
    assert np.max(np.abs(res.images - PLANAR_IMAGES)) <= 1e-9
    assert max(float(np.max(r)) for r in res.invariance.values()) <= 1e-9


def test_planar_flow_fixes_origin():
    eta1, sigma = planar_system()
    res = integrate_moser_flow([[0.0, 0.0]], AREA, eta1, sigma, steps=40)
    assert np.max(np.abs(res.images)) <= 1e-9


def test_identical_forms_give_identity_flow():
    sigma = KFormField.zero(2, 1)
    res = integrate_moser_flow(PLANAR_SEEDS, AREA, AREA, sigma, steps=20)
    assert np.array_equal(res.images, PLANAR_SEEDS)
    assert np.array_equal(res.jacobians, np.broadcast_to(np.eye(2), (4, 2, 2)))


def test_flow_records_and_checkpoints():
    eta1, sigma = planar_system()
    res = integrate_moser_flow(PLANAR_SEEDS[:2], AREA, eta1, sigma, steps=8, checkpoints=(0.5, 1.0))
    assert sorted(res.trajectory) == [0.5, 1.0]
    rec = res.records()
    assert len(rec) == 2 and set(rec[0]["invariance"]) == {"0.5", "1"}
    with pytest.raises(ValueError, match="grid"):
        integrate_moser_flow(PLANAR_SEEDS, AREA, eta1, sigma, steps=8, checkpoints=(0.3,))


def test_flow_aborts_when_leaving_domain():
    eta1, sigma = planar_system()
    inside = lambda P: np.linalg.norm(P, axis=1) < 0.6
    with pytest.raises(FlowAborted) as info:
        integrate_moser_flow([[-0.58, 0.0]], AREA, eta1, sigma, steps=20, domain=inside,
                             normal_distance=lambda P: np.linalg.norm(P, axis=1))
    assert info.value.suggested_epsilon == pytest.approx(0.58)
    assert 0.0 <= info.value.t < 1.0


def test_flow_aborts_on_degeneracy():
    eta1 = form_from_spec([((1, 2), "1 - 2*x1")], 2, 2)  # vanishes at x1 = 1/2 for t = 1
    sigma = KFormField.zero(2, 1)
    with pytest.raises(DegenerateFormError):
        MoserSystem(AREA, eta1, sigma).rhs(1.0, np.array([[0.5, 0.0]]), np.eye(2)[None])


# ----------------------------------------------------------- Darboux-Weinstein


def whole_plane(samples):
    return StarPatch.whole_space([0.0, 0.0], samples=samples)


def test_darboux_weinstein_identity_case():
    tube = TubularModel(ORIGIN, 2.0)
    P = disc(2, 30, 1.0)
    res = darboux_weinstein(AREA, AREA, ZERO1, ZERO1, tube, [whole_plane(P)], np.zeros((1, 0)),
                            flow_cfg=FlowConfig(steps=12))
    assert res.report.passed
    assert np.max(np.abs(res.images - res.points)) <= 1e-15
    assert np.all(res.factor == 0.0)
    assert "classical-factor-zero" in res.report


def test_darboux_weinstein_planar():
    eta1 = form_from_spec([((1, 2), f"1 + {LAM}*x1")], 2, 2)
    tube = TubularModel(ORIGIN, 2.0)
    res = darboux_weinstein(AREA, eta1, ZERO1, ZERO1, tube, [whole_plane(PLANAR_SEEDS)], np.zeros((1, 0)),
                            flow_cfg=FlowConfig(steps=200))
    assert res.report.passed, res.report.failed()
    assert np.max(np.abs(res.images - PLANAR_IMAGES)) <= 1e-9
    assert res.report["q-fixed"].max_residual <= 1e-12


def test_darboux_weinstein_rejects_bad_hypotheses():
    tube = TubularModel(ORIGIN, 2.0)
    twice = form_from_spec([((1, 2), "2")], 2, 2)
    with pytest.raises(HypothesisError) as info:
        darboux_weinstein(AREA, twice, ZERO1, ZERO1, tube, [whole_plane(disc(2, 5, 1.0))], np.zeros((1, 0)))
    assert info.value.report.failed() == ["equal-on-TqM"]
    assert info.value.report["equal-on-TqM"].detail["worst_sample"] == [0.0, 0.0]


def test_darboux_weinstein_lee_forms_must_agree_along_q():
    tube = TubularModel(X_AXIS, 1.0)
    dx = form_from_spec([((1,), "1")], 2, 1)
    with pytest.raises(HypothesisError) as info:
        darboux_weinstein(AREA, AREA, ZERO1, dx, tube, [whole_plane(disc(2, 5, 0.5))], np.array([[0.0], [0.5]]))
    assert "lee-forms-agree-on-TQ" in info.value.report.failed()


def test_single_patch_gluing_is_vacuous():
    rep, consts = gluing_check([], {})
    assert rep.passed and consts == {}
    assert rep["gluing"].detail["note"].startswith("single patch")
