"""Cotangent models: Liouville and Haller-Rybicki forms, the normal/cotangent
identification over a Lagrangian submanifold, Lagrangian normalization, and the
Weinstein-type pipeline that composes them with the Moser engine.

Coordinates on a cotangent patch are ``(x1..xk, p1..pk)``; the zero section is
``p = 0`` and ``pi(x, p) = x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from lcskit import dual
from lcskit.config import FlowConfig, QuadratureConfig, Tolerances
from lcskit.forms import (
    KFormField,
    SmoothMap,
    exterior_derivative,
    form_from_spec,
    pullback,
    skew_matrix,
    wedge_fields,
)
from lcskit.lcs import (
    ConformalFactor,
    LcsStructure,
    NotClosedError,
    StarPatch,
    check_lcs,
    conformal_rescale,
    local_potential,
)
from lcskit.moser import (
    DarbouxWeinsteinResult,
    SubmanifoldModel,
    TubularModel,
    darboux_weinstein,
    pullback_arrays,
)
from lcskit.report import CheckResult, VerificationReport


class LagrangianError(ValueError):
    def __init__(self, report: VerificationReport, message: str):
        super().__init__(message)
        self.report = report


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class CotangentModel:
    k: int
    lower: tuple = ()
    upper: tuple = ()
    periodic: tuple = ()

    @property
    def n(self) -> int:
        return 2 * self.k

    @property
    def projection(self) -> SmoothMap:
        k = self.k
        return SmoothMap(2 * k, k, lambda xs: list(xs[:k]), "pi")

    @property
    def zero_section(self) -> SmoothMap:
        k = self.k
        return SmoothMap(k, 2 * k, lambda xs: list(xs) + [0.0] * k, "zero-section")

    def sample_base(self, count: int, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.lower or (-1.0,) * self.k, dtype=float)
        hi = np.asarray(self.upper or (1.0,) * self.k, dtype=float)
        return lo + (hi - lo) * rng.random((count, self.k))

    def sample(self, count: int, rng: np.random.Generator, fiber: float = 0.5) -> np.ndarray:
        return np.hstack([self.sample_base(count, rng), rng.uniform(-fiber, fiber, (count, self.k))])


def liouville(model: CotangentModel) -> KFormField:
    """``eta = sum_i p_i dx^i``."""
    return form_from_spec([((i,), f"p{i}") for i in range(1, model.k + 1)], model.n, 1, "cotangent")


@dataclass
class HallerRybickiForm:
    model: CotangentModel
    theta: KFormField  # on the base
    eta: KFormField
    omega_theta: KFormField
    lee: KFormField  # pi^* theta

    def structure(self) -> LcsStructure:
        return LcsStructure(self.omega_theta, self.lee)

    def check(self, samples, tol: Tolerances = Tolerances()) -> VerificationReport:
        rep = check_lcs(self.structure(), samples, tol)
        base = np.asarray(samples, dtype=float)[:, : self.model.k]
        rep.extend(zero_section_lagrangian(self, base, tol))
        return rep


def hr_form(model: CotangentModel, theta: KFormField, base_samples=None, tol: Tolerances = Tolerances(),
            rng: np.random.Generator | None = None) -> HallerRybickiForm:
    """``omega_theta = d eta - pi^* theta ^ eta`` for a closed 1-form ``theta`` on the base."""
    if theta.k != 1 or theta.n != model.k:
        raise ValueError(f"theta must be a 1-form on the {model.k}-dimensional base")
    if base_samples is None:
        base_samples = model.sample_base(64, rng or np.random.default_rng(0))
    res = exterior_derivative(theta).values(base_samples)
    worst = float(np.max(np.abs(res))) if res.size else 0.0
    limit = tol.lcs if theta.exact else tol.fd
    if worst > limit:
        raise NotClosedError(worst, limit)
    eta = liouville(model)
    lee = pullback(model.projection, theta)
    omega = exterior_derivative(eta) - wedge_fields(lee, eta)
    omega.label = "omega_theta"
    return HallerRybickiForm(model, theta, eta, omega, lee)


def zero_section_lagrangian(form: HallerRybickiForm, base_samples, tol: Tolerances = Tolerances()) -> VerificationReport:
    """``omega_theta(d/dx^i, d/dx^j)`` at ``p = 0`` for all base index pairs."""
    k = form.model.k
    B = np.asarray(base_samples, dtype=float).reshape(-1, k)
    P = np.hstack([B, np.zeros_like(B)])
    A = form.omega_theta.values(P)
    idx = [c for c, (i, j) in enumerate(_pairs(2 * k)) if i < k and j < k]
    res = np.max(np.abs(A[:, idx]), axis=1) if idx else np.zeros(len(P))
    rep = VerificationReport()
    rep.add(CheckResult.from_residuals("zero-section-lagrangian", res, tol.lagrangian, dimension=k))
    return rep


def _pairs(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


# ----------------------------------------------------------- small list algebra


def _matmul(A, B):
    return [[_dot([A[i][l] for l in range(len(B))], [B[l][j] for l in range(len(B))]) for j in range(len(B[0]))]
            for i in range(len(A))]


def _dot(a, b):
    acc = 0.0
    for x, y in zip(a, b):
        acc = acc + x * y
    return acc


def _transpose(A):
    return [list(r) for r in zip(*A)]


def _solve_columns(M, R):
    """``X`` with ``M X = R`` for list matrices."""
    cols = [dual.solve(M, [row[j] for row in R]) for j in range(len(R[0]))]
    return [[cols[j][i] for j in range(len(cols))] for i in range(len(M))]


def _identity(n):
    return [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]


def _frames(Q: SubmanifoldModel, s):
    """Tangent and normal frames as n x dim and n x (n-dim) list matrices."""
    T = _transpose(Q.tangent_frame(s))
    Nf = _transpose(Q.normal(s))
    return T, Nf


# ---------------------------------------------------------- identification


def lagrangian_check(omega: KFormField, Q: SubmanifoldModel, q_chart, tol: Tolerances = Tolerances(),
                     name: str = "q-lagrangian") -> CheckResult:
    """Form values on tangent-frame pairs of Q, plus ``dim Q = n / 2``."""
    if 2 * Q.dim != Q.n:
        return CheckResult.failure(name, f"dim Q = {Q.dim} is not half of {Q.n}")
    S = np.asarray(q_chart, dtype=float).reshape(-1, Q.dim)
    Qp, T, _ = Q.frames(S)
    A = np.stack([skew_matrix_np(Q.n, row) for row in omega.values(Qp)])
    vals = np.einsum("kia,kij,kjb->kab", T, A, T)
    res = np.max(np.abs(vals).reshape(len(S), -1), axis=1)
    worst = int(np.argmax(res))
    return CheckResult.from_residuals(name, res, tol.lagrangian, worst_sample=S[worst].tolist())


def skew_matrix_np(n: int, row) -> np.ndarray:
    return np.array(skew_matrix(n, list(row)), dtype=float)


@dataclass
class LagrangianIdentification:
    """Fiberwise map from normal vectors of Q to covectors on Q.

    A normal vector ``v`` goes to ``w*``, where ``g(v, .) = omega(w, .)`` and
    ``w* = g(w, .)`` restricted to the tangent frame of Q.
    """

    omega: KFormField
    submanifold: SubmanifoldModel
    metric: Callable[[list], list] | None
    chart_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    sample_matrices: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def _G(self, q):
        n = self.submanifold.n
        return self.metric(q) if self.metric is not None else _identity(n)

    def covector(self, s, v) -> list:
        """``w*`` for an ambient vector ``v`` at chart point ``s`` (generic scalars)."""
        Q = self.submanifold
        q = Q.param(s)
        A = skew_matrix(Q.n, self.omega.coeffs(q))
        G = self._G(q)
        Gv = [_dot(row, v) for row in G]
        # omega(w, .) = -A w as a covector
        w = dual.solve(A, [-c for c in Gv])
        Gw = [_dot(row, w) for row in G]
        T = Q.tangent_frame(s)
        return [_dot(t, Gw) for t in T]

    def matrix(self, s) -> list[list]:
        """``L[j][c]``: covector component j of the image of normal frame vector c."""
        cols = [self.covector(s, nvec) for nvec in self.submanifold.normal(s)]
        return _transpose(cols)

    def apply(self, s_point, v) -> np.ndarray:
        s = [float(x) for x in np.atleast_1d(s_point)]
        return np.array([float(dual.primal(c)) for c in self.covector(s, [float(x) for x in v])])


def identify_normal_cotangent(omega: KFormField, Q: SubmanifoldModel, q_chart, metric=None,
                              tol: Tolerances = Tolerances()) -> LagrangianIdentification:
    """Build the identification, rejecting non-Lagrangian Q or singular fibers."""
    S = np.asarray(q_chart, dtype=float).reshape(-1, Q.dim)
    lag = lagrangian_check(omega, Q, S, tol)
    if not lag.passed:
        rep = VerificationReport([lag])
        raise LagrangianError(rep, f"Q is not Lagrangian: max |omega(T_i, T_j)| = {lag.max_residual:.3g}")
    ident = LagrangianIdentification(omega, Q, metric)
    cols = [S[:, j] for j in range(Q.dim)]
    L = ident.matrix(cols)
    M = np.stack([np.stack([dual.to_array(c, (len(S),)) for c in row], -1) for row in L], 1)
    sv = np.linalg.svd(M, compute_uv=False)[:, -1]
    if np.any(sv < tol.nondegeneracy):
        bad = int(np.argmin(sv))
        raise LagrangianError(VerificationReport([lag]), f"fiber map singular at chart point {S[bad].tolist()}")
    ident.chart_samples, ident.sample_matrices, ident.margins = S, M, sv
    return ident


@dataclass
class Transport:
    chart: SmoothMap  # ambient tube -> cotangent patch
    omega: KFormField  # transported omega_theta
    lee: KFormField  # transported pi^* theta
    hr: HallerRybickiForm
    ident: LagrangianIdentification

    def matrix_on_q(self, s) -> list[list]:
        """Skew matrix of the transported form at ``q(s)``.

        On Q the chart differential sends ``[T | N]`` to ``diag(I, L)``, so no
        derivative of the projection is needed.
        """
        Q = self.ident.submanifold
        k = Q.dim
        T, Nf = _frames(Q, s)
        E = [list(r1) + list(r2) for r1, r2 in zip(T, Nf)]
        L = self.ident.matrix(s)
        Mb = [[1.0 if i == j else 0.0 for j in range(k)] + [0.0] * k for i in range(k)]
        Mb += [[0.0] * k + list(row) for row in L]
        D = _transpose(_solve_columns(_transpose(E), _transpose(Mb)))  # Mb E^{-1}
        zero = 0.0 * s[0] if k else 0.0
        A = skew_matrix(Q.n, self.hr.omega_theta.coeffs(list(s) + [zero] * k))
        return _matmul(_matmul(_transpose(D), A), D)


def transport_form(hr: HallerRybickiForm, ident: LagrangianIdentification, tube: TubularModel) -> Transport:
    """Pull ``omega_theta`` back along ``x = q + v -> (s(q), L(s) N(s)^T v)``."""
    Q = tube.submanifold
    k = hr.model.k
    if Q.dim != k or Q.n != 2 * k:
        raise ValueError("tube and cotangent model dimensions disagree")

    def chart(xs):
        s, _, v = Q.project(xs)
        c = [_dot(nvec, v) for nvec in Q.normal(s)]
        flat = dual.jet_lift(lambda u: [x for row in ident.matrix(u) for x in row], s)
        L = [flat[i * k:(i + 1) * k] for i in range(k)]
        return list(s) + [_dot(row, c) for row in L]

    Psi = SmoothMap(Q.n, 2 * k, chart, "Psi")
    return Transport(Psi, pullback(Psi, hr.omega_theta), pullback(Psi, hr.lee), hr, ident)


# ------------------------------------------------------------- normalization


def _lagrangian_complement(A, T, Nf):
    """``N + T C`` with ``C`` chosen so the span is Lagrangian for ``A``."""
    P = _matmul(_matmul(_transpose(T), A), Nf)  # omega(T_i, N_j)
    S = _matmul(_matmul(_transpose(Nf), A), Nf)
    C = _solve_columns(_transpose(P), [[0.5 * x for x in row] for row in S])
    TC = _matmul(T, C)
    return [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(Nf, TC)]


def normalization_blocks(omega_a: KFormField, omega_b, Q: SubmanifoldModel, s):
    """Frames ``E = [T | W_a]`` and ``F = [T | W_b D]``; the linear map is ``B = F E^{-1}``.

    ``B`` fixes ``T_qQ``, sends the Lagrangian complement ``W_a`` of ``omega_a``
    into that of ``omega_b``, and satisfies ``B^T A_b B = A_a``.  ``omega_b``
    may also be a callable giving its skew matrix at ``q(s)``.
    """
    q = Q.param(s)
    Aa = skew_matrix(Q.n, omega_a.coeffs(q))
    Ab = skew_matrix(Q.n, omega_b.coeffs(q)) if isinstance(omega_b, KFormField) else omega_b(s)
    T, Nf = _frames(Q, s)
    Wa = _lagrangian_complement(Aa, T, Nf)
    Wb = _lagrangian_complement(Ab, T, Nf)
    Rb = _matmul(_matmul(_transpose(Wb), Ab), T)
    rhs = [[-x for x in row] for row in _matmul(_matmul(_transpose(T), Aa), Wa)]
    D = _solve_columns(_transpose(Rb), rhs)
    WbD = _matmul(Wb, D)
    E = [list(r1) + list(r2) for r1, r2 in zip(T, Wa)]
    F = [list(r1) + list(r2) for r1, r2 in zip(T, WbD)]
    return E, F


def normalization_matrix(omega_a, omega_b, Q: SubmanifoldModel, s_point) -> np.ndarray:
    s = [float(x) for x in np.atleast_1d(s_point)]
    E, F = normalization_blocks(omega_a, omega_b, Q, s)
    E = np.array([[float(dual.primal(x)) for x in r] for r in E])
    F = np.array([[float(dual.primal(x)) for x in r] for r in F])
    return F @ np.linalg.inv(E)


def lagrangian_linear_normalization(omega_a: KFormField, omega_b: KFormField, tube: TubularModel, q_chart,
                                    tol: Tolerances = Tolerances(),
                                    b_on_q: Callable | None = None) -> tuple[SmoothMap, VerificationReport]:
    """``psi(q + v) = q + B_q v`` with ``psi^* omega_b = omega_a`` on ``T_qM`` along Q.

    ``b_on_q(s)`` optionally supplies the skew matrix of ``omega_b`` at
    ``q(s)`` more cheaply than evaluating the field.
    """
    wb = b_on_q if b_on_q is not None else omega_b
    Q = tube.submanifold
    S = np.asarray(q_chart, dtype=float).reshape(-1, Q.dim)
    rep = VerificationReport()
    for name, w in (("a", omega_a), ("b", omega_b)):
        c = lagrangian_check(w, Q, S, tol, f"normalization-lagrangian-{name}")
        rep.add(c)
        if not c.passed:
            raise NormalizationError(f"Q is not Lagrangian for omega_{name} near chart point {c.detail['worst_sample']}")
    cols = [S[:, j] for j in range(Q.dim)]
    E, F = normalization_blocks(omega_a, wb, Q, cols)
    Em = np.stack([np.stack([dual.to_array(c, (len(S),)) for c in row], -1) for row in E], 1)
    sv = np.linalg.svd(Em, compute_uv=False)[:, -1]
    if np.any(~np.isfinite(sv)) or np.any(sv < tol.nondegeneracy):
        bad = int(np.nanargmin(sv))
        raise NormalizationError(f"complement construction degenerate at chart point {S[bad].tolist()}")

    n = Q.n

    def B_flat(s):
        E, F = normalization_blocks(omega_a, wb, Q, s)
        Bt = _solve_columns(_transpose(E), _transpose(F))  # B^T = E^{-T} F^T
        return [Bt[j][i] for i in range(n) for j in range(n)]

    def psi(xs):
        s, q, v = Q.project(xs)
        flat = dual.jet_lift(B_flat, s)
        return [qi + _dot(flat[i * n:(i + 1) * n], v) for i, qi in enumerate(q)]

    psi_map = SmoothMap(Q.n, Q.n, psi, "psi")
    Qp = Q.embed(S)
    diff = pullback(psi_map, omega_b).values(Qp) - omega_a.values(Qp)
    rep.add(CheckResult.from_residuals("normalization-agrees-on-TqM", np.max(np.abs(diff), axis=1),
                                       tol.normalization))
    moved = np.max(np.abs(psi_map(Qp) - Qp), axis=1)
    rep.add(CheckResult.from_residuals("normalization-fixes-Q", moved, tol.q_fixed))
    return psi_map, rep


# ----------------------------------------------------------------- pipeline


class StageError(RuntimeError):
    def __init__(self, stage: str, error: Exception, report: VerificationReport | None = None):
        super().__init__(f"stage {stage!r} failed: {error}")
        self.stage = stage
        self.error = error
        self.report = report or VerificationReport()


@dataclass
class WeinsteinResult:
    chart: SmoothMap  # Psi o psi, tube -> cotangent patch
    dw: DarbouxWeinsteinResult
    hr: HallerRybickiForm
    report: VerificationReport
    images: np.ndarray  # Phi(p) in the cotangent patch
    factor: np.ndarray
    residual: np.ndarray  # per-point max |omega - e^g Phi^* omega_theta|
    strict_equality: bool


def weinstein_lcs(omega: KFormField, theta: KFormField, tube: TubularModel, patches: Sequence[StarPatch],
                  q_chart, tube_samples, metric=None, tol: Tolerances = Tolerances(),
                  quad: QuadratureConfig = QuadratureConfig(), flow_cfg: FlowConfig = FlowConfig(),
                  rng: np.random.Generator | None = None) -> WeinsteinResult:
    """Identify, transport, normalize, run the conformal Moser step, and compose.

    The final check pulls ``omega_theta`` back by the composed map
    ``Phi = Psi o psi o phi`` and compares it with ``omega``, both up to the
    recovered conformal factor and literally.
    """
    Q = tube.submanifold
    S = np.asarray(q_chart, dtype=float).reshape(-1, Q.dim)
    report = VerificationReport()

    def stage(name, fn):
        try:
            return fn()
        except StageError:
            raise
        except (LagrangianError, NotClosedError) as err:
            raise StageError(name, err, getattr(err, "report", None)) from err
        except Exception as err:  # noqa: BLE001 - attribute any failure to its stage
            raise StageError(name, err) from err

    lcs_rep = stage("lcs-check", lambda: check_lcs(LcsStructure(omega, theta), tube_samples, tol))
    report.extend(lcs_rep)
    lag = lagrangian_check(omega, Q, S, tol)
    report.add(lag)
    if not lcs_rep.passed or not lag.passed:
        raise StageError("hypotheses", ValueError(f"failed checks: {report.failed()}"), report)

    inclusion = SmoothMap(Q.dim, Q.n, Q.param, "iota")
    theta_q = pullback(inclusion, theta)
    model = CotangentModel(Q.dim, tuple(Q.lower), tuple(Q.upper), Q.periodic)
    hr = stage("haller-rybicki", lambda: hr_form(model, theta_q, S, tol))
    ident = stage("identify", lambda: identify_normal_cotangent(omega, Q, S, metric, tol))
    tr = stage("transport", lambda: transport_form(hr, ident, tube))
    tq = lagrangian_check(tr.omega, Q, S, tol, "transported-q-lagrangian")
    report.add(tq)
    psi, nrep = stage("normalize", lambda: lagrangian_linear_normalization(omega, tr.omega, tube, S, tol,
                                                                                   tr.matrix_on_q))
    report.extend(nrep)
    chart = tr.chart.compose(psi)
    omega1 = pullback(chart, hr.omega_theta)
    theta1 = pullback(chart, hr.lee)

    # potentials: f0 by radial integration of theta; f1 as the pullback of a
    # radial potential of theta_Q on the chart (d commutes with pullback)
    pots = []
    base_to_chart = SmoothMap(Q.n, Q.dim, lambda xs: chart.apply(xs)[: Q.dim], "pi o chart")
    for patch in patches:
        f0 = stage("potentials", lambda: local_potential(theta, patch, patch.anchor, tol, quad))
        sb = np.array([float(dual.primal(c)) for c in Q.project([float(x) for x in patch.basepoint])[0]])
        chart_patch = StarPatch.whole_space(sb, samples=S, name=f"{patch.name}-chart")
        fq = stage("potentials", lambda: local_potential(theta_q, chart_patch, patch.anchor, tol, quad))
        f1 = ConformalFactor(pullback(base_to_chart, fq.f), patch.basepoint, patch.anchor, fq.nodes)
        pots.append((f0, f1))

    dw = stage("darboux", lambda: darboux_weinstein(omega, omega1, theta, theta1, tube, patches, S, tol, quad,
                                                    flow_cfg, rng, pots))
    report.extend(dw.report)

    def compose():
        P, img, Jphi = dw.points, dw.images, dw.jacobians
        N = len(P)
        cols = [img[:, i] for i in range(Q.n)]
        vals, Jc = chart.jacobian_lists(cols)
        Phi = np.stack([dual.to_array(c, (N,)) for c in vals], -1)
        Jchart = np.stack([np.stack([dual.to_array(c, (N,)) for c in row], -1) for row in Jc], 1)
        total = Jchart @ Jphi
        pulled = pullback_arrays(total, hr.omega_theta.values(Phi), model.n, 2)
        return Phi, pulled

    Phi, pulled = stage("compose", compose)
    target = omega.values(dw.points)
    g = dw.factor
    conf = np.max(np.abs(target - np.exp(g)[:, None] * pulled), axis=1)
    strict = np.max(np.abs(target - pulled), axis=1)
    report.add(CheckResult.from_residuals("weinstein-conformal-pullback", conf, tol.conformal))
    qf = np.concatenate([r.flow.factor[len(r.flow.factor) - r.q_count:] for r in dw.runs]) if dw.runs else []
    report.add(CheckResult.from_residuals("weinstein-factor-on-Q", qf, tol.factor_on_q))
    Qp = Q.embed(S)
    zs = chart(Qp)[:, Q.dim:]
    report.add(CheckResult.from_residuals("q-to-zero-section", np.max(np.abs(zs), axis=1), tol.q_fixed))
    strict_check = report.add(CheckResult.from_residuals("weinstein-strict-equality", strict, tol.conformal,
                                                         mandatory=False))
    return WeinsteinResult(chart, dw, hr, report, Phi, g, conf, strict_check.passed)
