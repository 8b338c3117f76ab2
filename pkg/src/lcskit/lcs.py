"""LCS structures: twisted differential, validation, potentials, conformal factors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from lcskit import dual
from lcskit.config import QuadratureConfig, Tolerances
from lcskit.forms import (
    KFormField,
    exterior_derivative,
    margins,
    scale,
    wedge_fields,
)
from lcskit.quadrature import batch_shape, calibrate, integrate
from lcskit.report import CheckResult, VerificationReport


class NotClosedError(ValueError):
    def __init__(self, residual: float, tolerance: float):
        super().__init__(f"1-form is not closed: max |d theta| = {residual:.3g} > {tolerance:g}")
        self.residual = residual
        self.tolerance = tolerance


def d_theta(w: KFormField, theta: KFormField) -> KFormField:
    """The twisted differential ``w -> dw - theta ^ w``."""
    if theta.k != 1 or theta.n != w.n:
        raise ValueError("d_theta needs a 1-form theta of matching dimension")
    return exterior_derivative(w) - wedge_fields(theta, w)


@dataclass
class LcsStructure:
    omega: KFormField
    theta: KFormField

    def __post_init__(self):
        if self.omega.k != 2 or self.theta.k != 1 or self.omega.n != self.theta.n:
            raise ValueError("an LCS structure is a 2-form and a 1-form on the same space")

    @property
    def n(self) -> int:
        return self.omega.n


def _tol_for(field_: KFormField, tol: Tolerances, ad: float) -> float:
    return ad if field_.exact else tol.fd


def check_lcs(s: LcsStructure, samples, tol: Tolerances = Tolerances(), prefix: str = "") -> VerificationReport:
    """Residuals of ``d theta``, ``d omega - theta ^ omega`` and nondegeneracy margins."""
    P = np.asarray(samples, dtype=float)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("check_lcs needs a nonempty (N, n) sample array")
    rep = VerificationReport()
    dth = exterior_derivative(s.theta).values(P)
    rep.add(CheckResult.from_residuals(prefix + "lee-form-closed", np.max(np.abs(dth), axis=1) if dth.size else [0.0],
                                       _tol_for(s.theta, tol, tol.lcs)))
    res = d_theta(s.omega, s.theta).values(P)
    rep.add(CheckResult.from_residuals(prefix + "lcs-condition", np.max(np.abs(res), axis=1) if res.size else [0.0],
                                       _tol_for(s.omega, tol, tol.lcs)))
    rep.add(nondegeneracy_check(s.omega, P, tol, prefix + "nondegenerate"))
    return rep


def nondegeneracy_check(w: KFormField, P: np.ndarray, tol: Tolerances, name: str = "nondegenerate") -> CheckResult:
    if w.n % 2:
        return CheckResult.failure(name, "odd dimension: every 2-form is degenerate")
    return CheckResult.at_least(name, margins(w.values(P), w.n), tol.nondegeneracy)


# ------------------------------------------------------------------- patches


@dataclass
class StarPatch:
    """A region star-shaped about ``basepoint`` with a membership test and samples."""

    basepoint: np.ndarray
    contains: Callable[[np.ndarray], np.ndarray]
    samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    name: str = "patch"
    anchor: float = 0.0

    def __post_init__(self):
        self.basepoint = np.asarray(self.basepoint, dtype=float)
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, self.basepoint.size)

    @property
    def n(self) -> int:
        return self.basepoint.size

    def member(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float).reshape(-1, self.n)
        return np.asarray(self.contains(P), dtype=bool)

    def validate(self, segment_points: int = 9) -> None:
        if not self.member(self.basepoint).all():
            raise ValueError(f"{self.name}: basepoint outside the patch")
        if self.samples.size == 0:
            return
        if not self.member(self.samples).all():
            raise ValueError(f"{self.name}: a sample lies outside the patch")
        s = np.linspace(0.0, 1.0, segment_points)[:, None, None]
        seg = self.basepoint + s * (self.samples[None, :, :] - self.basepoint)
        if not self.member(seg.reshape(-1, self.n)).all():
            raise ValueError(f"{self.name}: not star-shaped about its basepoint on the samples")

    @classmethod
    def ball(cls, center, radius: float, **kw) -> "StarPatch":
        c = np.asarray(center, dtype=float)
        return cls(c, lambda P: np.linalg.norm(P - c, axis=1) < radius, **kw)

    @classmethod
    def box(cls, basepoint, lower, upper, **kw) -> "StarPatch":
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        return cls(basepoint, lambda P: np.all((P > lo) & (P < hi), axis=1), **kw)

    @classmethod
    def whole_space(cls, basepoint, **kw) -> "StarPatch":
        return cls(basepoint, lambda P: np.ones(len(P), dtype=bool), **kw)

    @classmethod
    def wedge(cls, center_angle: float, half_width: float, basepoint=None, plane=(0, 1), **kw) -> "StarPatch":
        """Open angular sector about the origin in a coordinate plane.

        Sectors wider than a half-plane are still star-shaped about any point
        on the bisecting ray, since they are the union of two half-planes.
        """
        i, j = plane
        if basepoint is None:
            basepoint = np.zeros(2)
            basepoint[0], basepoint[1] = np.cos(center_angle), np.sin(center_angle)

        def contains(P):
            ang = np.arctan2(P[:, j], P[:, i]) - center_angle
            ang = (ang + np.pi) % (2 * np.pi) - np.pi
            r = np.hypot(P[:, i], P[:, j])
            return (np.abs(ang) < half_width) & (r > 0)

        return cls(basepoint, contains, **kw)


# ------------------------------------------------------------------ potentials


@dataclass
class ConformalFactor:
    f: KFormField  # 0-form
    basepoint: np.ndarray
    anchor_value: float
    nodes: int = 0

    def __call__(self, points) -> np.ndarray:
        return self.f.values(points)[:, 0]


def local_potential(
    theta: KFormField,
    patch: StarPatch,
    anchor_value: float = 0.0,
    tol: Tolerances = Tolerances(),
    quad: QuadratureConfig = QuadratureConfig(),
    check_closed: bool = True,
) -> ConformalFactor:
    """Primitive of a closed 1-form by radial integration from the patch basepoint.

    ``f(p) = anchor + int_0^1 theta_{b + s(p - b)}(p - b) ds`` with a
    Gauss-Legendre rule whose size is fixed by doubling on the patch samples.
    """
    if theta.k != 1:
        raise ValueError("local_potential integrates a 1-form")
    n = theta.n
    b = [float(x) for x in patch.basepoint]
    samples = patch.samples if patch.samples.size else patch.basepoint[None, :]
    if check_closed:
        res = exterior_derivative(theta).values(samples)
        worst = float(np.max(np.abs(res))) if res.size else 0.0
        limit = tol.lcs if theta.exact else tol.fd
        if worst > limit:
            raise NotClosedError(worst, limit)

    def radial(xs, m):
        xs = list(xs)
        offs = [x - bi for x, bi in zip(xs, b)]

        def integrand(s):
            ys = [bi + s * o for bi, o in zip(b, offs)]
            th = theta.coeffs(ys)
            acc = 0.0
            for c, o in zip(th, offs):
                acc = acc + c * o
            return [acc]

        return integrate(integrand, batch_shape(xs), m)[0]

    cols = [samples[:, i] for i in range(n)]
    nodes, _ = calibrate(
        lambda m: dual.to_array(radial(cols, m), (len(samples),)),
        quad.potential_nodes,
        quad.potential_rtol,
        quad.max_nodes,
    )
    a = float(anchor_value)
    f = KFormField(n, 0, lambda xs: [a + radial(xs, nodes)], theta.exact, "potential")
    return ConformalFactor(f, patch.basepoint.copy(), a, nodes)


def potential_residual(factor: ConformalFactor, theta: KFormField, points) -> np.ndarray:
    """Per-point ``max |df - theta|``."""
    diff = exterior_derivative(factor.f) - theta
    return np.max(np.abs(diff.values(points)), axis=1)


def conformal_rescale(w: KFormField, f, sign: int = -1) -> KFormField:
    """``e^{sign f} w`` pointwise; ``f`` is a ConformalFactor or a 0-form field."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    g = f.f if isinstance(f, ConformalFactor) else f
    expf = KFormField(g.n, 0, lambda xs: [dual.exp(sign * g.coeffs(xs)[0])], g.exact)
    return scale(expf, w)


def conformal_equivalence(w_a: KFormField, w_b: KFormField, samples, tolerance: float = 1e-9,
                          name: str = "conformal-equivalence") -> tuple[np.ndarray, VerificationReport]:
    """Recover ``g`` with ``w_a = e^g w_b`` per sample and check every coefficient."""
    P = np.asarray(samples, dtype=float)
    A = w_a.values(P)
    B = w_b.values(P)
    idx = np.argmax(np.abs(B), axis=1)
    rows = np.arange(len(P))
    top_b = B[rows, idx]
    top_a = A[rows, idx]
    excluded = np.abs(top_b) < 1e-14
    ratio = np.where(excluded, 1.0, top_a / np.where(excluded, 1.0, top_b))
    bad_sign = (ratio <= 0) & ~excluded
    g = np.where(bad_sign | excluded, np.nan, np.log(np.where(ratio > 0, ratio, 1.0)))
    resid = np.max(np.abs(A - np.exp(np.nan_to_num(g))[:, None] * B), axis=1)
    resid = np.where(bad_sign, np.inf, resid)
    rep = VerificationReport()
    rep.add(CheckResult.from_residuals(
        name, resid[~excluded], tolerance,
        excluded=int(excluded.sum()), sign_mismatch=int(bad_sign.sum()),
    ))
    return g, rep


@dataclass
class TransitionResult:
    c: float
    c_prime: float | None
    report: VerificationReport


def transition_constant(f_a: ConformalFactor, f_b: ConformalFactor, overlap, tol: Tolerances = Tolerances(),
                        f1_pair: tuple[ConformalFactor, ConformalFactor] | None = None,
                        label: str = "") -> TransitionResult:
    """The constant ``c`` with ``f_a = c + f_b`` on an overlap, plus the ``c = c'`` cocycle check."""
    P = np.asarray(overlap, dtype=float)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("transition_constant needs a nonempty overlap")
    diff = f_a(P) - f_b(P)
    c = float(np.mean(diff))
    rep = VerificationReport()
    rep.add(CheckResult.from_residuals(f"transition-constant{label}", [float(np.std(diff))], tol.transition, c=c))
    c1 = None
    if f1_pair is not None:
        d1 = f1_pair[0](P) - f1_pair[1](P)
        c1 = float(np.mean(d1))
        rep.add(CheckResult.from_residuals(f"cocycle-consistency{label}", [abs(c - c1), float(np.std(d1))],
                                           tol.transition, c=c, c_prime=c1))
    return TransitionResult(c, c1, rep)
