"""Moser-trick engine: tubular retraction, homotopy 1-form, Moser flow, gluing.

The tube around Q uses the flat metric, so ``exp(q, v) = q + v`` and the
retraction ``phi_t(q + v) = q + t v`` is exact.  The homotopy 1-form is

    sigma_p(u) = int_0^1 tau_{q + t v}(v, D phi_t u) dt,   D phi_t = t I + (1 - t) Dq,

evaluated by Gauss-Legendre quadrature on generic scalars, so ``d sigma`` is
the exact derivative of the quadrature rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from lcskit import dual, expr
from lcskit.config import FlowConfig, QuadratureConfig, Tolerances
from lcskit.forms import (
    KFormField,
    exterior_derivative,
    interior_coeffs,
    margins,
    pullback_coeffs,
    skew_matrix,
)
from lcskit.lcs import (
    ConformalFactor,
    StarPatch,
    conformal_rescale,
    local_potential,
    nondegeneracy_check,
    potential_residual,
    transition_constant,
)
from lcskit.quadrature import batch_shape, calibrate, integrate
from lcskit.report import CheckResult, VerificationReport


class ProjectionError(ValueError):
    pass


class DegenerateFormError(ArithmeticError):
    def __init__(self, location, margin: float, threshold: float, t: float | None = None):
        at = f" at t={t:g}" if t is not None else ""
        super().__init__(
            f"2-form degenerate{at} near {np.round(location, 6).tolist()}: margin {margin:.3g} < {threshold:g}; "
            "shrink the neighborhood"
        )
        self.location = np.asarray(location)
        self.margin = margin
        self.t = t


class FlowAborted(RuntimeError):
    def __init__(self, message: str, t: float, state: np.ndarray, suggested_epsilon: float | None = None):
        super().__init__(message)
        self.t = t
        self.state = state
        self.suggested_epsilon = suggested_epsilon


class HypothesisError(ValueError):
    def __init__(self, report: VerificationReport):
        names = ", ".join(report.failed())
        super().__init__(f"hypotheses violated: {names}")
        self.report = report


# ---------------------------------------------------------------- submanifolds


class SubmanifoldModel:
    """A compact submanifold Q given by a chart parametrization and a normal frame.

    ``param`` maps chart coordinates (generic scalars) to ambient coordinates;
    ``normal`` maps chart coordinates to a list of ``n - dim`` ambient vectors,
    orthonormal for the flat metric.  The tangent frame is the parametrization
    Jacobian.  ``guess`` optionally maps ambient points (N, n) to approximate
    chart coordinates for the nearest-point projection.
    """

    def __init__(self, n: int, dim: int, param: Callable[[list], list], normal: Callable[[list], list],
                 lower=(), upper=(), periodic=(), guess: Callable[[np.ndarray], np.ndarray] | None = None,
                 name: str = "Q"):
        self.n = n
        self.dim = dim
        self.param = param
        self.normal = normal
        self.lower = np.asarray(lower, dtype=float).reshape(dim)
        self.upper = np.asarray(upper, dtype=float).reshape(dim)
        self.periodic = tuple(bool(p) for p in periodic) or (False,) * dim
        self.guess = guess
        self.name = name
        self._grid = None

    @classmethod
    def from_exprs(cls, param: Sequence[str], normal: Sequence[Sequence[str]], n: int, lower=(), upper=(),
                   periodic=(), guess: Sequence[str] | None = None, name: str = "Q") -> "SubmanifoldModel":
        dim = len(lower)
        if len(param) != n:
            raise ValueError(f"parametrization needs {n} components")
        ptrees = [expr.parse(t, max(dim, 1), "chart") for t in param]
        ntrees = [[expr.parse(t, max(dim, 1), "chart") for t in vec] for vec in normal]
        if len(ntrees) != n - dim or any(len(v) != n for v in ntrees):
            raise ValueError(f"normal frame needs {n - dim} vectors of length {n}")
        gfun = None
        if guess is not None:
            gtrees = [expr.parse(t, n) for t in guess]
            if len(gtrees) != dim:
                raise ValueError(f"guess needs {dim} components")

            def gfun(P):
                cols = [P[:, i] for i in range(n)]
                return np.stack([np.broadcast_to(expr.evaluate(t, cols), (len(P),)) for t in gtrees], axis=-1)

        return cls(
            n, dim,
            lambda s: [expr.evaluate(t, s) for t in ptrees],
            lambda s: [[expr.evaluate(t, s) for t in vec] for vec in ntrees],
            lower, upper, periodic, gfun, name,
        )

    @classmethod
    def point(cls, q, name: str = "point") -> "SubmanifoldModel":
        q = [float(x) for x in q]
        n = len(q)
        eye = np.eye(n)
        return cls(n, 0, lambda s: list(q), lambda s: [list(map(float, r)) for r in eye], name=name)

    # frames ---------------------------------------------------------------
    def tangent_frame(self, s: Sequence) -> list[list]:
        """Columns ``T[j] = d param / d s_j`` as lists of ambient components."""
        if self.dim == 0:
            return []
        _, J = dual.jacobian(self.param, s)
        return [[J[i][j] for i in range(self.n)] for j in range(self.dim)]

    def frames(self, s_points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Embedded points, tangent and normal frames at chart samples: (N,n), (N,n,dim), (N,n,n-dim)."""
        S = np.asarray(s_points, dtype=float)
        if S.ndim != 2:
            S = S.reshape(-1, self.dim) if self.dim else S.reshape(1, 0)
        N = len(S)
        cols = [S[:, j] for j in range(self.dim)]
        Q = np.stack([dual.to_array(c, (N,)) for c in self.param(cols)], axis=-1) if N else np.zeros((0, self.n))
        T = np.zeros((N, self.n, self.dim))
        for j, vec in enumerate(self.tangent_frame(cols)):
            for i, c in enumerate(vec):
                T[:, i, j] = dual.to_array(c, (N,))
        Nf = np.zeros((N, self.n, self.n - self.dim))
        for j, vec in enumerate(self.normal(cols)):
            for i, c in enumerate(vec):
                Nf[:, i, j] = dual.to_array(c, (N,))
        return Q, T, Nf

    def sample_chart(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.dim == 0:
            return np.zeros((1, 0))
        return self.lower + (self.upper - self.lower) * rng.random((count, self.dim))

    def embed(self, S: np.ndarray) -> np.ndarray:
        return self.frames(S)[0]

    def check_frames(self, S: np.ndarray, tol: float = 1e-9) -> CheckResult:
        """Tangent and normal frames mutually orthogonal; normal frame orthonormal."""
        _, T, Nf = self.frames(S)
        res = []
        if self.dim:
            res.append(np.abs(np.einsum("kia,kib->kab", T, Nf)).reshape(len(S), -1).max(axis=1))
            sv = np.linalg.svd(T, compute_uv=False)
            res.append(np.where(sv[:, -1] > 1e-10, 0.0, np.inf))
        G = np.einsum("kia,kib->kab", Nf, Nf) - np.eye(self.n - self.dim)
        res.append(np.abs(G).reshape(len(S), -1).max(axis=1))
        return CheckResult.from_residuals("frames-orthonormal", np.max(np.stack(res), axis=0), tol)

    # projection -----------------------------------------------------------
    def _grid_guess(self, P: np.ndarray) -> np.ndarray:
        if self._grid is None:
            per = {1: 256, 2: 48}.get(self.dim, 12)
            axes = [np.linspace(lo, hi, per, endpoint=not per_) for lo, hi, per_ in
                    zip(self.lower, self.upper, self.periodic)]
            G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
            self._grid = (G, self.embed(G))
        G, QG = self._grid
        out = np.empty((len(P), self.dim))
        for start in range(0, len(P), 2048):
            chunk = P[start:start + 2048]
            d2 = np.sum((chunk[:, None, :] - QG[None, :, :]) ** 2, axis=-1)
            out[start:start + 2048] = G[np.argmin(d2, axis=1)]
        return out

    def _newton(self, s: list, xs: list) -> tuple[list, list]:
        def F(ss):
            qv, J = dual.jacobian(self.param, ss)
            out = []
            for j in range(self.dim):
                acc = 0.0
                for i in range(self.n):
                    acc = acc + J[i][j] * (xs[i] - qv[i])
                out.append(acc)
            return out

        Fv, JF = dual.jacobian(F, s)
        delta = dual.solve(JF, Fv)
        return [a - d for a, d in zip(s, delta)], delta

    def project(self, xs: Sequence) -> tuple[list, list, list]:
        """Tube coordinates ``(s, q, v)`` of ambient points with ``x = q + v``, ``v`` normal.

        The nearest-point equations are solved by Newton iteration on primal
        values; two further Newton steps on the generic inputs make every
        derivative up to third order exact.
        """
        xs = list(xs)
        if self.dim == 0:
            q = self.param([])
            return [], q, [x - qi for x, qi in zip(xs, q)]
        shape = batch_shape(xs)
        prim = [np.broadcast_to(np.asarray(dual.primal(x), dtype=float), shape).reshape(-1) for x in xs]
        P = np.stack(prim, axis=-1)
        s0 = self.guess(P) if self.guess is not None else self._grid_guess(P)
        s = [s0[:, j].astype(float) for j in range(self.dim)]
        for _ in range(60):
            s, delta = self._newton(s, prim)
            step = max(float(np.max(np.abs(d))) for d in delta) if P.size else 0.0
            if step <= 1e-14 * (1.0 + max(float(np.max(np.abs(a))) for a in s)):
                break
        else:
            if step > 1e-10:
                raise ProjectionError(f"nearest-point projection onto {self.name} did not converge (step {step:.3g})")
        s = [a.reshape(shape) for a in s]
        if dual.outer_tag(xs):
            for _ in range(2):
                s, _ = self._newton(s, xs)
        q = self.param(s)
        return s, q, [x - qi for x, qi in zip(xs, q)]


@dataclass
class TubularModel:
    submanifold: SubmanifoldModel
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("tube radius must be positive")

    @property
    def n(self) -> int:
        return self.submanifold.n

    def normal_distance(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float).reshape(-1, self.n)
        _, _, v = self.submanifold.project([P[:, i] for i in range(self.n)])
        return np.sqrt(sum(dual.to_array(c, (len(P),)) ** 2 for c in v))

    def contains(self, P) -> np.ndarray:
        return self.normal_distance(P) < self.epsilon

    def exp(self, S: np.ndarray, C: np.ndarray) -> np.ndarray:
        """``q(s) + sum_j c_j N_j(s)`` for chart points S and normal coefficients C."""
        Q, _, Nf = self.submanifold.frames(S)
        return Q + np.einsum("kij,kj->ki", Nf, np.asarray(C, dtype=float).reshape(len(Q), -1))

    def sample(self, count: int, rng: np.random.Generator, fraction: float = 1.0) -> np.ndarray:
        """Points ``q + v`` with ``|v| < fraction * epsilon``, uniform in each normal ball."""
        Qm = self.submanifold
        S = Qm.sample_chart(count, rng) if Qm.dim else np.zeros((count, 0))
        d = self.n - Qm.dim
        g = rng.standard_normal((count, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = fraction * self.epsilon * rng.random(count) ** (1.0 / d)
        return self.exp(S, g * r[:, None])

    def check_injective(self, count: int, rng: np.random.Generator, tol: float = 1e-9) -> CheckResult:
        """Sampled tube points project back to their own base point and normal vector."""
        Qm = self.submanifold
        S = Qm.sample_chart(count, rng) if Qm.dim else np.zeros((count, 0))
        d = self.n - Qm.dim
        C = rng.uniform(-1, 1, (count, d))
        C *= (0.99 * self.epsilon * rng.random(count) / np.maximum(np.linalg.norm(C, axis=1), 1e-300))[:, None]
        P = self.exp(S, C)
        _, q, _ = Qm.project([P[:, i] for i in range(self.n)])
        Q = Qm.embed(S)
        err = np.max(np.abs(np.stack([dual.to_array(c, (count,)) for c in q], -1) - Q), axis=1)
        return CheckResult.from_residuals("tube-injective", err, tol)


@dataclass
class RetractionFamily:
    """``phi_t(q + v) = q + t v`` and its time derivative ``v``, valid on [0, 1]."""

    tube: TubularModel

    @property
    def n(self) -> int:
        return self.tube.n

    def coords(self, xs) -> tuple[list, list]:
        _, q, v = self.tube.submanifold.project(xs)
        return q, v

    def phi(self, t: float, points) -> np.ndarray:
        P = self._inside(points)
        q, v = self.coords([P[:, i] for i in range(self.n)])
        return np.stack([dual.to_array(a + t * b, (len(P),)) for a, b in zip(q, v)], -1)

    def velocity(self, t: float, points) -> np.ndarray:
        P = self._inside(points)
        _, v = self.coords([P[:, i] for i in range(self.n)])
        return np.stack([dual.to_array(b, (len(P),)) for b in v], -1)

    def phi_jacobian(self, t: float, points) -> np.ndarray:
        """``D phi_t`` at points, shape (N, n, n)."""
        P = self._inside(points)
        cols = [P[:, i] for i in range(self.n)]
        _, J = dual.jacobian(lambda xs: [a + t * b for a, b in zip(*self.coords(xs))], cols)
        return np.stack([np.stack([dual.to_array(c, (len(P),)) for c in row], -1) for row in J], 1)

    def _inside(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float).reshape(-1, self.n)
        if not np.all(self.tube.contains(P)):
            raise ValueError("point outside the tube")
        return P


def build_retraction(tube: TubularModel) -> RetractionFamily:
    if tube.submanifold.dim and not np.all(tube.submanifold.upper > tube.submanifold.lower):
        raise ValueError("parameter box must have positive width")
    return RetractionFamily(tube)


# ---------------------------------------------------------------- homotopy sigma


class HomotopySigma(KFormField):
    """The 1-form ``sigma = int_0^1 phi_t^* (i_{X_t} tau) dt`` with ``d sigma = tau``."""

    def __init__(self, tau: KFormField, retraction: RetractionFamily, nodes: int):
        self.tau = tau
        self.retraction = retraction
        self.nodes = nodes
        super().__init__(tau.n, 1, self._eval, tau.exact, "sigma")

    def coeffs_with(self, xs, m: int) -> list:
        n = self.tau.n
        xs = list(xs)
        q, v = self.retraction.coords(xs)
        _, Dq = dual.jacobian(lambda ys: self.retraction.coords(ys)[0], xs)
        tau = self.tau

        def integrand(t):
            ys = [a + t * b for a, b in zip(q, v)]
            u = interior_coeffs(n, 2, v, tau.coeffs(ys))  # u_b = tau(v, e_b)
            out = []
            for j in range(n):
                acc = 0.0
                for b in range(n):
                    acc = acc + u[b] * Dq[b][j]
                out.append(t * u[j] + (1.0 - t) * acc)
            return out

        return integrate(integrand, batch_shape(xs), m)

    def _eval(self, xs):
        return self.coeffs_with(xs, self.nodes)


def homotopy_sigma(tau: KFormField, retraction: RetractionFamily, samples=None,
                   quad: QuadratureConfig = QuadratureConfig(), nodes: int | None = None) -> HomotopySigma:
    """Homotopy 1-form of a closed 2-form on the tube.

    The node count starts at ``quad.sigma_nodes`` and doubles on ``samples``
    until the relative change is at most ``quad.sigma_rtol``; pass ``nodes``
    to fix it instead.
    """
    if tau.k != 2 or tau.n != retraction.n:
        raise ValueError("homotopy_sigma needs a 2-form on the ambient space of the tube")
    sig = HomotopySigma(tau, retraction, nodes or quad.sigma_nodes)
    if nodes is None and samples is not None and len(samples):
        P = np.asarray(samples, dtype=float)
        cols = [P[:, i] for i in range(tau.n)]
        sig.nodes, _ = calibrate(
            lambda m: np.stack([dual.to_array(c, (len(P),)) for c in sig.coeffs_with(cols, m)], -1),
            quad.sigma_nodes, quad.sigma_rtol, quad.max_nodes,
        )
    return sig


# ----------------------------------------------------------------- Moser field


def moser_field(t: float, p, eta_t, sigma, threshold: float = 1e-8) -> np.ndarray:
    """Solve ``i_Y eta_t = -sigma`` at one point.

    With ``A_ij = eta_t(e_i, e_j)`` and contraction in the first slot,
    ``i_Y eta_t = -A Y`` as a covector, so ``Y`` solves ``A Y = sigma``.
    """
    A = eta_t.matrix() if hasattr(eta_t, "matrix") else np.asarray(eta_t, dtype=float)
    s = np.asarray(sigma.coeffs if hasattr(sigma, "coeffs") else sigma, dtype=float)
    margin = float(np.linalg.svd(A, compute_uv=False)[-1]) if A.size else 0.0
    if A.shape[0] % 2 or margin < threshold:
        raise DegenerateFormError(np.asarray(p, dtype=float), margin, threshold, t)
    return np.linalg.solve(A, s)


class MoserSystem:
    """The nonautonomous field ``Y_t`` for ``eta_t = eta_0 + t (eta_1 - eta_0)``."""

    def __init__(self, eta0: KFormField, eta1: KFormField, sigma: KFormField, threshold: float = 1e-8):
        self.eta0 = eta0
        self.eta1 = eta1
        self.sigma = sigma
        self.n = eta0.n
        self.threshold = threshold

    def eta_coeffs(self, t: float, xs) -> list:
        e0 = self.eta0.coeffs(xs)
        e1 = self.eta1.coeffs(xs)
        return [a + t * (b - a) for a, b in zip(e0, e1)]

    def field(self, t: float, xs) -> list:
        A = skew_matrix(self.n, self.eta_coeffs(t, xs))
        return dual.solve(A, self.sigma.coeffs(xs))

    def field_values(self, t: float, points) -> np.ndarray:
        P = np.asarray(points, dtype=float).reshape(-1, self.n)
        return np.stack([dual.to_array(c, (len(P),)) for c in self.field(t, [P[:, i] for i in range(self.n)])], -1)

    def margin(self, t: float, P: np.ndarray) -> np.ndarray:
        cols = [P[:, i] for i in range(self.n)]
        C = np.stack([dual.to_array(c, (len(P),)) for c in self.eta_coeffs(t, cols)], -1)
        return margins(C, self.n)

    def rhs(self, t: float, P: np.ndarray, J: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        N = len(P)
        m = self.margin(t, P)
        worst = int(np.argmin(m))
        if m[worst] < self.threshold:
            raise DegenerateFormError(P[worst], float(m[worst]), self.threshold, t)
        cols = [P[:, i] for i in range(self.n)]
        Y, DY = dual.jacobian(lambda xs: self.field(t, xs), cols)
        Yv = np.stack([dual.to_array(c, (N,)) for c in Y], -1)
        D = np.stack([np.stack([dual.to_array(c, (N,)) for c in row], -1) for row in DY], 1)
        return Yv, D @ J, float(m[worst])


@dataclass
class MoserFlowResult:
    seeds: np.ndarray
    images: np.ndarray
    jacobians: np.ndarray
    trajectory: dict  # t -> points
    trajectory_jacobians: dict  # t -> jacobians
    invariance: dict  # t -> per-seed max |phi_t^* eta_t - eta_0|
    steps: int
    max_field_norm: float
    min_margin: float
    factor: np.ndarray | None = None

    def records(self) -> list[dict]:
        """One record per seed: seed, image, Jacobian, conformal factor, diagnostics."""
        out = []
        for i in range(len(self.seeds)):
            out.append({
                "seed": self.seeds[i].tolist(),
                "image": self.images[i].tolist(),
                "jacobian": self.jacobians[i].tolist(),
                "factor": None if self.factor is None else float(self.factor[i]),
                "invariance": {f"{t:g}": float(r[i]) for t, r in sorted(self.invariance.items())},
            })
        return out

    @property
    def diagnostics(self) -> dict:
        return {"steps": self.steps, "max_field_norm": self.max_field_norm, "min_margin": self.min_margin}


def integrate_moser_flow(seeds, eta0: KFormField, eta1: KFormField, sigma: KFormField,
                         steps: int = 200, checkpoints: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
                         domain: Callable[[np.ndarray], np.ndarray] | None = None,
                         normal_distance: Callable[[np.ndarray], np.ndarray] | None = None,
                         threshold: float = 1e-8) -> MoserFlowResult:
    """Classical RK4 on ``Y_t`` with the variational equation ``J' = DY_t J``.

    Records states at the checkpoints (which must fall on the step grid) and the
    invariance residual ``max |phi_t^* eta_t - eta_0|`` there.
    """
    P = np.array(seeds, dtype=float).reshape(-1, eta0.n)
    n = eta0.n
    N = len(P)
    system = MoserSystem(eta0, eta1, sigma, threshold)
    h = 1.0 / steps
    marks = {}
    for c in checkpoints:
        k = round(c * steps)
        if abs(k * h - c) > 1e-12:
            raise ValueError(f"checkpoint {c} is not on the {steps}-step grid")
        marks[k] = float(c)
    J = np.broadcast_to(np.eye(n), (N, n, n)).copy()
    X = P.copy()
    traj, trajJ = {}, {}
    if 0 in marks:
        traj[marks[0]], trajJ[marks[0]] = X.copy(), J.copy()
    max_norm = 0.0
    min_margin = np.inf
    for k in range(steps):
        t = k * h
        k1, K1, m1 = system.rhs(t, X, J)
        k2, K2, m2 = system.rhs(t + 0.5 * h, X + 0.5 * h * k1, J + 0.5 * h * K1)
        k3, K3, m3 = system.rhs(t + 0.5 * h, X + 0.5 * h * k2, J + 0.5 * h * K2)
        k4, K4, m4 = system.rhs(t + h, X + h * k3, J + h * K3)
        Xn = X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Jn = J + h / 6.0 * (K1 + 2 * K2 + 2 * K3 + K4)
        max_norm = max(max_norm, float(np.max(np.linalg.norm(k1, axis=1))) if N else 0.0)
        min_margin = min(min_margin, m1, m2, m3, m4)
        if domain is not None:
            ok = np.asarray(domain(Xn), dtype=bool)
            if not ok.all():
                bad = np.flatnonzero(~ok)
                eps = None
                if normal_distance is not None:
                    eps = float(np.min(normal_distance(P[bad])))
                raise FlowAborted(
                    f"{len(bad)} trajectories left the domain at t={t + h:g}; "
                    f"largest safe seed radius ~ {eps if eps is not None else 'unknown'}",
                    t, X, eps,
                )
        X, J = Xn, Jn
        if k + 1 in marks:
            traj[marks[k + 1]], trajJ[marks[k + 1]] = X.copy(), J.copy()
    base = eta0.values(P)
    inv = {}
    for c in traj:
        Xc, Jc = traj[c], trajJ[c]
        cols = [Xc[:, i] for i in range(n)]
        et = np.stack([dual.to_array(v, (N,)) for v in system.eta_coeffs(c, cols)], -1)
        pulled = pullback_arrays(Jc, et, n, 2)
        inv[c] = np.max(np.abs(pulled - base), axis=1)
    return MoserFlowResult(P, X, J, traj, trajJ, inv, steps, max_norm, float(min_margin))


def pullback_arrays(J: np.ndarray, coeffs: np.ndarray, n: int, k: int) -> np.ndarray:
    """Pull back per-point coefficient rows by per-point Jacobians (N, n_out, n_in)."""
    N = len(J)
    Jl = [[J[:, i, j] for j in range(J.shape[2])] for i in range(J.shape[1])]
    out = pullback_coeffs(J.shape[2], n, k, Jl, [coeffs[:, i] for i in range(coeffs.shape[1])])
    return np.stack([dual.to_array(c, (N,)) for c in out], -1)


# ------------------------------------------------------------- Darboux-Weinstein


@dataclass
class PatchRun:
    patch: StarPatch
    f0: ConformalFactor
    f1: ConformalFactor
    eta0: KFormField
    eta1: KFormField
    tau: KFormField
    sigma: HomotopySigma
    flow: MoserFlowResult | None
    system: MoserSystem
    q_count: int = 0  # trailing seeds that lie on Q

    def factor(self, points, images) -> np.ndarray:
        return self.f0(points) - self.f1(images)


@dataclass
class DarbouxWeinsteinResult:
    runs: list[PatchRun]
    report: VerificationReport
    points: np.ndarray  # tube seeds over all patches
    images: np.ndarray
    jacobians: np.ndarray
    factor: np.ndarray
    residual: np.ndarray  # per-point max |omega_0 - e^g phi^* omega_1|
    hypotheses: VerificationReport = field(default_factory=VerificationReport)


def check_hypotheses(omega0, omega1, theta0, theta1, Q: SubmanifoldModel, q_points: np.ndarray,
                     q_chart: np.ndarray, tol: Tolerances) -> VerificationReport:
    rep = VerificationReport()
    rep.add(nondegeneracy_check(omega0, q_points, tol, "omega0-nondegenerate-on-Q"))
    rep.add(nondegeneracy_check(omega1, q_points, tol, "omega1-nondegenerate-on-Q"))
    diff = np.max(np.abs(omega0.values(q_points) - omega1.values(q_points)), axis=1)
    worst = int(np.argmax(diff)) if len(diff) else 0
    rep.add(CheckResult.from_residuals("equal-on-TqM", diff, tol.equal_on_q,
                                       worst_sample=q_points[worst].tolist() if len(diff) else []))
    if Q.dim:
        _, T, _ = Q.frames(q_chart)
        d = theta0.values(q_points) - theta1.values(q_points)
        res = np.max(np.abs(np.einsum("ki,kij->kj", d, T)), axis=1)
    else:
        res = np.zeros(len(q_points))
    rep.add(CheckResult.from_residuals("lee-forms-agree-on-TQ", res, tol.equal_on_q))
    return rep


def _is_zero_form(w: KFormField, P: np.ndarray) -> bool:
    return bool(np.all(w.values(P) == 0.0))


def run_patch(omega0, omega1, theta0, theta1, retraction: RetractionFamily, patch: StarPatch,
              seeds: np.ndarray, q_points: np.ndarray, tol: Tolerances, quad: QuadratureConfig,
              flow_cfg: FlowConfig, potentials: tuple[ConformalFactor, ConformalFactor] | None = None,
              label: str = "") -> tuple[PatchRun, VerificationReport]:
    """Potentials, rescaled forms, homotopy form and Moser flow on one patch."""
    rep = VerificationReport()
    tube = retraction.tube
    base_dist = float(tube.normal_distance(patch.basepoint)[0])
    if base_dist > 1e-9:
        raise ValueError(f"{patch.name}: basepoint must lie on Q (distance {base_dist:.3g})")
    if potentials is None:
        f0 = local_potential(theta0, patch, patch.anchor, tol, quad)
        f1 = local_potential(theta1, patch, patch.anchor, tol, quad)
    else:
        f0, f1 = potentials
    rep.add(CheckResult.from_residuals(f"potential-f0{label}", potential_residual(f0, theta0, seeds), tol.potential))
    rep.add(CheckResult.from_residuals(f"potential-f1{label}", potential_residual(f1, theta1, seeds), tol.potential))
    if len(q_points):
        rep.add(CheckResult.from_residuals(f"potentials-agree-on-Q{label}", f0(q_points) - f1(q_points), tol.potential))
    eta0 = conformal_rescale(omega0, f0, -1)
    eta1 = conformal_rescale(omega1, f1, -1)
    tau = eta1 - eta0
    sigma = homotopy_sigma(tau, retraction, seeds, quad)
    dsig = exterior_derivative(sigma).values(seeds) - tau.values(seeds)
    rep.add(CheckResult.from_residuals(f"homotopy-formula{label}", np.max(np.abs(dsig), axis=1),
                                       tol.homotopy if tau.exact else tol.fd, nodes=sigma.nodes))
    if len(q_points):
        rep.add(CheckResult.from_residuals(f"sigma-vanishes-on-Q{label}",
                                           np.max(np.abs(sigma.values(q_points)), axis=1), tol.sigma_on_q))
    system = MoserSystem(eta0, eta1, sigma, tol.nondegeneracy)
    allseeds = np.vstack([seeds, q_points]) if len(q_points) else seeds
    flow = integrate_moser_flow(allseeds, eta0, eta1, sigma, flow_cfg.steps, flow_cfg.checkpoints,
                                domain=lambda P: patch.member(P) & tube.contains(P),
                                normal_distance=tube.normal_distance, threshold=tol.nondegeneracy)
    for c, r in sorted(flow.invariance.items()):
        rep.add(CheckResult.from_residuals(f"moser-invariance-t{c:g}{label}", r, tol.moser_invariance))
    run = PatchRun(patch, f0, f1, eta0, eta1, tau, sigma, flow, system, len(q_points))
    if len(q_points):
        moved = np.max(np.abs(flow.images[len(seeds):] - q_points), axis=1)
        rep.add(CheckResult.from_residuals(f"q-fixed{label}", moved, tol.q_fixed))
    return run, rep


def conformal_conclusion(omega0: KFormField, omega1: KFormField, run: PatchRun, points, images, jacobians):
    """Factor ``g = f0 - f1 o phi`` and per-point ``max |omega_0 - e^g phi^* omega_1|``."""
    g = run.factor(points, images)
    pulled = pullback_arrays(jacobians, omega1.values(images), omega0.n, 2)
    res = np.max(np.abs(omega0.values(points) - np.exp(g)[:, None] * pulled), axis=1)
    return g, res


def darboux_weinstein(omega0: KFormField, omega1: KFormField, theta0: KFormField, theta1: KFormField,
                      tube: TubularModel, patches: Sequence[StarPatch], q_chart: np.ndarray | None = None,
                      tol: Tolerances = Tolerances(), quad: QuadratureConfig = QuadratureConfig(),
                      flow_cfg: FlowConfig = FlowConfig(), rng: np.random.Generator | None = None,
                      potentials: Sequence[tuple[ConformalFactor, ConformalFactor]] | None = None,
                      ) -> DarbouxWeinsteinResult:
    """Local conformal Darboux-Weinstein on each patch, checked against its conclusion.

    Each patch's samples that lie in the tube serve as flow seeds; chart
    samples of Q inside the patch are flowed too, to confirm ``phi|_Q = id``.
    """
    rng = rng or np.random.default_rng(0)
    Q = tube.submanifold
    if q_chart is None:
        q_chart = Q.sample_chart(64, rng)
    q_all = Q.embed(q_chart)
    hyp = check_hypotheses(omega0, omega1, theta0, theta1, Q, q_all, q_chart, tol)
    if not hyp.passed:
        raise HypothesisError(hyp)
    report = VerificationReport()
    report.extend(hyp)
    retraction = build_retraction(tube)
    runs, pts, imgs, jacs, factors, resids = [], [], [], [], [], []
    taken = np.zeros(0, dtype=bool)
    for a, patch in enumerate(patches):
        label = f"[{patch.name}]" if len(patches) > 1 else ""
        S = patch.samples
        seeds = S[tube.contains(S)] if len(S) else S
        qin = q_all[patch.member(q_all)]
        pots = potentials[a] if potentials is not None else None
        run, rep = run_patch(omega0, omega1, theta0, theta1, retraction, patch, seeds, qin, tol, quad,
                             flow_cfg, pots, label)
        report.extend(rep)
        ns = len(seeds)
        g, res = conformal_conclusion(omega0, omega1, run, seeds, run.flow.images[:ns], run.flow.jacobians[:ns])
        run.flow.factor = np.concatenate([g, run.factor(qin, run.flow.images[ns:])]) if len(qin) else g
        report.add(CheckResult.from_residuals(f"conformal-conclusion{label}", res, tol.conformal))
        if len(qin):
            report.add(CheckResult.from_residuals(f"factor-on-Q{label}", run.flow.factor[ns:], tol.factor_on_q))
        runs.append(run)
        pts.append(seeds)
        imgs.append(run.flow.images[:ns])
        jacs.append(run.flow.jacobians[:ns])
        factors.append(g)
        resids.append(res)
    taken = np.vstack(pts)
    factor = np.concatenate(factors)
    if _is_zero_form(theta0, taken) and _is_zero_form(theta1, taken):
        report.add(CheckResult.from_residuals("classical-factor-zero", factor, tol.factor_on_q))
    return DarbouxWeinsteinResult(runs, report, taken, np.vstack(imgs), np.vstack(jacs), factor,
                                  np.concatenate(resids), hyp)


def gluing_check(runs: Sequence[PatchRun], overlaps: dict, tol: Tolerances = Tolerances(),
                 times: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                 flow_cfg: FlowConfig = FlowConfig()) -> tuple[VerificationReport, dict]:
    """Agreement of Moser fields, flows, factors and homotopy forms on patch overlaps.

    ``overlaps`` maps index pairs ``(a, b)``, or ``(a, b, component)`` when an
    overlap has several components, to sample points.  Returns the report and
    the recovered transition constant per key.
    """
    rep = VerificationReport()
    consts = {}
    if len(runs) < 2 or not overlaps:
        rep.add(CheckResult.from_residuals("gluing", [], tol.gluing, note="single patch: vacuous"))
        return rep, consts
    for key, P in sorted(overlaps.items(), key=lambda kv: tuple(map(str, kv[0]))):
        a, b = key[:2]
        P = np.asarray(P, dtype=float)
        ra, rb = runs[a], runs[b]
        label = f"[{ra.patch.name}|{rb.patch.name}" + (f"|{key[2]}]" if len(key) > 2 else "]")
        tr = transition_constant(ra.f0, rb.f0, P, tol, (ra.f1, rb.f1), label)
        rep.extend(tr.report)
        consts[key] = tr.c
        ya = np.concatenate([ra.system.field_values(t, P) for t in times])
        yb = np.concatenate([rb.system.field_values(t, P) for t in times])
        rep.add(CheckResult.from_residuals(f"gluing-moser-field{label}", np.max(np.abs(ya - yb), axis=1), tol.gluing))
        sa = ra.sigma.values(P)
        sb = rb.sigma.values(P)
        rep.add(CheckResult.from_residuals(f"gluing-sigma{label}",
                                           np.max(np.abs(sa - np.exp(-tr.c) * sb), axis=1), tol.gluing))
        fa = integrate_moser_flow(P, ra.eta0, ra.eta1, ra.sigma, flow_cfg.steps, (1.0,))
        fb = integrate_moser_flow(P, rb.eta0, rb.eta1, rb.sigma, flow_cfg.steps, (1.0,))
        rep.add(CheckResult.from_residuals(f"gluing-flow{label}", np.max(np.abs(fa.images - fb.images), axis=1),
                                           tol.gluing))
        ga = ra.factor(P, fa.images)
        gb = rb.factor(P, fb.images)
        rep.add(CheckResult.from_residuals(f"gluing-factor{label}", ga - gb, tol.gluing))
    return rep, consts
