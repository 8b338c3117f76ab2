"""Run a scenario through its pipeline and collect a deterministic report."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lcskit import expr
from lcskit.cotangent import (
    CotangentModel,
    LagrangianError,
    StageError,
    hr_form,
    identify_normal_cotangent,
    weinstein_lcs,
)
from lcskit.forms import exterior_derivative, function_field, pullback
from lcskit.lcs import (
    LcsStructure,
    NotClosedError,
    check_lcs,
    conformal_equivalence,
    conformal_rescale,
    d_theta,
)
from lcskit.moser import (
    FlowAborted,
    HypothesisError,
    SubmanifoldModel,
    darboux_weinstein,
    gluing_check,
    integrate_moser_flow,
)
from lcskit.quadrature import QuadratureError
from lcskit.report import CheckResult, VerificationReport, _clean
from lcskit.scenario import Scenario


@dataclass
class RunReport:
    scenario: str
    pipeline: str
    report: VerificationReport
    config: dict
    diagnostics: dict = field(default_factory=dict)
    error: dict | None = None
    timing: dict | None = None
    # plot data, not serialized into the report
    points: np.ndarray | None = None
    residual: np.ndarray | None = None
    factor: np.ndarray | None = None
    records: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.error is None and self.report.passed and bool(self.report.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "pipeline": self.pipeline,
            "pass": self.passed,
            "failed_checks": self.report.failed(),
            "checks": self.report.to_list(),
            "config": _clean(self.config),
            "diagnostics": _clean(self.diagnostics),
        }
        if self.error is not None:
            out["error"] = self.error
        if self.timing is not None:
            out["timing"] = self.timing
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_data(self, directory: Path) -> list[Path]:
        """CSV plot table and, for flow pipelines, a JSON-lines record stream."""
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        if self.points is not None and len(self.points):
            path = directory / f"{self.scenario}.csv"
            n = self.points.shape[1]
            res = self.residual if self.residual is not None else np.full(len(self.points), np.nan)
            fac = self.factor if self.factor is not None else np.full(len(self.points), np.nan)
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"x{i + 1}" for i in range(n)] + ["residual_max", "conformal_factor"])
                for p, r, g in zip(self.points, res, fac):
                    w.writerow([repr(float(x)) for x in p] + [repr(float(r)), repr(float(g))])
            written.append(path)
        if self.records:
            path = directory / f"{self.scenario}.flow.jsonl"
            with path.open("w") as fh:
                for rec in self.records:
                    fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")
            written.append(path)
        return written


def run(sc: Scenario, pipeline: str | None = None, timing: bool = False) -> RunReport:
    """Execute ``sc`` and capture every pipeline error into the report."""
    pipeline = pipeline or sc.pipeline
    rep = RunReport(sc.name, pipeline, VerificationReport(), sc.echo())
    rng = np.random.default_rng(sc.sampling.seed)
    start = time.perf_counter()
    try:
        _PIPELINES[pipeline](sc, rng, rep)
    except (StageError, HypothesisError, LagrangianError) as err:
        stage = getattr(err, "stage", "hypotheses")
        inner = getattr(err, "error", err)
        if getattr(err, "report", None) is not None:
            rep.report.extend(err.report)
        rep.error = {"stage": stage, "message": str(inner)}
        _failure_check(rep, stage, str(inner))
    except FlowAborted as err:
        rep.error = {"stage": "moser-flow", "message": str(err)}
        rep.report.add(CheckResult.failure("flow-domain", str(err), t=err.t,
                                           suggested_epsilon=err.suggested_epsilon))
    except NotClosedError as err:
        rep.error = {"stage": "potentials", "message": str(err)}
        rep.report.add(CheckResult.failure("lee-form-closed", str(err), residual=err.residual))
    except (QuadratureError, ArithmeticError, expr.ExprEvalError) as err:
        rep.error = {"stage": pipeline, "message": str(err)}
        rep.report.add(CheckResult.failure("numerical-failure", str(err)))
    if timing:
        rep.timing = {"seconds": round(time.perf_counter() - start, 3)}
    return rep


def _failure_check(rep: RunReport, stage: str, message: str) -> None:
    if rep.report.failed():
        return
    name = {"identify": "q-lagrangian", "potentials": "lee-form-closed"}.get(stage, f"{stage}-stage")
    rep.report.add(CheckResult.failure(name, message))


# ------------------------------------------------------------------ samples


def _ambient_samples(sc: Scenario, rng) -> np.ndarray:
    s = sc.sampling
    if sc.submanifold is not None:
        return sc.tube().sample(s.seeds, rng, s.fraction)
    lo = np.asarray(s.lower or (-1.0,) * sc.dimension)
    hi = np.asarray(s.upper or (1.0,) * sc.dimension)
    return lo + (hi - lo) * rng.random((s.seeds, sc.dimension))


def _patches(sc: Scenario, tube, seeds):
    out = []
    for spec in sc.patches:
        patch = spec.build()
        inside = patch.member(seeds)
        patch.samples = seeds[inside]
        patch.validate()
        out.append(patch)
    return out


def _overlaps(sc: Scenario, patches, seeds) -> dict:
    names = [p.name for p in patches]
    out = {}
    for o in sc.overlaps:
        a, b = names.index(o.patches[0]), names.index(o.patches[1])
        mask = patches[a].member(seeds) & patches[b].member(seeds)
        if o.side is not None:
            tree = expr.parse(o.side, sc.dimension, sc.layout)
            val = np.broadcast_to(expr.evaluate(tree, [seeds[:, i] for i in range(sc.dimension)]), len(seeds))
            mask &= np.sign(val) == o.sign
        out[(a, b, o.label)] = seeds[mask]
    return out


# ---------------------------------------------------------------- pipelines


def _check_lcs(sc: Scenario, rng, rep: RunReport) -> None:
    P = _ambient_samples(sc, rng)
    s = LcsStructure(sc.form("omega"), sc.form("theta"))
    rep.report.extend(check_lcs(s, P, sc.tolerances))
    vals = np.abs(d_theta(s.omega, s.theta).values(P))
    res = vals.max(axis=1) if vals.shape[1] else np.zeros(len(P))
    g = np.zeros(len(P))
    if "omega_b" in sc.forms:
        g, crep = conformal_equivalence(s.omega, sc.form("omega_b"), P, sc.tolerances.equivalence)
        rep.report.extend(crep)
    rep.points, rep.residual, rep.factor = P, res, g
    rep.diagnostics["samples"] = len(P)


def _darboux(sc: Scenario, rng, rep: RunReport) -> None:
    tube = sc.tube()
    Q = tube.submanifold
    seeds = _ambient_samples(sc, rng)
    patches = _patches(sc, tube, seeds)
    q_chart = Q.sample_chart(sc.sampling.q_samples, rng)
    tol = sc.tolerances
    rep.report.add(Q.check_frames(q_chart))
    rep.report.add(tube.check_injective(sc.sampling.q_samples, rng))
    dw = darboux_weinstein(sc.form("omega0"), sc.form("omega1"), sc.form("theta0"), sc.form("theta1"), tube,
                           patches, q_chart, tol, sc.quadrature, sc.flow, rng)
    rep.report.extend(dw.report)
    _q_fixed_overall(rep, dw, tol)
    if len(patches) > 1:
        overlaps = _overlaps(sc, patches, seeds)
        grep, consts = gluing_check(dw.runs, overlaps, tol, flow_cfg=sc.flow)
        rep.report.extend(grep)
        rep.diagnostics["transition_constants"] = {k[2]: c for k, c in consts.items()}
        expected = sc.expect.get("transition_constants", {})
        for key, c in consts.items():
            if key[2] in expected:
                rep.report.add(CheckResult.from_residuals(f"transition-oracle[{key[2]}]", [c - expected[key[2]]],
                                                          tol.transition, c=c, expected=expected[key[2]]))
    if sc.sampling.step_halving or sc.sampling.convergence_order:
        _step_halving(sc, dw, rep)
    rep.points, rep.residual, rep.factor = dw.points, dw.residual, dw.factor
    rep.diagnostics["patches"] = {
        r.patch.name: {**r.flow.diagnostics, "seeds": len(r.patch.samples), "sigma_nodes": r.sigma.nodes,
                       "potential_nodes": [r.f0.nodes, r.f1.nodes]}
        for r in dw.runs
    }
    rep.diagnostics["tube_samples"] = len(dw.points)
    for r in dw.runs:
        for rec in r.flow.records():
            rec["patch"] = r.patch.name
            rep.records.append(rec)


def _q_fixed_overall(rep: RunReport, dw, tol) -> None:
    moved = []
    for r in dw.runs:
        if r.q_count:
            ns = len(r.flow.seeds) - r.q_count
            moved.append(np.max(np.abs(r.flow.images[ns:] - r.flow.seeds[ns:]), axis=1))
    if moved:
        rep.diagnostics["max_q_displacement"] = float(np.max(np.concatenate(moved)))


def _step_halving(sc: Scenario, dw, rep: RunReport) -> None:
    """Rerun each patch flow with half the steps; compare images and residual decay."""
    steps = sc.sampling.steps
    tol = sc.tolerances
    label = len(dw.runs) > 1
    for r in dw.runs:
        tag = f"[{r.patch.name}]" if label else ""
        half = integrate_moser_flow(r.flow.seeds, r.eta0, r.eta1, r.sigma, steps // 2)
        if sc.sampling.step_halving:
            diff = np.max(np.abs(half.images - r.flow.images), axis=1)
            rep.report.add(CheckResult.from_residuals(f"flow-step-halving{tag}", diff, tol.moser_invariance))
        if sc.sampling.convergence_order:
            fine = max(float(np.max(v)) for v in r.flow.invariance.values())
            coarse = max(float(np.max(v)) for v in half.invariance.values())
            ratio = coarse / max(fine, 1e-300)
            rep.report.add(CheckResult.at_least(f"convergence-ratio{tag}", [ratio], tol.convergence_ratio,
                                                fine=fine, coarse=coarse, steps=[steps // 2, steps]))


def _cotangent(sc: Scenario, rng, rep: RunReport) -> None:
    c = sc.cotangent
    tol = sc.tolerances
    model = CotangentModel(c.k, c.lower, c.upper, c.periodic)
    base = model.sample_base(sc.sampling.q_samples, rng)
    hr = hr_form(model, sc.form("theta"), base, tol)
    P = model.sample(sc.sampling.seeds, rng, sc.sampling.fiber)
    rep.report.extend(hr.check(P, tol))
    zero = SubmanifoldModel(model.n, c.k, lambda s: list(s) + [0.0 * s[0]] * c.k,
                            lambda s: [[1.0 if i == c.k + j else 0.0 for i in range(model.n)] for j in range(c.k)],
                            c.lower, c.upper, c.periodic, name="zero-section")
    ident = identify_normal_cotangent(hr.omega_theta, zero, base, tol=tol)
    rep.report.add(CheckResult.at_least("identification-invertible", ident.margins, tol.nondegeneracy))
    if c.potential is not None:
        f = function_field(c.potential, c.k)
        mis = np.max(np.abs((exterior_derivative(f) - hr.theta).values(base)), axis=1)
        rep.report.add(CheckResult.from_residuals("potential-matches-theta", mis, tol.lcs))
        fpi = pullback(model.projection, f)
        closed = exterior_derivative(conformal_rescale(hr.omega_theta, fpi, -1)).values(P)
        rep.report.add(CheckResult.from_residuals("gcs-closed", np.max(np.abs(closed), axis=1), 1e-7))
    rep.points = P
    rep.residual = np.max(np.abs(d_theta(hr.omega_theta, hr.lee).values(P)), axis=1)
    rep.factor = np.zeros(len(P))
    rep.diagnostics["identification_min_margin"] = float(np.min(ident.margins))


def _weinstein(sc: Scenario, rng, rep: RunReport) -> None:
    tube = sc.tube()
    Q = tube.submanifold
    seeds = _ambient_samples(sc, rng)
    patches = _patches(sc, tube, seeds)
    q_chart = Q.sample_chart(sc.sampling.q_samples, rng)
    rep.report.add(Q.check_frames(q_chart))
    res = weinstein_lcs(sc.form("omega"), sc.form("theta"), tube, patches, q_chart, seeds, tol=sc.tolerances,
                        quad=sc.quadrature, flow_cfg=sc.flow, rng=rng)
    rep.report.extend(res.report)
    _q_fixed_overall(rep, res.dw, sc.tolerances)
    rep.diagnostics["strict_equality"] = res.strict_equality
    rep.diagnostics["tube_samples"] = len(res.dw.points)
    rep.points, rep.factor = res.dw.points, res.factor
    rep.residual = res.residual
    for r in res.dw.runs:
        for rec in r.flow.records():
            rec["patch"] = r.patch.name
            rep.records.append(rec)


_PIPELINES = {
    "check-lcs": _check_lcs,
    "darboux": _darboux,
    "moser-flow": _darboux,
    "cotangent": _cotangent,
    "weinstein": _weinstein,
}
