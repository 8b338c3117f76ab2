"""Scenario files: TOML documents describing forms, Q, patches and run settings.

A scenario names one pipeline (``check-lcs``, ``darboux``, ``moser-flow``,
``cotangent`` or ``weinstein``).  Every expression is parsed at load time
against the declared dimension, so a bad variable or a typo is reported with
the offending field before anything runs.  See the README for the schema.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from lcskit import expr
from lcskit.config import FlowConfig, QuadratureConfig, Tolerances
from lcskit.forms import KFormField, form_from_spec
from lcskit.lcs import StarPatch
from lcskit.moser import SubmanifoldModel, TubularModel

PIPELINES = ("check-lcs", "darboux", "moser-flow", "cotangent", "weinstein")
PATCH_KINDS = ("space", "ball", "box", "wedge")
_SUFFIX = ".toml"


class ScenarioError(ValueError):
    """Invalid scenario file; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str = "", source: str = ""):
        where = f"{source}: " if source else ""
        at = f"[{field}] " if field else ""
        super().__init__(f"{where}{at}{message}")
        self.field = field
        self.source = source


@dataclass(frozen=True)
class FormSpec:
    name: str
    degree: int
    n: int
    layout: str
    entries: tuple  # ((index, text), ...)

    def build(self) -> KFormField:
        f = form_from_spec(list(self.entries), self.n, self.degree, self.layout)
        f.label = self.name
        return f

    def echo(self) -> dict:
        out = {"degree": self.degree}
        out.update({",".join(map(str, i)) if i else "0": t for i, t in self.entries})
        return out


@dataclass(frozen=True)
class SubmanifoldSpec:
    parametrization: tuple
    normal_frame: tuple
    lower: tuple
    upper: tuple
    periodic: tuple
    epsilon: float
    guess: tuple | None = None

    @property
    def dim(self) -> int:
        return len(self.lower)

    def model(self, n: int) -> SubmanifoldModel:
        return SubmanifoldModel.from_exprs(self.parametrization, self.normal_frame, n, self.lower, self.upper,
                                           self.periodic, self.guess)


@dataclass(frozen=True)
class PatchSpec:
    name: str
    kind: str
    basepoint: tuple
    anchor: float = 0.0
    radius: float = 0.0
    lower: tuple = ()
    upper: tuple = ()
    center_angle: float = 0.0
    half_width: float = 0.0

    def build(self, samples=None) -> StarPatch:
        kw = dict(name=self.name, anchor=self.anchor)
        if samples is not None:
            kw["samples"] = samples
        b = np.asarray(self.basepoint, dtype=float)
        if self.kind == "ball":
            return StarPatch.ball(b, self.radius, **kw)
        if self.kind == "box":
            return StarPatch.box(b, self.lower, self.upper, **kw)
        if self.kind == "wedge":
            return StarPatch.wedge(self.center_angle, self.half_width, b, **kw)
        return StarPatch.whole_space(b, **kw)


@dataclass(frozen=True)
class OverlapSpec:
    patches: tuple[str, str]
    label: str = ""
    side: str | None = None  # expression whose sign selects one overlap component
    sign: int = 1


@dataclass(frozen=True)
class SamplingSpec:
    seeds: int = 64
    q_samples: int = 32
    fraction: float = 0.8
    steps: int = FlowConfig.steps
    seed: int = 0
    lower: tuple = ()  # sampling box when no submanifold is given
    upper: tuple = ()
    fiber: float = 0.5  # cotangent pipeline: |p| range
    step_halving: bool = False
    convergence_order: bool = False


@dataclass(frozen=True)
class CotangentSpec:
    k: int
    lower: tuple = ()
    upper: tuple = ()
    periodic: tuple = ()
    potential: str | None = None  # f with theta = df, for the GCS check


@dataclass
class Scenario:
    name: str
    pipeline: str
    dimension: int
    layout: str = "plain"
    description: str = ""
    forms: dict = field(default_factory=dict)
    submanifold: SubmanifoldSpec | None = None
    patches: tuple = ()
    overlaps: tuple = ()
    sampling: SamplingSpec = SamplingSpec()
    tolerances: Tolerances = Tolerances()
    quadrature: QuadratureConfig = QuadratureConfig()
    cotangent: CotangentSpec | None = None
    expect: dict = field(default_factory=dict)
    source: str = ""

    def form(self, name: str) -> KFormField:
        if name not in self.forms:
            deg = 2 if name.startswith("omega") else 1
            return KFormField.zero(self.dimension if self.pipeline != "cotangent" else self.cotangent.k, deg)
        return self.forms[name].build()

    def tube(self) -> TubularModel:
        sm = self.submanifold
        return TubularModel(sm.model(self.dimension), sm.epsilon)

    @property
    def flow(self) -> FlowConfig:
        return FlowConfig(steps=self.sampling.steps)

    def echo(self) -> dict:
        """Resolved configuration, defaults included, for the report."""
        out = {
            "name": self.name,
            "pipeline": self.pipeline,
            "dimension": self.dimension,
            "layout": self.layout,
            "forms": {k: v.echo() for k, v in sorted(self.forms.items())},
            "sampling": asdict(self.sampling),
            "tolerances": self.tolerances.as_dict(),
            "quadrature": asdict(self.quadrature),
            "metric": "flat",
        }
        if self.submanifold is not None:
            out["submanifold"] = asdict(self.submanifold)
        if self.patches:
            out["patches"] = [asdict(p) for p in self.patches]
        if self.overlaps:
            out["overlaps"] = [asdict(o) for o in self.overlaps]
        if self.cotangent is not None:
            out["cotangent"] = asdict(self.cotangent)
        if self.expect:
            out["expect"] = self.expect
        return out


# ----------------------------------------------------------------- loading


def bundled_names() -> list[str]:
    root = resources.files("lcskit") / "scenarios"
    return sorted(p.name[: -len(_SUFFIX)] for p in root.iterdir() if p.name.endswith(_SUFFIX))


def resolve(name_or_path: str) -> tuple[str, str]:
    """Scenario text and a source label, from a file path or a bundled name."""
    p = Path(name_or_path)
    if p.is_file():
        return p.read_text(), str(p)
    res = resources.files("lcskit") / "scenarios" / f"{name_or_path}{_SUFFIX}"
    if res.is_file():
        return res.read_text(), f"bundled:{name_or_path}"
    raise ScenarioError(f"no scenario file or bundled scenario named {name_or_path!r}")


def load_scenario(name_or_path: str) -> Scenario:
    text, source = resolve(name_or_path)
    return parse_scenario(text, source)


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ScenarioError(str(err), "", source) from err
    return _Builder(doc, source).build()


class _Builder:
    def __init__(self, doc: dict, source: str):
        self.doc = doc
        self.source = source

    def fail(self, message: str, where: str):
        raise ScenarioError(message, where, self.source)

    def get(self, table: dict, key: str, kind, where: str, default=...):
        if key not in table:
            if default is ...:
                self.fail("missing required key", f"{where}.{key}" if where else key)
            return default
        v = table[key]
        ok = isinstance(v, kind) and not (kind in (int, float, (int, float)) and isinstance(v, bool))
        if not ok:
            self.fail(f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}",
                      f"{where}.{key}" if where else key)
        return v

    def numbers(self, table, key, where, length=None, default=...):
        v = self.get(table, key, list, where, default)
        if v is default and default is not ...:
            return default
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self.fail("expected a list of numbers", f"{where}.{key}")
        if length is not None and len(v) != length:
            self.fail(f"expected {length} numbers, got {len(v)}", f"{where}.{key}")
        return tuple(float(x) for x in v)

    def check_expr(self, text, n, layout, where):
        if not isinstance(text, str):
            self.fail("expression must be a string", where)
        try:
            expr.parse(text, n, layout)
        except expr.ExprSyntaxError as err:
            self.fail(str(err), where)
        return text

    def build(self) -> Scenario:
        d = self.doc
        known = {"name", "pipeline", "dimension", "layout", "description", "forms", "submanifold", "patches",
                 "overlaps", "sampling", "tolerances", "quadrature", "cotangent", "expect"}
        for key in d:
            if key not in known:
                self.fail("unknown key", key)
        name = self.get(d, "name", str, "")
        pipeline = self.get(d, "pipeline", str, "")
        if pipeline not in PIPELINES:
            self.fail(f"unknown pipeline {pipeline!r}; expected one of {', '.join(PIPELINES)}", "pipeline")
        layout = self.get(d, "layout", str, "", "plain")
        if layout not in ("plain", "cotangent"):
            self.fail("layout must be 'plain' or 'cotangent'", "layout")
        cot = self.cotangent(d.get("cotangent"), pipeline)
        dim = self.get(d, "dimension", int, "", 2 * cot.k if cot else ...)
        if dim < 1:
            self.fail("dimension must be positive", "dimension")
        if layout == "cotangent" and dim % 2:
            self.fail("cotangent layout needs an even dimension", "layout")
        forms = self.forms(self.get(d, "forms", dict, "", {}), dim, layout, pipeline, cot)
        sub = self.submanifold(d["submanifold"], dim, layout) if "submanifold" in d else None
        patches = self.patches(self.get(d, "patches", list, "", []), dim)
        overlaps = self.overlaps(self.get(d, "overlaps", list, "", []), patches, dim, layout)
        sampling = self.sampling(self.get(d, "sampling", dict, "", {}), dim, sub)
        tol = self.tolerances(self.get(d, "tolerances", dict, "", {}))
        quad = self.quadrature(self.get(d, "quadrature", dict, "", {}))
        expect = self.get(d, "expect", dict, "", {})
        if pipeline in ("darboux", "moser-flow", "weinstein"):
            if sub is None:
                self.fail(f"pipeline {pipeline} needs a [submanifold] table", "submanifold")
            if not patches:
                self.fail(f"pipeline {pipeline} needs at least one [[patches]] entry", "patches")
        return Scenario(name, pipeline, dim, layout, self.get(d, "description", str, "", ""), forms, sub,
                        patches, overlaps, sampling, tol, quad, cot, expect, self.source)

    def cotangent(self, t, pipeline):
        if t is None:
            if pipeline == "cotangent":
                self.fail("pipeline cotangent needs a [cotangent] table", "cotangent")
            return None
        if not isinstance(t, dict):
            self.fail("expected a table", "cotangent")
        k = self.get(t, "k", int, "cotangent")
        if k < 1:
            self.fail("base dimension must be positive", "cotangent.k")
        lower = self.numbers(t, "lower", "cotangent", k, (-1.0,) * k)
        upper = self.numbers(t, "upper", "cotangent", k, (1.0,) * k)
        periodic = tuple(self.get(t, "periodic", list, "cotangent", [False] * k))
        pot = self.get(t, "potential", str, "cotangent", None)
        if pot is not None:
            self.check_expr(pot, k, "plain", "cotangent.potential")
        return CotangentSpec(k, lower, upper, periodic, pot)

    def forms(self, table, dim, layout, pipeline, cot):
        required = {
            "check-lcs": ("omega",),
            "darboux": ("omega0", "omega1"),
            "moser-flow": ("omega0", "omega1"),
            "cotangent": (),
            "weinstein": ("omega",),
        }[pipeline]
        for r in required:
            if r not in table:
                self.fail("missing required form", f"forms.{r}")
        out = {}
        for fname, spec in table.items():
            where = f"forms.{fname}"
            if not isinstance(spec, dict):
                self.fail("expected a table", where)
            degree = self.get(spec, "degree", int, where)
            on_base = pipeline == "cotangent" and fname == "theta"
            n = cot.k if on_base else dim
            lay = "plain" if on_base else layout
            if not 0 <= degree <= n:
                self.fail(f"degree must lie in 0..{n}", f"{where}.degree")
            entries = []
            for key, text in spec.items():
                if key == "degree":
                    continue
                try:
                    index = tuple(int(i) for i in key.split(",")) if key.strip() not in ("", "0") else ()
                except ValueError:
                    self.fail(f"bad multi-index {key!r}", f"{where}.{key}")
                self.check_expr(text, n, lay, f"{where}.{key}")
                entries.append((index, text))
            try:
                fs = FormSpec(fname, degree, n, lay, tuple(sorted(entries)))
                fs.build()
            except ValueError as err:
                self.fail(str(err), where)
            out[fname] = fs
        return out

    def submanifold(self, t, dim, layout):
        where = "submanifold"
        if not isinstance(t, dict):
            self.fail("expected a table", where)
        lower = self.numbers(t, "lower", where, None, ())
        upper = self.numbers(t, "upper", where, len(lower), ())
        k = len(lower)
        if any(b <= a for a, b in zip(lower, upper)):
            self.fail("parameter box must have positive width", f"{where}.upper")
        param = self.get(t, "parametrization", list, where)
        if len(param) != dim:
            self.fail(f"expected {dim} components", f"{where}.parametrization")
        chart_n = max(k, 1)
        for i, p in enumerate(param):
            self.check_expr(p, chart_n, "chart", f"{where}.parametrization[{i}]")
        normal = self.get(t, "normal_frame", list, where)
        if len(normal) != dim - k or any(not isinstance(v, list) or len(v) != dim for v in normal):
            self.fail(f"expected {dim - k} vectors of {dim} expressions", f"{where}.normal_frame")
        for i, v in enumerate(normal):
            for j, e in enumerate(v):
                self.check_expr(e, chart_n, "chart", f"{where}.normal_frame[{i}][{j}]")
        periodic = self.get(t, "periodic", list, where, [False] * k)
        if len(periodic) != k or not all(isinstance(p, bool) for p in periodic):
            self.fail(f"expected {k} booleans", f"{where}.periodic")
        guess = self.get(t, "guess", list, where, None)
        if guess is not None:
            if len(guess) != k:
                self.fail(f"expected {k} expressions", f"{where}.guess")
            for i, g in enumerate(guess):
                self.check_expr(g, dim, layout, f"{where}.guess[{i}]")
        eps = float(self.get(t, "epsilon", (int, float), where))
        if eps <= 0:
            self.fail("tube radius must be positive", f"{where}.epsilon")
        return SubmanifoldSpec(tuple(param), tuple(tuple(v) for v in normal), lower, upper, tuple(periodic), eps,
                               tuple(guess) if guess is not None else None)

    def patches(self, items, dim):
        out = []
        for a, t in enumerate(items):
            where = f"patches[{a}]"
            if not isinstance(t, dict):
                self.fail("expected a table", where)
            kind = self.get(t, "kind", str, where, "space")
            if kind not in PATCH_KINDS:
                self.fail(f"kind must be one of {', '.join(PATCH_KINDS)}", f"{where}.kind")
            kw = dict(
                name=self.get(t, "name", str, where, f"patch{a}"),
                kind=kind,
                basepoint=self.numbers(t, "basepoint", where, dim),
                anchor=float(self.get(t, "anchor", (int, float), where, 0.0)),
            )
            if kind == "ball":
                kw["radius"] = float(self.get(t, "radius", (int, float), where))
            elif kind == "box":
                kw["lower"] = self.numbers(t, "lower", where, dim)
                kw["upper"] = self.numbers(t, "upper", where, dim)
            elif kind == "wedge":
                if dim != 2:
                    self.fail("wedge patches are planar", f"{where}.kind")
                kw["center_angle"] = float(self.get(t, "center_angle", (int, float), where))
                kw["half_width"] = float(self.get(t, "half_width", (int, float), where))
            p = PatchSpec(**kw)
            try:
                p.build().validate()
            except ValueError as err:
                self.fail(str(err), where)
            out.append(p)
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            self.fail("patch names must be unique", "patches")
        return tuple(out)

    def overlaps(self, items, patches, dim, layout):
        names = [p.name for p in patches]
        out = []
        for a, t in enumerate(items):
            where = f"overlaps[{a}]"
            pair = self.get(t, "patches", list, where)
            if len(pair) != 2 or any(p not in names for p in pair):
                self.fail("expected two patch names", f"{where}.patches")
            side = self.get(t, "side", str, where, None)
            if side is not None:
                self.check_expr(side, dim, layout, f"{where}.side")
            sign = self.get(t, "sign", int, where, 1)
            if sign not in (1, -1):
                self.fail("sign must be 1 or -1", f"{where}.sign")
            out.append(OverlapSpec(tuple(pair), self.get(t, "label", str, where, f"overlap{a}"), side, sign))
        return tuple(out)

    def sampling(self, t, dim, sub):
        where = "sampling"
        base = SamplingSpec()
        kw = {}
        for f in fields(SamplingSpec):
            if f.name not in t:
                continue
            default = getattr(base, f.name)
            if isinstance(default, bool):
                kw[f.name] = self.get(t, f.name, bool, where)
            elif isinstance(default, int):
                kw[f.name] = self.get(t, f.name, int, where)
            elif isinstance(default, float):
                kw[f.name] = float(self.get(t, f.name, (int, float), where))
            else:
                kw[f.name] = self.numbers(t, f.name, where, dim)
        unknown = set(t) - {f.name for f in fields(SamplingSpec)}
        if unknown:
            self.fail("unknown key", f"{where}.{sorted(unknown)[0]}")
        s = SamplingSpec(**kw)
        if s.seeds < 1 or s.q_samples < 1 or s.steps < 1:
            self.fail("seeds, q_samples and steps must be positive", where)
        if not 0 < s.fraction <= 1:
            self.fail("fraction must lie in (0, 1]", f"{where}.fraction")
        if s.steps % 4:
            self.fail("steps must be divisible by 4 so the checkpoints fall on the grid", f"{where}.steps")
        if s.convergence_order and s.steps % 8:
            self.fail("convergence_order needs steps divisible by 8", f"{where}.steps")
        return s

    def tolerances(self, t):
        try:
            return Tolerances().updated(t)
        except (KeyError, ValueError) as err:
            self.fail(str(err).strip('"'), "tolerances")

    def quadrature(self, t):
        base = QuadratureConfig()
        unknown = set(t) - {f.name for f in fields(QuadratureConfig)}
        if unknown:
            self.fail("unknown key", f"quadrature.{sorted(unknown)[0]}")
        kw = {}
        for k, v in t.items():
            cast = type(getattr(base, k))
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0 or (cast is int and v != int(v)):
                self.fail("expected a positive number", f"quadrature.{k}")
            kw[k] = cast(v)
        return QuadratureConfig(**{**asdict(base), **kw})


def scaled(sc: Scenario, tolerance_scale: float | None = None, steps: int | None = None,
           seed: int | None = None) -> Scenario:
    """Copy of a scenario with CLI overrides applied."""
    from dataclasses import replace

    out = replace(sc)
    if tolerance_scale is not None:
        if not (tolerance_scale > 0 and math.isfinite(tolerance_scale)):
            raise ScenarioError("tolerance scale must be a positive number", "--tolerance-scale")
        out.tolerances = sc.tolerances.scaled(tolerance_scale)
    if steps is not None or seed is not None:
        kw = {}
        if steps is not None:
            if steps < 1 or steps % 4:
                raise ScenarioError("step count must be a positive multiple of 4", "--steps")
            if sc.sampling.convergence_order and steps % 8:
                raise ScenarioError("this scenario checks convergence order; steps must be divisible by 8",
                                    "--steps")
            kw["steps"] = steps
        if seed is not None:
            kw["seed"] = seed
        out.sampling = replace(sc.sampling, **kw)
    return out
