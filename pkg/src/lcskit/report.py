"""Verification records: one named check with residual statistics and a verdict."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np


@dataclass
class CheckResult:
    name: str
    max_residual: float
    mean_residual: float
    tolerance: float
    passed: bool
    mandatory: bool = True
    detail: dict = field(default_factory=dict)

    @classmethod
    def from_residuals(cls, name: str, residuals, tolerance: float, mandatory: bool = True, **detail) -> "CheckResult":
        r = np.abs(np.asarray(residuals, dtype=float)).reshape(-1)
        if r.size == 0:
            return cls(name, 0.0, 0.0, tolerance, True, mandatory, {"samples": 0, **detail})
        worst = float(np.max(r))
        # np.mean uses pairwise summation, so the value is reproducible
        mean = float(np.mean(r))
        ok = bool(np.all(np.isfinite(r))) and worst <= tolerance
        return cls(name, worst, mean, tolerance, ok, mandatory, {"samples": int(r.size), **detail})

    @classmethod
    def at_least(cls, name: str, values, threshold: float, mandatory: bool = True, **detail) -> "CheckResult":
        """Pass iff every value is at least ``threshold`` (margins, ratios)."""
        v = np.asarray(values, dtype=float).reshape(-1)
        worst = float(np.min(v)) if v.size else float("inf")
        mean = float(np.mean(v)) if v.size else 0.0
        ok = bool(v.size == 0 or worst >= threshold)
        return cls(name, worst, mean, threshold, ok, mandatory, {"samples": int(v.size), "kind": "lower-bound", **detail})

    @classmethod
    def failure(cls, name: str, message: str, mandatory: bool = True, **detail) -> "CheckResult":
        return cls(name, float("inf"), float("inf"), 0.0, False, mandatory, {"error": message, **detail})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_residual": _num(self.max_residual),
            "mean_residual": _num(self.mean_residual),
            "tolerance": _num(self.tolerance),
            "pass": self.passed,
            "mandatory": self.mandatory,
            **({"detail": _clean(self.detail)} if self.detail else {}),
        }


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def extend(self, other: "VerificationReport | Iterable[CheckResult]") -> None:
        self.checks.extend(other.checks if isinstance(other, VerificationReport) else other)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.mandatory)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if c.mandatory and not c.passed]

    def to_list(self) -> list[dict]:
        return [c.to_dict() for c in self.checks]

    def to_json(self) -> str:
        return json.dumps(self.to_list(), sort_keys=True)


def _num(x: float):
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _clean(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj
