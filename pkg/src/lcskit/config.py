"""Tolerance and run-length defaults shared by the pipelines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class Tolerances:
    ad: float = 1e-6  # residuals of exact (AD) derivative paths
    fd: float = 1e-4  # residuals of finite-difference paths
    lcs: float = 1e-8  # dw - theta ^ w and d(theta) on expression-built structures
    nondegeneracy: float = 1e-8  # smallest singular value of the 2-form matrix
    equal_on_q: float = 1e-10  # omega_0 = omega_1 on T_qM along Q
    lagrangian: float = 1e-10  # form on pairs of tangent vectors of Q
    potential: float = 1e-6  # |df - theta|
    homotopy: float = 1e-5  # |d sigma - tau|
    sigma_on_q: float = 1e-9
    moser_invariance: float = 1e-4
    q_fixed: float = 1e-9
    conformal: float = 1e-4  # omega_0 vs e^g phi^* omega_1
    factor_on_q: float = 1e-6
    gluing: float = 1e-6
    transition: float = 1e-8
    normalization: float = 1e-8
    equivalence: float = 1e-9
    convergence_ratio: float = 8.0  # step-halving residual reduction

    def scaled(self, s: float) -> "Tolerances":
        if s <= 0:
            raise ValueError("tolerance scale must be positive")
        return replace(
            self,
            **{f.name: getattr(self, f.name) * s for f in fields(self) if f.name != "convergence_ratio"},
        )

    def updated(self, values: dict) -> "Tolerances":
        known = {f.name for f in fields(self)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown tolerance keys: {sorted(unknown)}")
        for k, v in values.items():
            if not isinstance(v, (int, float)) or v <= 0:
                raise ValueError(f"tolerance {k!r} must be a positive number")
        return replace(self, **{k: float(v) for k, v in values.items()})

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QuadratureConfig:
    potential_nodes: int = 32
    potential_rtol: float = 1e-10
    sigma_nodes: int = 16
    sigma_rtol: float = 1e-9
    max_nodes: int = 1024


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 200
    checkpoints: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
