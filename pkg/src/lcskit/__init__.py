"""Numerical toolkit for locally conformally symplectic (LCS) geometry.

Layers, bottom up: :mod:`lcskit.dual` and :mod:`lcskit.expr` (differentiable
coefficients), :mod:`lcskit.forms` (exterior calculus on coordinate patches),
:mod:`lcskit.lcs` (structures, potentials, conformal factors),
:mod:`lcskit.moser` (homotopy forms and the conformal Moser flow),
:mod:`lcskit.cotangent` (cotangent models and the Lagrangian pipeline), and
:mod:`lcskit.cli` on top.
"""

from lcskit.config import FlowConfig, QuadratureConfig, Tolerances
from lcskit.forms import KFormField, KFormValue, SmoothMap, form_from_spec
from lcskit.lcs import LcsStructure, check_lcs
from lcskit.report import CheckResult, VerificationReport

__all__ = [
    "CheckResult",
    "FlowConfig",
    "KFormField",
    "KFormValue",
    "LcsStructure",
    "QuadratureConfig",
    "SmoothMap",
    "Tolerances",
    "VerificationReport",
    "check_lcs",
    "form_from_spec",
]
__version__ = "0.1.0"
