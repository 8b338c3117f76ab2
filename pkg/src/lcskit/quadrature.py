"""Gauss-Legendre rules on [0, 1] applied to generic (possibly dual) integrands."""

from __future__ import annotations

from functools import lru_cache
from typing import Callable

import numpy as np

from lcskit import dual


class QuadratureError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def gauss_legendre01(m: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


def batch_shape(xs) -> tuple:
    return np.broadcast_shapes(*[np.shape(dual.primal(x)) for x in xs]) if xs else ()


def integrate(integrand: Callable, batch: tuple, m: int):
    """``sum_j w_j integrand(t_j)`` with the node axis prepended to ``batch``.

    ``integrand`` receives the node array shaped ``(m, 1, ..., 1)`` and returns
    a generic scalar broadcastable to ``(m,) + batch``.
    """
    t, w = gauss_legendre01(m)
    tt = t.reshape((m,) + (1,) * len(batch))
    full = (m,) + tuple(batch)
    vals = integrand(tt)
    return [dual.map_linear(v, lambda a: np.tensordot(w, np.broadcast_to(a, full), axes=1)) for v in vals]


def calibrate(evaluate: Callable[[int], np.ndarray], start: int, rtol: float, max_nodes: int) -> tuple[int, float]:
    """Double the node count until the relative change is at most ``rtol``.

    ``evaluate(m)`` returns primal values computed with ``m`` nodes.  The
    smaller rule of the first agreeing pair is accepted, since the change
    bounds its error.  Returns the accepted node count and that change.
    """
    m = start
    prev = np.asarray(evaluate(m), dtype=float)
    while True:
        if 2 * m > max_nodes:
            raise QuadratureError(f"quadrature did not converge to {rtol:g} with {max_nodes} nodes")
        cur = np.asarray(evaluate(2 * m), dtype=float)
        scale = max(float(np.max(np.abs(cur))) if cur.size else 0.0, 1e-300)
        change = float(np.max(np.abs(cur - prev))) / scale if cur.size else 0.0
        if change <= rtol:
            return m, change
        m, prev = 2 * m, cur
