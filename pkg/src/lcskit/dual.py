"""Tagged, nestable forward-mode dual numbers over numpy arrays.

A "scalar" throughout the package is a Python float, a numpy array (one entry
per sample point) or a :class:`Dual` whose value and partials are themselves
scalars.  Each differentiation pass draws a fresh tag; the Dual with the
larger tag is the outer one, which keeps nested derivatives free of
perturbation confusion.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_tags = itertools.count(1)


def new_tag() -> int:
    return next(_tags)


class Dual:
    __slots__ = ("tag", "val", "der")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tag: int, val, der: Sequence):
        self.tag = tag
        self.val = val
        self.der = list(der)

    def __repr__(self) -> str:
        return f"Dual(tag={self.tag}, val={self.val!r}, der={self.der!r})"

    def __add__(self, other):
        t, av, ad, bv, bd = _split(self, other)
        return Dual(t, av + bv, _zip_add(ad, bd))

    __radd__ = __add__

    def __sub__(self, other):
        t, av, ad, bv, bd = _split(self, other)
        return Dual(t, av - bv, _zip_sub(ad, bd))

    def __rsub__(self, other):
        t, av, ad, bv, bd = _split(other, self)
        return Dual(t, av - bv, _zip_sub(ad, bd))

    def __neg__(self):
        return Dual(self.tag, -self.val, [-d for d in self.der])

    def __pos__(self):
        return self

    def __mul__(self, other):
        t, av, ad, bv, bd = _split(self, other)
        if ad is None:
            return Dual(t, av * bv, [av * d for d in bd])
        if bd is None:
            return Dual(t, av * bv, [d * bv for d in ad])
        return Dual(t, av * bv, [av * db + da * bv for da, db in zip(ad, bd)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        t, av, ad, bv, bd = _split(self, other)
        return _div(t, av, ad, bv, bd)

    def __rtruediv__(self, other):
        t, av, ad, bv, bd = _split(other, self)
        return _div(t, av, ad, bv, bd)

    def __pow__(self, k):
        if not isinstance(k, (int, np.integer)):
            raise TypeError("Dual powers take integer exponents only")
        k = int(k)
        if k == 0:
            return 1.0
        if k == 1:
            return self
        inner = self.val ** (k - 1)
        factor = k * inner
        return Dual(self.tag, inner * self.val, [factor * d for d in self.der])


def _split(a, b):
    ta = a.tag if isinstance(a, Dual) else 0
    tb = b.tag if isinstance(b, Dual) else 0
    t = max(ta, tb)
    if ta == t:
        av, ad = a.val, a.der
    else:
        av, ad = a, None
    if tb == t:
        bv, bd = b.val, b.der
    else:
        bv, bd = b, None
    return t, av, ad, bv, bd


def _zip_add(ad, bd):
    if ad is None:
        return list(bd)
    if bd is None:
        return list(ad)
    return [x + y for x, y in zip(ad, bd)]


def _zip_sub(ad, bd):
    if ad is None:
        return [-y for y in bd]
    if bd is None:
        return list(ad)
    return [x - y for x, y in zip(ad, bd)]


def _div(t, av, ad, bv, bd):
    q = av / bv
    if bd is None:
        return Dual(t, q, [d / bv for d in ad])
    if ad is None:
        return Dual(t, q, [-(q * d) / bv for d in bd])
    return Dual(t, q, [(da - q * db) / bv for da, db in zip(ad, bd)])


def primal(x):
    """Strip every dual layer, leaving the float/array value."""
    while isinstance(x, Dual):
        x = x.val
    return x


def depth(x) -> int:
    d = 0
    while isinstance(x, Dual):
        x, d = x.val, d + 1
    return d


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def _unary(fn: Callable, dfn: Callable):
    def op(x):
        if isinstance(x, Dual):
            v = op(x.val)
            slope = dfn(x.val, v)
            return Dual(x.tag, v, [slope * d for d in x.der])
        return fn(x)

    return op


exp = _unary(np.exp, lambda x, v: v)
log = _unary(np.log, lambda x, v: 1.0 / x)
sin = _unary(np.sin, lambda x, v: cos(x))
cos = _unary(np.cos, lambda x, v: -sin(x))
sqrt = _unary(np.sqrt, lambda x, v: 0.5 / v)


def map_linear(x, fn: Callable):
    """Apply a linear numpy operation (sum, reshape, broadcast, ...) to every layer."""
    if isinstance(x, Dual):
        return Dual(x.tag, map_linear(x.val, fn), [map_linear(d, fn) for d in x.der])
    return fn(x)


def seed(xs: Sequence, tag: int | None = None) -> tuple[int, list]:
    """Wrap coordinates as Duals with unit partials under a fresh tag."""
    tag = new_tag() if tag is None else tag
    n = len(xs)
    out = []
    for i, x in enumerate(xs):
        der = [0.0] * n
        der[i] = 1.0
        out.append(Dual(tag, x, der))
    return tag, out


def partials(y, tag: int, n: int) -> list:
    """Partials of ``y`` with respect to the coordinates seeded under ``tag``."""
    if isinstance(y, Dual) and y.tag == tag:
        return list(y.der)
    if isinstance(y, Dual) and y.tag > tag:
        # outer layer belongs to a later pass; differentiate each component
        inner = [partials(y.val, tag, n)] + [partials(d, tag, n) for d in y.der]
        return [Dual(y.tag, inner[0][j], [row[j] for row in inner[1:]]) for j in range(n)]
    return [0.0] * n


def value_at(y, tag: int):
    """The value of ``y`` with the ``tag`` layer removed."""
    if isinstance(y, Dual) and y.tag == tag:
        return y.val
    if isinstance(y, Dual) and y.tag > tag:
        return Dual(y.tag, value_at(y.val, tag), [value_at(d, tag) for d in y.der])
    return y


def jacobian(fn: Callable[[list], list], xs: Sequence) -> tuple[list, list[list]]:
    """Values and Jacobian rows ``J[i][j] = d out_i / d x_j`` of a generic map."""
    tag, dxs = seed(list(xs))
    out = fn(dxs)
    n = len(xs)
    vals = [value_at(y, tag) for y in out]
    jac = [partials(y, tag, n) for y in out]
    return vals, jac


def outer_tag(items) -> int:
    t = 0
    for x in items:
        if isinstance(x, Dual) and x.tag > t:
            t = x.tag
    return t


def strip(items, tag: int):
    """Values and partial lists of the ``tag`` layer (missing layers give zeros)."""
    vals, ders = [], []
    for x in items:
        if isinstance(x, Dual) and x.tag == tag:
            vals.append(x.val)
            ders.append(x.der)
        else:
            vals.append(x)
            ders.append(None)
    return vals, ders


def lift(fn: Callable[[list], list], xs: Sequence, step: Callable[[list], list]) -> list:
    """Evaluate a float-only map on generic inputs using a Jacobian from ``step``.

    ``fn`` maps a list of float arrays to a list of float arrays.  When the
    inputs carry Dual layers, the outermost layer is propagated by the chain
    rule with a central-difference Jacobian; inner layers recurse.
    """
    xs = list(xs)
    t = outer_tag(xs)
    if t == 0:
        return fn(xs)
    vals, ders = strip(xs, t)
    f0 = lift(fn, vals, step)
    m = next(len(d) for d in ders if d is not None)
    n = len(xs)
    cols = []
    hs = step(vals)
    for j in range(n):
        if ders[j] is None:
            cols.append(None)
            continue
        plus = list(vals)
        minus = list(vals)
        plus[j] = vals[j] + hs[j]
        minus[j] = vals[j] - hs[j]
        fp = lift(fn, plus, step)
        fm = lift(fn, minus, step)
        cols.append([(a - b) / (2.0 * hs[j]) for a, b in zip(fp, fm)])
    out = []
    for i in range(len(f0)):
        der = []
        for k in range(m):
            acc = 0.0
            for j in range(n):
                if cols[j] is not None:
                    acc = acc + cols[j][i] * ders[j][k]
            der.append(acc)
        out.append(Dual(t, f0[i], der))
    return out


def tags(items) -> set:
    """Every Dual tag occurring anywhere in ``items``."""
    out = set()
    stack = list(items)
    while stack:
        x = stack.pop()
        if isinstance(x, Dual):
            out.add(x.tag)
            stack.append(x.val)
            stack.extend(x.der)
    return out


def jet_lift(fn: Callable[[list], list], xs: Sequence) -> list:
    """Evaluate ``fn`` on generic inputs through its Taylor polynomial at the primal point.

    With ``d`` distinct tags on the inputs, every product of ``d + 1``
    increments vanishes, so the degree-``d`` polynomial is exact.  The partials
    are taken with ``d`` nested layers over ``len(xs)`` directions, which is
    much cheaper than pushing many-directional duals through ``fn`` when the
    inputs are few.
    """
    xs = list(xs)
    d = len(tags(xs))
    if d == 0:
        return fn(xs)
    k = len(xs)
    x0 = [primal(x) for x in xs]
    u = list(x0)
    layers = []
    for _ in range(d):
        t, u = seed(u)
        layers.append(t)
    y = fn(u)
    delta = [x - a for x, a in zip(xs, x0)]
    out = [0.0] * len(y)
    for r in range(d + 1):
        for seq in itertools.combinations_with_replacement(range(k), r):
            coef = 1.0
            for j in set(seq):
                coef /= _factorial(seq.count(j))
            mono = coef
            for j in seq:
                mono = mono * delta[j]
            for i, yi in enumerate(y):
                out[i] = out[i] + _extract(yi, layers, seq, k) * mono
    return out


def _factorial(m: int) -> int:
    f = 1
    for i in range(2, m + 1):
        f *= i
    return f


def _extract(y, layers, seq, k):
    """Mixed partial along ``seq`` using the outermost layers; inner layers take values."""
    for pos, t in enumerate(reversed(layers)):
        if pos < len(seq):
            y = partials(y, t, k)[seq[pos]]
        else:
            y = value_at(y, t)
    return y


def fd_step(vals: list) -> list:
    """Central-difference step ``1e-5 * max(1, |x|)`` per coordinate."""
    return [1e-5 * np.maximum(1.0, np.abs(primal(v))) for v in vals]


def solve(A: list[list], b: list) -> list:
    """Solve ``A y = b`` for generic scalars; pivoting happens on the primal values.

    The outermost Dual layer is handled by differentiating the solve:
    ``y' = A^{-1} (b' - A' y)``.  The primal matrix is inverted once and
    reused at every layer.
    """
    n = len(b)
    flat = [a for row in A for a in row] + list(b)
    shape = np.broadcast_shapes(*[np.shape(primal(x)) for x in flat])
    M = np.empty(shape + (n, n))
    for i in range(n):
        for j in range(n):
            M[..., i, j] = primal(A[i][j])
    if outer_tag(flat) == 0:
        rhs = np.empty(shape + (n,))
        for i in range(n):
            rhs[..., i] = b[i]
        y = np.linalg.solve(M, rhs[..., None])[..., 0]
        return [y[..., i] for i in range(n)]
    return _solve_with(A, b, np.linalg.inv(M), shape)


def _solve_with(A, b, Minv, shape):
    n = len(b)
    flat = [a for row in A for a in row] + list(b)
    t = outer_tag(flat)
    if t == 0:
        local = np.broadcast_shapes(shape, *[np.shape(x) for x in b])
        rhs = np.empty(local + (n,))
        for i in range(n):
            rhs[..., i] = b[i]
        y = np.einsum("...ij,...j->...i", Minv, rhs)
        return [y[..., i] for i in range(n)]
    Av = [[value_at(a, t) for a in row] for row in A]
    bv = [value_at(x, t) for x in b]
    y0 = _solve_with(Av, bv, Minv, shape)
    m = next(len(x.der) for x in flat if isinstance(x, Dual) and x.tag == t)
    cols = []
    for k in range(m):
        rhs = []
        for i in range(n):
            r = _der(b[i], t, k)
            for j in range(n):
                da = _der(A[i][j], t, k)
                if da is not None:
                    r = (0.0 if r is None else r) - da * y0[j]
            rhs.append(0.0 if r is None else r)
        cols.append(_solve_with(Av, rhs, Minv, shape))
    return [Dual(t, y0[i], [cols[k][i] for k in range(m)]) for i in range(n)]


def _der(x, t, k):
    if isinstance(x, Dual) and x.tag == t:
        return x.der[k]
    return None


def to_array(x, shape=()) -> np.ndarray:
    """Primal value broadcast to ``shape``; rejects remaining Dual layers."""
    if isinstance(x, Dual):
        raise TypeError("cannot convert a Dual to a plain array")
    return np.broadcast_to(np.asarray(x, dtype=float), shape).copy()
