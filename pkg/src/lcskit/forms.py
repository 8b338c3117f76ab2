"""Pointwise multilinear algebra and exterior calculus on coordinate patches.

Conventions, fixed once:

* a k-form is stored by its coefficients on increasing multi-indices in
  lexicographic order, ``w = sum_I w_I dx^I``;
* evaluation on vectors uses the determinant convention with no ``1/k!``:
  ``dx^I(v_1..v_k) = det[v_j^{i}]_{i in I}``;
* contraction happens in the first slot, and the skew matrix of a 2-form is
  ``A_ij = w(e_i, e_j)``.

Fields act on *coordinate lists*: a list of ``n`` generic scalars (floats,
arrays with one entry per sample point, or Duals).  Differentiation is
forward-mode AD; callable ("black-box") fields are differentiated by central
differences through :func:`lcskit.dual.lift`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Callable, Sequence

import numpy as np

from lcskit import dual, expr


# ---------------------------------------------------------------- index tables


@lru_cache(maxsize=None)
def multi_indices(n: int, k: int) -> tuple[tuple[int, ...], ...]:
    if k < 0 or k > n:
        return ()
    return tuple(itertools.combinations(range(n), k))


@lru_cache(maxsize=None)
def index_of(n: int, k: int) -> dict:
    return {I: i for i, I in enumerate(multi_indices(n, k))}


def _perm_sign(seq: Sequence[int]) -> int:
    seq = list(seq)
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
            elif seq[i] == seq[j]:
                return 0
    return sign


@lru_cache(maxsize=None)
def _wedge_table(n: int, ka: int, kb: int):
    table = []
    pos = index_of(n, ka + kb)
    for ia, I in enumerate(multi_indices(n, ka)):
        for ib, J in enumerate(multi_indices(n, kb)):
            s = _perm_sign(I + J)
            if s:
                table.append((pos[tuple(sorted(I + J))], ia, ib, s))
    return tuple(table)


@lru_cache(maxsize=None)
def _interior_table(n: int, k: int):
    # (i_X w)_J = sum_{i not in J} (-1)^{pos of i in K} X^i w_K, K = sorted(i, J)
    table = []
    pos = index_of(n, k)
    for ij, J in enumerate(multi_indices(n, k - 1)):
        for i in range(n):
            if i in J:
                continue
            K = tuple(sorted((i,) + J))
            table.append((ij, i, pos[K], -1 if K.index(i) % 2 else 1))
    return tuple(table)


@lru_cache(maxsize=None)
def _d_table(n: int, k: int):
    # d(w_I dx^I) = sum_i d_i w_I dx^i ^ dx^I
    table = []
    pos = index_of(n, k + 1)
    for iI, I in enumerate(multi_indices(n, k)):
        for i in range(n):
            if i in I:
                continue
            K = tuple(sorted((i,) + I))
            table.append((pos[K], iI, i, -1 if K.index(i) % 2 else 1))
    return tuple(table)


@lru_cache(maxsize=None)
def _perms(k: int):
    return tuple((p, _perm_sign(p)) for p in itertools.permutations(range(k)))


def _minor(J: list[list], rows: Sequence[int], cols: Sequence[int]):
    k = len(rows)
    if k == 0:
        return 1.0
    total = 0.0
    for p, s in _perms(k):
        term = s
        for a in range(k):
            term = term * J[rows[a]][cols[p[a]]]
        total = total + term
    return total


# ---------------------------------------------------------- coefficient kernels


def wedge_coeffs(n: int, ka: int, kb: int, a: Sequence, b: Sequence) -> list:
    out = [0.0] * comb(n, ka + kb) if ka + kb <= n else []
    for ik, ia, ib, s in _wedge_table(n, ka, kb):
        term = a[ia] * b[ib]
        out[ik] = out[ik] + (term if s > 0 else -term)
    return out


def interior_coeffs(n: int, k: int, X: Sequence, w: Sequence) -> list:
    out = [0.0] * comb(n, k - 1)
    for ij, i, iK, s in _interior_table(n, k):
        term = X[i] * w[iK]
        out[ij] = out[ij] + (term if s > 0 else -term)
    return out


def pullback_coeffs(n_in: int, n_out: int, k: int, J: list[list], w: Sequence) -> list:
    """Coefficients of ``F^* w`` given ``J = DF`` (rows: outputs, cols: inputs)."""
    out = []
    for I in multi_indices(n_in, k):
        acc = 0.0
        for iK, K in enumerate(multi_indices(n_out, k)):
            c = w[iK]
            if isinstance(c, float) and c == 0.0:
                continue
            acc = acc + c * _minor(J, K, I)
        out.append(acc)
    return out


def skew_matrix(n: int, w: Sequence) -> list[list]:
    """``A_ij = w(e_i, e_j)`` for a 2-form's coefficient list."""
    A = [[0.0] * n for _ in range(n)]
    for c, (i, j) in zip(w, multi_indices(n, 2)):
        A[i][j] = c
        A[j][i] = -c
    return A


def from_skew(A: np.ndarray) -> np.ndarray:
    n = A.shape[-1]
    return np.stack([A[..., i, j] for i, j in multi_indices(n, 2)], axis=-1)


# --------------------------------------------------------------- pointwise values


@dataclass(frozen=True)
class KFormValue:
    n: int
    k: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if self.k > self.n:
            c = np.zeros(0)
        elif c.shape != (comb(self.n, self.k),):
            raise ValueError(
                f"a {self.k}-form in dimension {self.n} has {comb(self.n, self.k)} coefficients"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def basis(cls, n: int, index: Sequence[int]) -> "KFormValue":
        """``dx^{i1} ^ ... ^ dx^{ik}`` from 1-based increasing indices."""
        I = tuple(i - 1 for i in index)
        c = np.zeros(comb(n, len(I)))
        c[index_of(n, len(I))[I]] = 1.0
        return cls(n, len(I), c)

    @classmethod
    def zero(cls, n: int, k: int) -> "KFormValue":
        return cls(n, k, np.zeros(comb(n, k) if k <= n else 0))

    def __add__(self, other: "KFormValue") -> "KFormValue":
        _check_same(self, other)
        return KFormValue(self.n, self.k, self.coeffs + other.coeffs)

    def __sub__(self, other: "KFormValue") -> "KFormValue":
        _check_same(self, other)
        return KFormValue(self.n, self.k, self.coeffs - other.coeffs)

    def __mul__(self, s: float) -> "KFormValue":
        return KFormValue(self.n, self.k, self.coeffs * float(s))

    __rmul__ = __mul__

    def __neg__(self) -> "KFormValue":
        return KFormValue(self.n, self.k, -self.coeffs)

    def __call__(self, *vectors) -> float:
        if len(vectors) != self.k:
            raise ValueError(f"a {self.k}-form takes {self.k} vectors")
        if self.k == 0:
            return float(self.coeffs[0])
        V = np.column_stack([np.asarray(v, dtype=float) for v in vectors])
        return float(
            sum(c * np.linalg.det(V[list(I), :]) for c, I in zip(self.coeffs, multi_indices(self.n, self.k)))
        )

    def matrix(self) -> np.ndarray:
        if self.k != 2:
            raise ValueError("only 2-forms have a skew matrix")
        return np.array(skew_matrix(self.n, list(self.coeffs)), dtype=float)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0


def _check_same(a, b):
    if a.n != b.n or a.k != b.k:
        raise ValueError(f"form mismatch: ({a.n},{a.k}) vs ({b.n},{b.k})")


def wedge(a: KFormValue, b: KFormValue) -> KFormValue:
    if a.n != b.n:
        raise ValueError(f"dimension mismatch: {a.n} vs {b.n}")
    if a.k + b.k > a.n:
        return KFormValue.zero(a.n, a.k + b.k)
    c = wedge_coeffs(a.n, a.k, b.k, list(a.coeffs), list(b.coeffs))
    return KFormValue(a.n, a.k + b.k, np.array(c, dtype=float))


def interior_product(X: Sequence[float], w: KFormValue) -> KFormValue:
    X = np.asarray(X, dtype=float)
    if w.k == 0:
        raise ValueError("cannot contract a 0-form")
    if X.shape != (w.n,):
        raise ValueError(f"vector of length {X.shape} does not match dimension {w.n}")
    c = interior_coeffs(w.n, w.k, list(X), list(w.coeffs))
    return KFormValue(w.n, w.k - 1, np.array(c, dtype=float))


@dataclass(frozen=True)
class Nondegeneracy:
    nondegenerate: bool
    condition: float
    determinant: float
    margin: float  # smallest singular value


def nondegeneracy(w: KFormValue, threshold: float = 1e-12) -> Nondegeneracy:
    if w.k != 2:
        raise ValueError("nondegeneracy is defined for 2-forms")
    A = w.matrix()
    sv = np.linalg.svd(A, compute_uv=False)
    det = float(np.linalg.det(A))
    smin = float(sv[-1])
    cond = float(sv[0] / smin) if smin > 0 else float("inf")
    ok = w.n % 2 == 0 and abs(det) > threshold
    return Nondegeneracy(ok, cond, det, smin)


def margins(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Smallest singular value of the skew matrix, per row of a (N, C) array."""
    A = np.zeros(coeffs.shape[:-1] + (n, n))
    for c, (i, j) in enumerate(multi_indices(n, 2)):
        A[..., i, j] = coeffs[..., c]
        A[..., j, i] = -coeffs[..., c]
    return np.linalg.svd(A, compute_uv=False)[..., -1]


# -------------------------------------------------------------------- fields


def _as_points(points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    return P[None, :] if P.ndim == 1 else P


def _columns(P: np.ndarray) -> list:
    return [P[:, i] for i in range(P.shape[1])]


def _stack(values: Sequence, N: int) -> np.ndarray:
    if not values:
        return np.zeros((N, 0))
    return np.stack([dual.to_array(v, (N,)) for v in values], axis=-1)


class KFormField:
    """A degree-k form field on an open subset of n-space.

    ``fn`` maps a coordinate list to a coefficient list.  ``exact`` records
    whether derivatives are exact (expression-built) or central differences.
    """

    def __init__(self, n: int, k: int, fn: Callable[[list], list], exact: bool = True, label: str = ""):
        if n < 1 or k < 0:
            raise ValueError("need n >= 1 and k >= 0")
        self.n = n
        self.k = k
        self.fn = fn
        self.exact = exact
        self.label = label

    @property
    def size(self) -> int:
        return comb(self.n, self.k) if self.k <= self.n else 0

    def __repr__(self) -> str:
        return f"KFormField(n={self.n}, k={self.k}{', ' + self.label if self.label else ''})"

    def coeffs(self, xs: Sequence) -> list:
        if self.k > self.n:
            return []
        return self.fn(list(xs))

    def at(self, p) -> KFormValue:
        p = np.asarray(p, dtype=float)
        c = self.coeffs([float(x) for x in p])
        return KFormValue(self.n, self.k, np.array([float(dual.primal(x)) for x in c]))

    def values(self, points) -> np.ndarray:
        """Coefficients at many points, shape ``(N, C(n, k))``."""
        P = _as_points(points)
        return _stack(self.coeffs(_columns(P)), P.shape[0])

    # arithmetic -------------------------------------------------------------
    def _binary(self, other, op, label):
        _check_same(self, other)
        return KFormField(
            self.n,
            self.k,
            lambda xs: [op(a, b) for a, b in zip(self.coeffs(xs), other.coeffs(xs))],
            self.exact and other.exact,
            label,
        )

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b, f"({self.label}+{other.label})")

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b, f"({self.label}-{other.label})")

    def __neg__(self):
        return KFormField(self.n, self.k, lambda xs: [-c for c in self.coeffs(xs)], self.exact)

    def __mul__(self, s):
        if isinstance(s, KFormField):
            return scale(s, self) if s.k == 0 else scale(self, s)
        s = float(s)
        return KFormField(self.n, self.k, lambda xs: [s * c for c in self.coeffs(xs)], self.exact)

    __rmul__ = __mul__

    def wedge(self, other: "KFormField") -> "KFormField":
        return wedge_fields(self, other)

    @classmethod
    def zero(cls, n: int, k: int) -> "KFormField":
        size = comb(n, k) if k <= n else 0
        return cls(n, k, lambda xs: [0.0] * size, True, "0")

    @classmethod
    def constant(cls, value: KFormValue) -> "KFormField":
        c = [float(x) for x in value.coeffs]
        return cls(value.n, value.k, lambda xs: list(c), True)

    @classmethod
    def from_callable(cls, n: int, k: int, func: Callable[[np.ndarray], np.ndarray], label: str = "") -> "KFormField":
        """Black-box field from ``func(points (N, n)) -> coefficients (N, C)``."""
        size = comb(n, k)

        def raw(cols):
            shape = np.broadcast_shapes(*[np.shape(c) for c in cols])
            P = np.stack([np.broadcast_to(np.asarray(c, float), shape) for c in cols], axis=-1)
            out = np.asarray(func(P.reshape(-1, n)), dtype=float).reshape(shape + (size,))
            return [out[..., i] for i in range(size)]

        return cls(n, k, lambda xs: dual.lift(raw, xs, dual.fd_step), exact=False, label=label)


def form_from_spec(entries, n: int, k: int, layout: str = "plain") -> KFormField:
    """Build a field from ``[(multi_index, expression), ...]`` with 1-based indices.

    Expressions may be :class:`~lcskit.expr.Expr` trees or text.  Omitted
    multi-indices are zero.
    """
    if k > n:
        raise ValueError(f"degree {k} exceeds dimension {n}")
    pos = index_of(n, k)
    slots: dict[int, expr.Expr] = {}
    labels = []
    for index, e in entries:
        index = (index,) if isinstance(index, int) else tuple(index)
        if len(index) != k:
            raise ValueError(f"multi-index {index} does not have length {k}")
        if any(b <= a for a, b in zip(index, index[1:])):
            raise ValueError(f"multi-index {index} must be strictly increasing")
        if any(i < 1 or i > n for i in index):
            raise ValueError(f"multi-index {index} out of range for dimension {n}")
        I = tuple(i - 1 for i in index)
        if pos[I] in slots:
            raise ValueError(f"multi-index {index} repeated")
        tree = expr.parse(e, n, layout) if isinstance(e, str) else e
        slots[pos[I]] = tree
        labels.append(f"{expr.to_text(tree)}*d{index}")
    size = comb(n, k)
    items = sorted(slots.items())

    def fn(xs):
        out = [0.0] * size
        for i, tree in items:
            out[i] = expr.evaluate(tree, xs)
        return out

    return KFormField(n, k, fn, True, " + ".join(labels) or "0")


def function_field(text_or_expr, n: int, layout: str = "plain") -> KFormField:
    return form_from_spec([((), text_or_expr)], n, 0, layout)


class VectorField:
    def __init__(self, n: int, fn: Callable[[list], list], label: str = ""):
        self.n = n
        self.fn = fn
        self.label = label

    def components(self, xs: Sequence) -> list:
        return self.fn(list(xs))

    def at(self, p) -> np.ndarray:
        return np.array([float(dual.primal(c)) for c in self.components([float(x) for x in p])])

    @classmethod
    def from_exprs(cls, texts: Sequence, n: int, layout: str = "plain") -> "VectorField":
        trees = [expr.parse(t, n, layout) if isinstance(t, str) else t for t in texts]
        if len(trees) != n:
            raise ValueError(f"a vector field in dimension {n} needs {n} components")
        return cls(n, lambda xs: [expr.evaluate(t, xs) for t in trees])

    @classmethod
    def constant(cls, v) -> "VectorField":
        v = [float(c) for c in v]
        return cls(len(v), lambda xs: list(v))


class SmoothMap:
    """A smooth map between coordinate spaces with an AD Jacobian."""

    def __init__(self, n_in: int, n_out: int, fn: Callable[[list], list], label: str = ""):
        self.n_in = n_in
        self.n_out = n_out
        self.fn = fn
        self.label = label

    def apply(self, xs: Sequence) -> list:
        return self.fn(list(xs))

    def __call__(self, p) -> np.ndarray:
        P = _as_points(p)
        out = _stack(self.apply(_columns(P)), P.shape[0])
        return out[0] if np.ndim(p) == 1 else out

    def jacobian_lists(self, xs: Sequence) -> tuple[list, list[list]]:
        return dual.jacobian(self.fn, xs)

    def jacobian(self, p) -> np.ndarray:
        """Jacobian ``DF`` at a point (n_out, n_in) or points (N, n_out, n_in)."""
        P = _as_points(p)
        N = P.shape[0]
        _, J = self.jacobian_lists(_columns(P))
        out = np.stack([_stack(row, N) for row in J], axis=1)
        return out[0] if np.ndim(p) == 1 else out

    def fd_jacobian(self, p, h: float = 1e-6) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        cols = []
        for j in range(self.n_in):
            e = np.zeros(self.n_in)
            e[j] = h * max(1.0, abs(p[j]))
            cols.append((self(p + e) - self(p - e)) / (2 * e[j]))
        return np.column_stack(cols)

    def check_jacobian(self, points, tol: float = 1e-6) -> float:
        """Largest deviation between the AD Jacobian and a finite-difference probe."""
        worst = 0.0
        for p in _as_points(points):
            J = self.jacobian(p)
            F = self.fd_jacobian(p)
            worst = max(worst, float(np.max(np.abs(J - F)) / max(1.0, np.max(np.abs(J)))))
        if worst > tol:
            raise ValueError(f"Jacobian disagrees with finite differences by {worst:.3g}")
        return worst

    def compose(self, inner: "SmoothMap") -> "SmoothMap":
        """``self o inner``."""
        if inner.n_out != self.n_in:
            raise ValueError("dimension mismatch in composition")
        return SmoothMap(inner.n_in, self.n_out, lambda xs: self.fn(inner.fn(xs)))

    @classmethod
    def identity(cls, n: int) -> "SmoothMap":
        return cls(n, n, lambda xs: list(xs), "id")

    @classmethod
    def linear(cls, M) -> "SmoothMap":
        M = np.asarray(M, dtype=float)
        rows = [[float(a) for a in r] for r in M]

        def fn(xs):
            out = []
            for r in rows:
                acc = 0.0
                for a, x in zip(r, xs):
                    if a != 0.0:
                        acc = acc + a * x
                out.append(acc)
            return out

        return cls(M.shape[1], M.shape[0], fn, "linear")

    @classmethod
    def from_exprs(cls, texts: Sequence, n_in: int, layout: str = "plain") -> "SmoothMap":
        trees = [expr.parse(t, n_in, layout) if isinstance(t, str) else t for t in texts]
        return cls(n_in, len(trees), lambda xs: [expr.evaluate(t, xs) for t in trees])


# -------------------------------------------------------------- field operators


def wedge_fields(a: KFormField, b: KFormField) -> KFormField:
    if a.n != b.n:
        raise ValueError(f"dimension mismatch: {a.n} vs {b.n}")
    n, k = a.n, a.k + b.k
    if k > n:
        return KFormField.zero(n, k)
    return KFormField(
        n, k, lambda xs: wedge_coeffs(n, a.k, b.k, a.coeffs(xs), b.coeffs(xs)), a.exact and b.exact
    )


def scale(f: KFormField, w: KFormField) -> KFormField:
    """Pointwise product of a function (0-form) with a form."""
    if f.k != 0:
        raise ValueError("scale needs a 0-form factor")
    return KFormField(
        w.n, w.k, lambda xs: _times(f.coeffs(xs)[0], w.coeffs(xs)), f.exact and w.exact
    )


def _times(s, cs):
    return [s * c for c in cs]


def interior_field(X: VectorField, w: KFormField) -> KFormField:
    if w.k == 0:
        raise ValueError("cannot contract a 0-form")
    return KFormField(w.n, w.k - 1, lambda xs: interior_coeffs(w.n, w.k, X.components(xs), w.coeffs(xs)), w.exact)


def exterior_derivative(w: KFormField) -> KFormField:
    n, k = w.n, w.k
    if k >= n:
        return KFormField.zero(n, k + 1)
    size = comb(n, k + 1)
    table = _d_table(n, k)

    def fn(xs):
        tag, dxs = dual.seed(list(xs))
        grads = [dual.partials(c, tag, n) for c in w.coeffs(dxs)]
        out = [0.0] * size
        for iK, iI, i, s in table:
            g = grads[iI][i]
            out[iK] = out[iK] + (g if s > 0 else -g)
        return out

    return KFormField(n, k + 1, fn, w.exact, f"d({w.label})")


def pullback(F: SmoothMap, w: KFormField) -> KFormField:
    if F.n_out != w.n:
        raise ValueError(f"map lands in dimension {F.n_out}, form lives in {w.n}")
    n_in, k = F.n_in, w.k
    if k > n_in:
        return KFormField.zero(n_in, k)

    def fn(xs):
        if k == 0:
            return w.coeffs(F.apply(xs))
        ys, J = F.jacobian_lists(xs)
        return pullback_coeffs(n_in, F.n_out, k, J, w.coeffs(ys))

    return KFormField(n_in, k, fn, w.exact, f"{F.label}^*({w.label})")


def lie_derivative(X: VectorField, w: KFormField) -> KFormField:
    """Cartan's formula ``L_X w = i_X dw + d(i_X w)``."""
    first = interior_field(X, exterior_derivative(w))
    if w.k == 0:
        return first
    return first + exterior_derivative(interior_field(X, w))


def rk4_flow_map(X: VectorField, time: float, steps: int = 8) -> SmoothMap:
    """Time-``time`` flow of an autonomous field as a differentiable map."""
    h = time / steps

    def fn(xs):
        y = list(xs)
        for _ in range(steps):
            k1 = X.components(y)
            k2 = X.components([a + 0.5 * h * b for a, b in zip(y, k1)])
            k3 = X.components([a + 0.5 * h * b for a, b in zip(y, k2)])
            k4 = X.components([a + h * b for a, b in zip(y, k3)])
            y = [a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
        return y

    return SmoothMap(X.n, X.n, fn, f"flow({time})")


def lie_derivative_fd(X: VectorField, w: KFormField, h: float = 1e-3, steps: int = 8) -> KFormField:
    """Flow-difference approximation ``(phi_h^* w - phi_{-h}^* w) / 2h``."""
    fwd = pullback(rk4_flow_map(X, h, steps), w)
    bwd = pullback(rk4_flow_map(X, -h, steps), w)
    return KFormField(w.n, w.k, lambda xs: [(a - b) / (2 * h) for a, b in zip(fwd.coeffs(xs), bwd.coeffs(xs))], w.exact)


def max_coeff(field: KFormField, points) -> float:
    vals = field.values(points)
    return float(np.max(np.abs(vals))) if vals.size else 0.0
