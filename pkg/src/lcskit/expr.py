"""Coefficient expression language: parse, print, evaluate, differentiate.

Grammar (``^`` binds tightest, then unary minus, then ``* /``, then ``+ -``;
binary operators associate to the left; exponents are integer literals)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := atom ["^" ["-"] INTEGER]
    atom    := NUMBER | VARIABLE | FUNC "(" expr ")" | "(" expr ")"
    FUNC    := "exp" | "log" | "sin" | "cos"

Variables are ``x1..xn``.  On a cotangent layout ``p1..pk`` alias the fiber
coordinates ``x(k+1)..x(2k)``; on a chart layout the variables are ``s1..sn``.
There is no implicit multiplication, so ``2x1`` is a syntax error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from lcskit import dual


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, position: int, text: str):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.position = position
        self.text = text


class ExprEvalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based coordinate index
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Pow, Call]

FUNCTIONS = {"exp": dual.exp, "log": dual.log, "sin": dual.sin, "cos": dual.cos}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int, layout: str):
        self.text = text
        self.n = n
        self.layout = layout
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message, tok=None):
        tok = tok or self.peek()
        raise ExprSyntaxError(message, tok[2], self.text)

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            self.fail(f"expected {value!r}", tok)
        return tok

    def parse(self) -> Expr:
        e = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return e

    def expr(self):
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self):
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            tok = self.take()
            if tok[0] != "num" or not tok[1].isdigit():
                self.fail("exponent must be an integer literal", tok)
            return Pow(base, sign * int(tok[1]))
        return base

    def atom(self):
        tok = self.take()
        kind, val, pos = tok
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            return self._variable(tok)
        if val == "(":
            e = self.expr()
            self.expect(")")
            return e
        self.fail("expected a number, variable, function or '('", tok)

    def _variable(self, tok):
        _, name, pos = tok
        m = re.fullmatch(r"([a-z])(\d+)", name)
        if m is None:
            raise ExprSyntaxError(f"unknown identifier {name!r}", pos, self.text)
        prefix, idx = m.group(1), int(m.group(2))
        if idx < 1:
            raise ExprSyntaxError(f"variable index must start at 1: {name!r}", pos, self.text)
        if self.layout == "chart":
            allowed = {"s": (0, self.n)}
        elif self.layout == "cotangent":
            k = self.n // 2
            allowed = {"x": (0, self.n), "p": (k, k)}
        else:
            allowed = {"x": (0, self.n)}
        if prefix not in allowed:
            raise ExprSyntaxError(f"unknown identifier {name!r}", pos, self.text)
        offset, count = allowed[prefix]
        if idx > count:
            raise ExprSyntaxError(
                f"variable {name!r} out of range for dimension {self.n}", pos, self.text
            )
        return Var(offset + idx - 1, name)


def parse(text: str, n: int, layout: str = "plain") -> Expr:
    """Parse ``text`` as a scalar function of ``n`` coordinates.

    ``layout`` is ``"plain"`` (x1..xn), ``"cotangent"`` (x1..xn plus p-aliases
    for the second half) or ``"chart"`` (s1..sn).
    """
    if layout not in ("plain", "cotangent", "chart"):
        raise ValueError(f"unknown layout {layout!r}")
    if layout == "cotangent" and n % 2:
        raise ValueError("a cotangent layout needs an even dimension")
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text)
    return _Parser(text, n, layout).parse()


# precedence: + - : 1, * / : 2, unary - : 3, ^ : 4, atoms : 5
def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return 1 if e.op in "+-" else 2
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Pow):
        return 4
    return 5


def to_text(e: Expr) -> str:
    """Print with the minimal parentheses that reparse to the same tree."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_text(e.arg)})"
    if isinstance(e, Neg):
        inner = to_text(e.arg)
        return f"-{inner}" if _prec(e.arg) >= 3 else f"-({inner})"
    if isinstance(e, Pow):
        base = to_text(e.base)
        if _prec(e.base) < 5:
            base = f"({base})"
        return f"{base}^{e.exponent}"
    p = _prec(e)
    left = to_text(e.left)
    right = to_text(e.right)
    if _prec(e.left) < p:
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def evaluate(e: Expr, xs: Sequence):
    """Evaluate on generic scalars (floats, arrays or Duals)."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return xs[e.index]
    if isinstance(e, Neg):
        return -evaluate(e.arg, xs)
    if isinstance(e, BinOp):
        a = evaluate(e.left, xs)
        b = evaluate(e.right, xs)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if np.any(np.abs(dual.primal(b)) < 1e-300):
            raise ExprEvalError(f"division by zero in {to_text(e)!r}")
        return a / b
    if isinstance(e, Pow):
        b = evaluate(e.base, xs)
        if e.exponent < 0:
            if np.any(np.abs(dual.primal(b)) < 1e-300):
                raise ExprEvalError(f"zero raised to a negative power in {to_text(e)!r}")
            return 1.0 / _ipow(b, -e.exponent)
        return _ipow(b, e.exponent)
    if isinstance(e, Call):
        a = evaluate(e.arg, xs)
        if e.func == "log" and np.any(dual.primal(a) <= 0):
            raise ExprEvalError(f"log of a non-positive value in {to_text(e)!r}")
        return FUNCTIONS[e.func](a)
    raise TypeError(f"not an expression node: {e!r}")


def _ipow(b, k: int):
    if k == 0:
        return 1.0
    if isinstance(b, dual.Dual):
        return b**k
    return b**k if np.ndim(b) else float(b) ** k


@dataclass(frozen=True)
class DualValue:
    value: float
    partials: np.ndarray


def eval_point(e: Expr, p: Sequence[float]) -> float:
    return float(evaluate(e, [float(c) for c in p]))


def eval_dual(e: Expr, p: Sequence[float]) -> DualValue:
    """Value and exact gradient at a single point."""
    coords = [float(c) for c in p]
    tag, xs = dual.seed(coords)
    y = evaluate(e, xs)
    grad = dual.partials(y, tag, len(coords))
    return DualValue(float(dual.value_at(y, tag)), np.array([float(g) for g in grad]))


def variables(e: Expr) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    return variables(e.left) | variables(e.right)
