"""Coefficient expressions in the variables ``z`` (total local density) and ``a`` (age).

Grammar::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := ('+'|'-') factor | base ('^' number)?
    base   := number | 'z' | 'a' | func '(' expr ')' | '(' expr ')'
    func   := exp | log | sin | cos | sqrt

Expressions are compiled into a small AST and evaluated with numpy, so ``z`` and
``a`` may be scalars or broadcastable arrays.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt")
VARIABLES = ("z", "a")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class ExpressionSyntaxError(ValueError):
    """Raised when a coefficient string does not match the grammar."""

    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        pointer = " " * position + "^"
        super().__init__(f"{message} at position {position}:\n  {text}\n  {pointer}")


class UnknownIdentifierError(ExpressionSyntaxError):
    pass


class CoefficientEvaluationError(ArithmeticError):
    """Raised when evaluation leaves the domain of an operation (e.g. x/0)."""


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float

    def eval(self, z, a):
        return self.value

    def __str__(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Var:
    name: str

    def eval(self, z, a):
        return z if self.name == "z" else a

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg:
    arg: "Node"

    def eval(self, z, a):
        return -self.arg.eval(z, a)

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"

    def eval(self, z, a):
        lhs = self.left.eval(z, a)
        rhs = self.right.eval(z, a)
        if self.op == "+":
            return lhs + rhs
        if self.op == "-":
            return lhs - rhs
        if self.op == "*":
            return lhs * rhs
        if np.any(np.asarray(rhs) == 0):
            raise CoefficientEvaluationError(f"division by zero in {self}")
        return lhs / rhs

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: float

    def eval(self, z, a):
        b = np.asarray(self.base.eval(z, a), dtype=float)
        if not float(self.exponent).is_integer() and np.any(b < 0):
            raise CoefficientEvaluationError(f"fractional power of a negative number in {self}")
        if self.exponent < 0 and np.any(b == 0):
            raise CoefficientEvaluationError(f"division by zero in {self}")
        out = b ** self.exponent
        return out if out.ndim else float(out)

    def __str__(self):
        return f"({self.base} ^ {self.exponent!r})"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"

    def eval(self, z, a):
        x = np.asarray(self.arg.eval(z, a), dtype=float)
        if self.func == "log" and np.any(x <= 0):
            raise CoefficientEvaluationError(f"log of a nonpositive number in {self}")
        if self.func == "sqrt" and np.any(x < 0):
            raise CoefficientEvaluationError(f"sqrt of a negative number in {self}")
        out = getattr(np, self.func)(x)
        return out if out.ndim else float(out)

    def __str__(self):
        return f"{self.func}({self.arg})"


Node = Union[Num, Var, Neg, BinOp, Pow, Call]


# ------------------------------------------------------------------------ parser


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = self._tokenize(text)
        self.i = 0

    def _tokenize(self, text):
        tokens = []
        pos = 0
        while pos < len(text):
            if text[pos].isspace():
                pos += 1
                continue
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
            start = m.start(m.lastgroup)
            tokens.append((m.lastgroup, m.group(m.lastgroup), start))
            pos = m.end()
        tokens.append(("end", "", len(text)))
        return tokens

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value:
            found = "end of input" if kind == "end" else repr(text)
            raise ExpressionSyntaxError(f"expected {value!r}, found {found}", self.text, pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {text!r}", self.text, pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        if self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            arg = self.factor()
            return Neg(arg) if op == "-" else arg
        node = self.base()
        if self.peek()[1] == "^":
            self.take()
            sign = 1.0
            if self.peek()[1] in ("+", "-"):
                sign = -1.0 if self.take()[1] == "-" else 1.0
            kind, text, pos = self.take()
            if kind != "num":
                raise ExpressionSyntaxError("exponent must be a number", self.text, pos)
            node = Pow(node, sign * float(text))
        return node

    def base(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in VARIABLES:
                return Var(text)
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            raise UnknownIdentifierError(f"unknown identifier {text!r}", self.text, pos)
        if text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExpressionSyntaxError(f"expected a number, variable or '(', found {found}", self.text, pos)


# ------------------------------------------------------------------ coefficient


def _fd_step(z):
    return math.sqrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(z))


@dataclass(frozen=True)
class CoefficientFn:
    """A coefficient c(z, a) with an optional analytic z-derivative.

    Without an analytic derivative, :meth:`dz` falls back to central finite
    differences and ``uses_fd`` is set.
    """

    text: str
    tree: Node = field(repr=False, compare=False)
    derivative: Optional["CoefficientFn"] = field(default=None, repr=False)

    @property
    def uses_fd(self) -> bool:
        return self.derivative is None

    def __call__(self, z, a):
        z = np.asarray(z, dtype=float)
        a = np.asarray(a, dtype=float)
        shape = np.broadcast_shapes(z.shape, a.shape)
        value = np.broadcast_to(np.asarray(self.tree.eval(z, a), dtype=float), shape)
        return np.array(value) if shape else float(value)

    def dz(self, z, a):
        if self.derivative is not None:
            return self.derivative(z, a)
        z = np.asarray(z, dtype=float)
        step = _fd_step(z)
        return (self(z + step, a) - self(z - step, a)) / (2.0 * step)

    def depends_on(self, name: str) -> bool:
        return _mentions(self.tree, name)

    def pretty(self) -> str:
        return str(self.tree)

    def with_derivative(self, derivative: Union[str, "CoefficientFn"]) -> "CoefficientFn":
        if isinstance(derivative, str):
            derivative = parse_coefficient(derivative)
        return CoefficientFn(self.text, self.tree, derivative)


def _mentions(node, name):
    if isinstance(node, Var):
        return node.name == name
    if isinstance(node, Num):
        return False
    if isinstance(node, BinOp):
        return _mentions(node.left, name) or _mentions(node.right, name)
    if isinstance(node, Pow):
        return _mentions(node.base, name)
    return _mentions(node.arg, name)


def parse_coefficient(text: str, derivative: Optional[str] = None) -> CoefficientFn:
    """Parse a coefficient string into an evaluable :class:`CoefficientFn`.

    >>> parse_coefficient("1 + z/(1+z)")(1.0, 0.3)
    1.5
    """
    if not isinstance(text, str):
        text = repr(float(text))
    tree = _Parser(text).parse()
    fn = CoefficientFn(text, tree)
    if derivative is not None:
        fn = fn.with_derivative(derivative)
    return fn


def constant(value: float) -> CoefficientFn:
    return parse_coefficient(repr(float(value)), derivative="0")
