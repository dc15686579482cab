"""Small expression language for problem coefficients.

Grammar (standard precedence, ``^`` binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' exponent)?
    exponent := INT | '-' INT | '(' '-'? INT ')'
    atom   := NUMBER | NAME | FUNC '(' expr (',' expr)* ')' | '(' expr ')'

Functions: ``abs``, ``min``, ``max`` (two or more arguments) and ``exp``.
Exponents are integer literals only; ``a^b^c`` is rejected.
Evaluation is vectorised: bindings may hold floats or numpy arrays.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

FUNCTIONS = {"abs": 1, "exp": 1, "min": 2, "max": 2}  # minimum arity
NONSMOOTH = frozenset({"abs", "min", "max"})


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos} in {text!r}")
        self.pos = pos


class UndeclaredVariableError(ExprError):
    def __init__(self, name: str, allowed: Iterable[str] = ()):
        allowed = sorted(allowed)
        hint = f" (declared: {', '.join(allowed)})" if allowed else ""
        super().__init__(f"undeclared variable {name!r}{hint}")
        self.name = name


class NonDifferentiableError(ExprError):
    def __init__(self, sub: "Expr", var: str):
        super().__init__(f"cannot differentiate {to_str(sub)!r} with respect to {var!r}")
        self.subexpression = to_str(sub)


class EvaluationError(ExprError):
    pass


# --- AST -------------------------------------------------------------------

class Expr:
    __slots__ = ()

    def __str__(self) -> str:
        return to_str(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Call(Expr):
    func: str
    args: tuple


ZERO = Num(0.0)
ONE = Num(1.0)


# --- printing --------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Num) and (e.value < 0 or (e.value == 0 and np.signbit(e.value))):
        return 3
    if isinstance(e, Pow):
        return 4
    return 5


def _fmt_num(v: float) -> str:
    if v == 0:
        return "0"
    if float(v).is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def to_str(e: Expr) -> str:
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        inner = to_str(e.arg)
        # "-2" would re-parse as a literal, and "--" needs no help
        if _prec(e.arg) < 3 or (isinstance(e.arg, Num) and e.arg.value >= 0):
            inner = f"({inner})"
        return "-" + inner
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left = to_str(e.left)
        if _prec(e.left) < p:
            left = f"({left})"
        right = to_str(e.right)
        if _prec(e.right) <= p:
            right = f"({right})"
        if e.op in "+-":
            return f"{left} {e.op} {right}"
        return f"{left}{e.op}{right}"
    if isinstance(e, Pow):
        base = to_str(e.base)
        if _prec(e.base) < 5:
            base = f"({base})"
        exp = str(e.exponent) if e.exponent >= 0 else f"({e.exponent})"
        return f"{base}^{exp}"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_str(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


# --- parsing ---------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str):
    toks = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", text, bad)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), start))
        pos = m.end()
    toks.append(("end", "", n))
    return toks


class _Parser:
    def __init__(self, text: str, allowed):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0
        self.allowed = allowed

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", self.text, pos)

    def fail(self, msg):
        raise ExprSyntaxError(msg, self.text, self.peek()[2])

    def parse(self) -> Expr:
        if self.peek()[0] == "end":
            self.fail("empty expression")
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", self.text, pos)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            nxt = self.peek()
            if nxt[0] == "num" and self.toks[self.i + 1][1] != "^":
                self.take()
                return Num(-float(nxt[1]))
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            exp = self.exponent()
            if self.peek()[1] == "^":
                self.fail("chained '^' is not allowed; add parentheses")
            return Pow(base, exp)
        return base

    def exponent(self) -> int:
        kind, val, pos = self.take()
        if val == "(":
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            k, v, p = self.take()
            if k != "num" or not re.fullmatch(r"\d+", v):
                raise ExprSyntaxError("exponent must be an integer literal", self.text, p)
            self.expect(")")
            return sign * int(v)
        if val == "-":
            k, v, p = self.take()
            if k != "num" or not re.fullmatch(r"\d+", v):
                raise ExprSyntaxError("exponent must be an integer literal", self.text, p)
            return -int(v)
        if kind != "num" or not re.fullmatch(r"\d+", val):
            raise ExprSyntaxError("exponent must be an integer literal", self.text, pos)
        return int(val)

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", self.text, pos)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[val]
                if val in ("abs", "exp") and len(args) != 1:
                    raise ExprSyntaxError(f"{val} takes one argument", self.text, pos)
                if len(args) < arity:
                    raise ExprSyntaxError(f"{val} needs at least {arity} arguments", self.text, pos)
                return Call(val, tuple(args))
            if val in FUNCTIONS:
                raise ExprSyntaxError(f"function {val!r} used as a variable", self.text, pos)
            if self.allowed is not None and val not in self.allowed:
                raise UndeclaredVariableError(val, self.allowed)
            return Var(val)
        if val == "(":
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", self.text, pos)


def parse_expr(text: str, context: Iterable[str] | None = None) -> Expr:
    """Parse ``text``; every variable must belong to ``context`` (if given)."""
    if not isinstance(text, str):
        text = str(text)
    allowed = None if context is None else frozenset(context)
    return _Parser(text, allowed).parse()


# --- inspection ------------------------------------------------------------

def free_vars(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Neg):
        return free_vars(e.arg)
    if isinstance(e, BinOp):
        return free_vars(e.left) | free_vars(e.right)
    if isinstance(e, Pow):
        return free_vars(e.base)
    if isinstance(e, Call):
        out = frozenset()
        for a in e.args:
            out |= free_vars(a)
        return out
    raise TypeError(e)


def nonsmooth_in(e: Expr, var: str) -> Expr | None:
    """First abs/min/max subexpression that involves ``var``, else None."""
    if isinstance(e, Call):
        if e.func in NONSMOOTH and var in free_vars(e):
            return e
        for a in e.args:
            hit = nonsmooth_in(a, var)
            if hit is not None:
                return hit
        return None
    if isinstance(e, Neg):
        return nonsmooth_in(e.arg, var)
    if isinstance(e, BinOp):
        return nonsmooth_in(e.left, var) or nonsmooth_in(e.right, var)
    if isinstance(e, Pow):
        return nonsmooth_in(e.base, var)
    return None


def is_smooth(e: Expr) -> bool:
    return all(nonsmooth_in(e, v) is None for v in free_vars(e))


def rename(e: Expr, mapping: Mapping[str, str]) -> Expr:
    if isinstance(e, Var):
        return Var(mapping.get(e.name, e.name))
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return Neg(rename(e.arg, mapping))
    if isinstance(e, BinOp):
        return BinOp(e.op, rename(e.left, mapping), rename(e.right, mapping))
    if isinstance(e, Pow):
        return Pow(rename(e.base, mapping), e.exponent)
    if isinstance(e, Call):
        return Call(e.func, tuple(rename(a, mapping) for a in e.args))
    raise TypeError(e)


# --- evaluation ------------------------------------------------------------

def eval_expr(e: Expr, binding: Mapping[str, object]):
    """Evaluate with IEEE doubles; arrays in ``binding`` broadcast."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _eval(e, binding)


def _eval(e, b):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return b[e.name]
        except KeyError:
            raise EvaluationError(f"no value bound for {e.name!r}") from None
    if isinstance(e, Neg):
        return -_eval(e.arg, b)
    if isinstance(e, BinOp):
        lhs = _eval(e.left, b)
        rhs = _eval(e.right, b)
        if e.op == "+":
            return lhs + rhs
        if e.op == "-":
            return lhs - rhs
        if e.op == "*":
            return lhs * rhs
        if np.any(np.asarray(rhs) == 0):
            raise EvaluationError(f"division by zero in {to_str(e)!r}")
        return lhs / rhs
    if isinstance(e, Pow):
        base = _eval(e.base, b)
        if e.exponent < 0:
            if np.any(np.asarray(base) == 0):
                raise EvaluationError(f"division by zero in {to_str(e)!r}")
            return 1.0 / base ** (-e.exponent)
        if e.exponent == 0:
            return np.ones_like(base, dtype=float) if isinstance(base, np.ndarray) else 1.0
        return base ** e.exponent
    if isinstance(e, Call):
        args = [_eval(a, b) for a in e.args]
        if e.func == "abs":
            return np.abs(args[0])
        if e.func == "exp":
            return np.exp(args[0])
        red = np.minimum if e.func == "min" else np.maximum
        out = args[0]
        for a in args[1:]:
            out = red(out, a)
        return out
    raise TypeError(e)


# --- differentiation -------------------------------------------------------
# smart constructors fold constants and drop 0/1 identities, nothing more

def _num(e):
    return isinstance(e, Num)


def add(a, b):
    if _num(a) and _num(b):
        return Num(a.value + b.value)
    if _num(a) and a.value == 0:
        return b
    if _num(b) and b.value == 0:
        return a
    return BinOp("+", a, b)


def sub(a, b):
    if _num(a) and _num(b):
        return Num(a.value - b.value)
    if _num(b) and b.value == 0:
        return a
    if _num(a) and a.value == 0:
        return neg(b)
    return BinOp("-", a, b)


def neg(a):
    if _num(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a, b):
    if _num(a) and _num(b):
        return Num(a.value * b.value)
    if _num(b):
        a, b = b, a
    if _num(a):
        if a.value == 0:
            return ZERO
        if a.value == 1:
            return b
        if isinstance(b, BinOp) and b.op == "*" and _num(b.left):
            return mul(Num(a.value * b.left.value), b.right)
    return BinOp("*", a, b)


def div(a, b):
    if _num(a) and _num(b) and b.value != 0:
        return Num(a.value / b.value)
    if _num(b) and b.value == 1:
        return a
    if _num(a) and a.value == 0:
        return ZERO
    return BinOp("/", a, b)


def power(a, n: int):
    if n == 0:
        return ONE
    if n == 1:
        return a
    if _num(a) and not (a.value == 0 and n < 0):
        return Num(a.value ** n)
    return Pow(a, n)


def diff_expr(e: Expr, var: str) -> Expr:
    """Symbolic derivative of ``e`` with respect to ``var``."""
    if var not in free_vars(e):
        return ZERO
    bad = nonsmooth_in(e, var)
    if bad is not None:
        raise NonDifferentiableError(bad, var)
    return _d(e, var)


def _d(e, v):
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == v else ZERO
    if v not in free_vars(e):
        return ZERO
    if isinstance(e, Neg):
        return neg(_d(e.arg, v))
    if isinstance(e, BinOp):
        da, db = _d(e.left, v), _d(e.right, v)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, e.right), mul(e.left, db))
        return sub(div(da, e.right), div(mul(e.left, db), power(e.right, 2)))
    if isinstance(e, Pow):
        n = e.exponent
        return mul(mul(Num(float(n)), power(e.base, n - 1)), _d(e.base, v))
    if isinstance(e, Call) and e.func == "exp":
        return mul(e, _d(e.args[0], v))
    raise NonDifferentiableError(e, v)
