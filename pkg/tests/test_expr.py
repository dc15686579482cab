import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtsmp.expr import (
    BinOp,
    EvaluationError,
    ExprSyntaxError,
    Num,
    NonDifferentiableError,
    UndeclaredVariableError,
    Var,
    diff_expr,
    eval_expr,
    free_vars,
    is_smooth,
    parse_expr,
    to_str,
)


@pytest.mark.parametrize("text", [
    "u - (8/3)*t", "x*-2", "x - -2", "-(2)", "--x", "a+(b+c)", "1e-08*x",
    "-2*y1^2 + y2^2", "max(abs(y1), abs(y2), 3)", "exp(-x^2)/2", "(a-b)-c", "a-(b-c)",
    "2^(-2)", "a/(b*c)", "(a/b)/c",
])
def test_round_trip(text):
    e = parse_expr(text)
    assert parse_expr(to_str(e)) == e


def test_precedence_and_associativity():
    e = parse_expr("1 - 2 - 3")
    assert eval_expr(e, {}) == -4
    assert eval_expr(parse_expr("2*3^2"), {}) == 18
    assert eval_expr(parse_expr("-2^2"), {}) == -4
    assert eval_expr(parse_expr("8/4/2"), {}) == 1


def test_syntax_errors_carry_position():
    with pytest.raises(ExprSyntaxError) as ei:
        parse_expr("x + * 2")
    assert ei.value.pos == 4
    for bad in ["x^2^3", "(x", "x)", "abs(x, y)", "min(x)", "foo(x)", "x^1.5", ""]:
        with pytest.raises(ExprSyntaxError):
            parse_expr(bad)


def test_undeclared_variable():
    with pytest.raises(UndeclaredVariableError) as ei:
        parse_expr("x + z", {"x", "t"})
    assert ei.value.name == "z"


def test_eval_vectorised_and_errors():
    e = parse_expr("x / y")
    np.testing.assert_allclose(eval_expr(e, {"x": np.array([1.0, 4.0]), "y": np.array([2.0, 8.0])}),
                               [0.5, 0.5])
    with pytest.raises(EvaluationError):
        eval_expr(e, {"x": np.array([1.0]), "y": np.array([0.0])})
    with pytest.raises(EvaluationError):
        eval_expr(parse_expr("x^(-1)"), {"x": 0.0})
    with pytest.raises(EvaluationError):
        eval_expr(parse_expr("x + 1"), {})


def test_diff_examples():
    assert to_str(diff_expr(parse_expr("-2*y1^2 + y2^2"), "y1")) == "-4*y1"
    assert to_str(diff_expr(parse_expr("u^3 - t*u"), "u")) == "3*u^2 - t"
    assert diff_expr(parse_expr("t^2"), "u") == Num(0.0)


def test_nonsmooth():
    e = parse_expr("abs(x) + y")
    assert not is_smooth(e)
    with pytest.raises(NonDifferentiableError):
        diff_expr(e, "x")
    assert diff_expr(e, "y") == Num(1.0)
    assert free_vars(e) == {"x", "y"}


# --- property tests --------------------------------------------------------

names = st.sampled_from(["x", "y", "t"])
leaves = st.one_of(names.map(Var), st.floats(-3, 3, allow_nan=False).map(lambda v: Num(round(v, 3))))


def _tree(children):
    return st.one_of(
        st.tuples(st.sampled_from("+-*"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(children, st.integers(1, 3)).map(lambda a: parse_expr(f"({to_str(a[0])})^{a[1]}")),
        children.map(lambda c: parse_expr(f"exp(({to_str(c)})/10)")),
    )


smooth_exprs = st.recursive(leaves, _tree, max_leaves=6)


@settings(max_examples=150, deadline=None, derandomize=True)
@given(smooth_exprs)
def test_print_parse_round_trip(e):
    again = parse_expr(to_str(e))
    b = {"x": 0.7, "y": -0.3, "t": 0.2}
    assert math.isclose(float(eval_expr(again, b)), float(eval_expr(e, b)), rel_tol=1e-12, abs_tol=1e-12)


@settings(max_examples=150, deadline=None, derandomize=True)
@given(smooth_exprs, names)
def test_derivative_matches_central_difference(e, v):
    b = {"x": 0.7, "y": -0.3, "t": 0.2}
    h = 1e-5
    up, dn = dict(b), dict(b)
    up[v] += h
    dn[v] -= h
    fd = (float(eval_expr(e, up)) - float(eval_expr(e, dn))) / (2 * h)
    d = float(eval_expr(diff_expr(e, v), b))
    assert abs(d - fd) <= 1e-6 * max(1.0, abs(fd))
