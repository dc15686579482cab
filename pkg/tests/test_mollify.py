import math

import numpy as np
import pytest

from mtsmp.builtins import builtin_problem
from mtsmp.forward import ControlProcess, sample_brownian, simulate_state
from mtsmp.mollify import (
    MollifierSpec,
    PATH_FUNCTIONALS,
    QuadratureOverflowError,
    cell_oscillation,
    describe,
    discretize_path_functional,
    half_range_rule,
    mollify_error_scan,
    mollify_terminal,
    near_optimal_pipeline,
)
from mtsmp.optimize import OptimizerSpec
from mtsmp.problem import build_time_grid, validate_problem

from oracles import folded_normal_mean, mollified_abs


def _y(*vals):
    return np.array(vals, dtype=float).reshape(len(vals), 1, 1)


def test_spec_validation():
    for bad in (dict(eps=0.0), dict(eps=0.1, quadrature="simpson"), dict(eps=0.1, nodes=0)):
        with pytest.raises(ValueError):
            MollifierSpec(**bad)


def test_half_range_rule_moments():
    z, w = half_range_rule(32)
    assert w.sum() == pytest.approx(0.5, abs=1e-13)
    # E|Z| = sqrt(2/pi), E Z^2 = 1, E|Z|^3 = 2 sqrt(2/pi)
    assert 2 * np.sum(w * z) == pytest.approx(math.sqrt(2 / math.pi), abs=1e-11)
    assert 2 * np.sum(w * z ** 2) == pytest.approx(1.0, abs=1e-11)
    assert 2 * np.sum(w * z ** 3) == pytest.approx(2 * math.sqrt(2 / math.pi), abs=1e-11)


def test_abs_at_zero():
    for eps in (0.2, 0.1, 0.05):
        mt = mollify_terminal("abs(y1)", MollifierSpec(eps))
        assert abs(mt.value(_y(0.0))[0] - folded_normal_mean(eps)) < 1e-6


def test_abs_matches_closed_form_off_the_kink():
    eps = 0.1
    y = np.linspace(-0.5, 0.5, 21)
    mt = mollify_terminal("abs(y1)", MollifierSpec(eps))
    err = np.abs(mt.value(y[:, None, None]) - mollified_abs(y, eps))
    assert err.max() <= 2e-3 * eps


def test_plain_hermite_is_worse_at_the_kink():
    eps = 0.1
    half = mollify_terminal("abs(y1)", MollifierSpec(eps)).value(_y(0.0))[0]
    herm = mollify_terminal("abs(y1)", MollifierSpec(eps, "hermite")).value(_y(0.0))[0]
    exact = folded_normal_mean(eps)
    assert abs(half - exact) < abs(herm - exact)


def test_affine_and_quadratic_exact():
    mt = mollify_terminal("2*y1 - 3*y2 + 1", MollifierSpec(0.3))
    ys = np.array([[[0.5], [-1.0]], [[2.0], [0.25]]])
    np.testing.assert_allclose(mt.value(ys), [2 * 0.5 + 3 + 1, 4 - 0.75 + 1], atol=1e-12)
    sq = mollify_terminal("y1^2", MollifierSpec(0.1))
    assert sq.value(_y(1.0))[0] == pytest.approx(1.01, abs=1e-12)


def test_unused_dimensions_pruned():
    mt = mollify_terminal("abs(y2)", MollifierSpec(0.1), n=3)
    assert mt.dim == 1
    assert "mollified at eps=0.1" in describe(mt)


def test_gradient_matches_finite_differences_on_smooth_terminal():
    mt = mollify_terminal("exp(y1/2) + y1*y2^2", MollifierSpec(0.2))
    ys = np.array([[[0.3], [-0.4]]])
    g = mt.gradient(ys)
    h = 1e-6
    for i in range(2):
        up, dn = ys.copy(), ys.copy()
        up[0, i, 0] += h
        dn[0, i, 0] -= h
        fd = (mt.value(up) - mt.value(dn))[0] / (2 * h)
        assert g[0, i, 0] == pytest.approx(fd, abs=1e-7)


def test_mc_fallback_and_overflow():
    expr = "max(" + ", ".join(f"abs(y{i})" for i in range(1, 9)) + ")"
    mt = mollify_terminal(expr, MollifierSpec(0.1, samples=2048))
    assert mt.mode == "mc"
    big = mollify_terminal("exp(1000*y1)", MollifierSpec(0.1))
    with pytest.raises(QuadratureOverflowError):
        big.value(_y(1.0))


def test_error_scan_slope_and_bound():
    rep = mollify_error_scan("abs(y1)", 1.0)
    assert rep.passed
    assert abs(rep.slope - 1.0) <= 0.1
    assert rep.measured_c == pytest.approx(math.sqrt(2 / math.pi), rel=1e-5)
    assert "log-log slope" in rep.to_text()


def test_error_scan_flags_wrong_constant():
    rep = mollify_error_scan("3*abs(y1)", 1.0)
    assert not rep.passed


def test_path_functionals():
    assert PATH_FUNCTIONALS["running_max_abs"].builder(3) == "max(abs(y1), abs(y2), abs(y3))"
    d = discretize_path_functional("terminal_abs", 4)
    assert d.exact and d.budget == 0.0 and d.expr == "abs(y4)"
    with pytest.raises(ValueError):
        discretize_path_functional("running_max_abs", 4)


def test_cell_oscillation_and_budget_shrink():
    spec, _ = builtin_problem("lq_smooth", 64)
    p = validate_problem(spec)
    sb = simulate_state(p, ControlProcess.constant(p.grid, 0.0, p.box), sample_brownian(p.grid, 4000, 1))
    budgets = [discretize_path_functional("running_max_abs", n, sb).budget for n in (4, 8, 16)]
    assert budgets[0] > budgets[1] > budgets[2] > 0
    assert np.all(cell_oscillation(sb, (1.0,)) >= 0)


def test_near_optimal_pipeline_zero_functional():
    spec, _ = builtin_problem("example1", 20)
    wb = sample_brownian(build_time_grid(1.0, 20, (1.0,)), 500, 2)
    rep = near_optimal_pipeline(spec, "zero", 1, 0.1, wb, optimizer=OptimizerSpec(max_iter=2))
    assert rep.value == 0.0
    assert "near-optimal within" in rep.to_text()
