import numpy as np
import pytest

from mtsmp.builtins import builtin_problem
from mtsmp.forward import (
    AlignmentError,
    BoxViolation,
    ControlProcess,
    SimulationError,
    binomial_tree_batch,
    estimate_cost,
    gateaux_check,
    perturbed_control,
    sample_brownian,
    simulate_state,
    simulate_variational,
)
from mtsmp.problem import ControlBox, ProblemSpec, build_time_grid, validate_problem

from oracles import lq_open_loop_cost


@pytest.fixture(scope="module")
def ex1():
    spec, sol = builtin_problem("example1", 50)
    return validate_problem(spec), sol


def test_brownian_prefix_and_worker_invariance(ex1):
    p, _ = ex1
    a = sample_brownian(p.grid, 1000, 5, workers=1)
    b = sample_brownian(p.grid, 600, 5, workers=3)
    np.testing.assert_array_equal(a.dW[:600], b.dW)
    c = sample_brownian(p.grid, 1000, 6)
    assert not np.array_equal(a.dW, c.dW)


def test_brownian_moments(ex1):
    p, _ = ex1
    wb = sample_brownian(p.grid, 20000, 1)
    assert abs(wb.dW.mean()) < 4 * np.sqrt(p.grid.dt / wb.dW.size)
    assert abs(wb.dW.var() / p.grid.dt - 1) < 0.01


def test_coarsen_sums_increments(ex1):
    p, _ = ex1
    wb = sample_brownian(p.grid, 10, 1)
    grid2 = build_time_grid(1.0, 100, (0.5, 1.0))
    fine = sample_brownian(grid2, 10, 1)
    coarse = fine.coarsen(2)
    np.testing.assert_allclose(coarse.W[:, -1], fine.W[:, -1])
    assert coarse.grid.n_steps == 50 and wb.grid == coarse.grid


def test_state_matches_closed_form(ex1):
    p, sol = ex1
    wb = sample_brownian(p.grid, 500, 2)
    u = ControlProcess.open_loop(p.grid, sol.control_values(p.grid), p.box)
    sb = simulate_state(p, u, wb, workers=2)
    np.testing.assert_allclose(sb.X, sol.state(wb), atol=1e-13)


def test_u_zero_keeps_state_constant(ex1):
    p, _ = ex1
    sb = simulate_state(p, ControlProcess.constant(p.grid, 0.0, p.box), sample_brownian(p.grid, 1, 0))
    assert np.all(sb.X == 1.0)
    assert estimate_cost(p, sb).mean == -1.0


def test_tree_expectation_is_exact():
    spec, _ = builtin_problem("lq_smooth", 4)
    p = validate_problem(spec)
    wb = binomial_tree_batch(p.grid)
    assert wb.n_paths == 16
    u = np.array([0.3, -0.2, 0.1, 0.0])
    est = estimate_cost(p, simulate_state(p, ControlProcess.open_loop(p.grid, u, p.box), wb))
    # the tree reproduces mean and variance of every increment, and the cost is quadratic
    assert abs(est.mean - lq_open_loop_cost(u, 4)) < 1e-12


def test_alignment_errors(ex1):
    p, _ = ex1
    other = build_time_grid(1.0, 40, (0.5, 1.0))
    with pytest.raises(AlignmentError):
        simulate_state(p, ControlProcess.constant(other, 0.0), sample_brownian(p.grid, 2, 0))
    with pytest.raises(AlignmentError):
        simulate_state(p, ControlProcess.constant(p.grid, 0.0), sample_brownian(p.grid, 2, 0, dim=2))


def test_blow_up_reports_path_and_step():
    grid = build_time_grid(1.0, 50, (1.0,))
    spec = ProblemSpec(x0=(1.0,), drift=("x^2*1e6",), diffusion=(("0",),), running_cost="0",
                       terminal_cost="y1", grid=grid, box=ControlBox.interval(0, 0))
    p = validate_problem(spec)
    with pytest.raises(SimulationError) as ei:
        simulate_state(p, ControlProcess.constant(grid, 0.0), sample_brownian(grid, 3, 0))
    assert ei.value.path == 0 and ei.value.step is not None


def test_variational_linear_dynamics_exact():
    # for dynamics linear in (x, u) the variational process is the exact difference quotient
    spec, _ = builtin_problem("lq_smooth", 20)
    p = validate_problem(spec)
    wb = sample_brownian(p.grid, 50, 3)
    base = ControlProcess.constant(p.grid, 0.2, p.box)
    sb = simulate_state(p, base, wb)
    d = ControlProcess.direction(p.grid, np.linspace(-1, 1, 20))
    vb = simulate_variational(p, sb, d)
    sb2 = simulate_state(p, perturbed_control(sb, d, 0.1, p.box), wb)
    np.testing.assert_allclose((sb2.X - sb.X) / 0.1, vb.y, atol=1e-12)


def test_perturbation_leaving_box(ex1):
    p, _ = ex1
    sb = simulate_state(p, ControlProcess.constant(p.grid, 1.0, p.box), sample_brownian(p.grid, 2, 0))
    with pytest.raises(BoxViolation):
        perturbed_control(sb, ControlProcess.direction(p.grid, np.ones(50)), 0.5, p.box)


def test_gateaux_first_order():
    spec, _ = builtin_problem("lq_smooth", 50)
    p = validate_problem(spec)
    wb = sample_brownian(p.grid, 4000, 9)
    rep = gateaux_check(p, ControlProcess.constant(p.grid, 0.0, p.box),
                        ControlProcess.direction(p.grid, np.ones(50)), wb)
    assert abs(rep.order - 1.0) < 0.3
