import numpy as np
import pytest

from mtsmp.adjoint import solve_adjoint
from mtsmp.builtins import builtin_problem
from mtsmp.forward import ControlProcess, sample_brownian, simulate_state
from mtsmp.mp import (
    check_necessary,
    check_sufficient,
    hamiltonian,
    hamiltonian_grad_u,
    hamiltonian_grad_x,
)
from mtsmp.problem import ControlBox, validate_problem


def _problem(name, n_steps):
    spec, sol = builtin_problem(name, n_steps)
    return validate_problem(spec), sol


def test_hamiltonian_example1_values():
    p, _ = _problem("example1", 10)
    x = np.array([[1.0], [2.0]])
    u = np.array([[0.5], [1.0]])
    P = np.array([[3.0], [4.0]])
    q = np.array([[[2.0]], [[-1.0]]])
    # b = 0, sigma = u, f = 0: H = u q
    np.testing.assert_allclose(hamiltonian(p, 0.1, x, u, P, q), [1.0, -1.0])
    np.testing.assert_allclose(hamiltonian_grad_u(p, 0.1, x, u, P, q)[:, 0], [2.0, -1.0])
    np.testing.assert_allclose(hamiltonian_grad_x(p, 0.1, x, u, P, q)[:, 0], [0.0, 0.0])


def test_beta0_scales_running_cost():
    p, _ = _problem("lq_smooth", 10)
    x, u, P, q = np.array([[1.0]]), np.array([[2.0]]), np.zeros((1, 1)), np.zeros((1, 1, 1))
    f = 0.5 * 4.0 + 0.25 * 1.0
    np.testing.assert_allclose(hamiltonian(p, 0.0, x, u, P, q, beta0=0.5), [-0.5 * f])


def test_hamiltonian_gradients_match_finite_differences():
    p, _ = _problem("lq_smooth", 10)
    rng = np.random.default_rng(3)
    x, u = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    P, q = rng.normal(size=(5, 1)), rng.normal(size=(5, 1, 1))
    h = 1e-6
    for grad, arg in ((hamiltonian_grad_u, "u"), (hamiltonian_grad_x, "x")):
        up = dict(x=x, u=u)
        dn = dict(x=x, u=u)
        up[arg] = up[arg] + h
        dn[arg] = dn[arg] - h
        fd = (hamiltonian(p, 0.3, up["x"], up["u"], P, q) - hamiltonian(p, 0.3, dn["x"], dn["u"], P, q)) / (2 * h)
        np.testing.assert_allclose(grad(p, 0.3, x, u, P, q)[:, 0], fd, rtol=1e-6, atol=1e-6)


@pytest.fixture(scope="module")
def example1_batch():
    p, sol = _problem("example1", 50)
    wb = sample_brownian(p.grid, 20000, 8)
    return p, sol, wb


def test_example1_candidate_passes(example1_batch):
    p, sol, wb = example1_batch
    sb = simulate_state(p, ControlProcess.open_loop(p.grid, sol.control_values(p.grid), p.box), wb)
    rep = check_necessary(p, sb, solve_adjoint(p, sb))
    assert rep.passed
    assert len(rep.intervals) == 2
    # E[H_u (v - 1)] = 2 (v - 1) on the first interval
    assert abs(rep.estimate_at(0, 0.0) + 2.0) < 0.05
    assert abs(rep.estimate_at(0, 0.5) + 1.0) < 0.05
    assert "verdict: pass" in rep.to_text()
    # H = u q with q = 0 after the first checkpoint: the control there is not identified
    assert [iv.flat for iv in rep.intervals] == [False, True]


def test_example1_half_control_fails(example1_batch):
    p, _, wb = example1_batch
    sb = simulate_state(p, ControlProcess.constant(p.grid, 0.5, p.box), wb)
    rep = check_necessary(p, sb, solve_adjoint(p, sb))
    assert not rep.passed
    assert not rep.intervals[0].passed
    assert rep.intervals[0].v_at == pytest.approx(1.0)


def test_single_point_box_is_vacuous():
    spec, _ = builtin_problem("example1", 20)
    spec = spec.__class__(**{**spec.__dict__, "box": ControlBox.interval(0.3, 0.3)})
    p = validate_problem(spec)
    sb = simulate_state(p, ControlProcess.constant(p.grid, 0.3, p.box), sample_brownian(p.grid, 500, 1))
    rep = check_necessary(p, sb, solve_adjoint(p, sb))
    assert rep.passed
    np.testing.assert_array_equal(rep.estimates, 0.0)


def test_rows_cover_grid(example1_batch):
    p, sol, wb = example1_batch
    sb = simulate_state(p, ControlProcess.constant(p.grid, 1.0, p.box), wb)
    rep = check_necessary(p, sb, solve_adjoint(p, sb), v_points=5)
    assert len(list(rep.rows())) == 50 * 5


def test_sufficiency_lq_feedback_certified():
    p, sol = _problem("lq_smooth", 50)
    wb = sample_brownian(p.grid, 40000, 2)
    sb = simulate_state(p, ControlProcess.feedback(p.grid, sol.feedback, p.box), wb)
    rep = check_sufficient(p, sb, solve_adjoint(p, sb), samples=2000)
    assert rep.certified, rep.to_text()


def test_sufficiency_example1_inconclusive(example1_batch):
    p, sol, wb = example1_batch
    sb = simulate_state(p, ControlProcess.open_loop(p.grid, sol.control_values(p.grid), p.box), wb)
    rep = check_sufficient(p, sb, solve_adjoint(p, sb), samples=2000)
    assert not rep.convexity.passed
    assert not rep.certified
    assert "inconclusive" in rep.to_text()
