"""Built-in problems and their closed-form solutions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problem import (
    Constraint,
    ControlBox,
    ProblemError,
    ProblemSpec,
    build_time_grid,
)

BUILTINS = ("example1", "example2_transformed", "linear_terminal", "lq_smooth")

# linear_terminal data
LT_WEIGHTS = (1.5, -2.0, 0.5)
LT_CHECKPOINTS = (0.25, 0.5, 1.0)

# lq_smooth data: dX = (a x + u) dt + s dW, f = u^2/2 + kappa x^2/2,
# Psi = g1 (y1 - 1)^2 / 2 + g2 y2^2 / 2
LQ = dict(a=-0.5, s=0.4, kappa=0.5, g1=1.0, g2=2.0, x0=1.0, bound=5.0)


class AnalyticSolution:
    """Closed-form control, state and adjoint on a given grid / Brownian batch."""

    name = ""

    def control_values(self, grid) -> np.ndarray:
        raise NotImplementedError

    def state(self, wb) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, wb, beta=None):
        """Return (p at nodes, q per step, {checkpoint index: p right limit})."""
        raise NotImplementedError


class Example1Solution(AnalyticSolution):
    name = "example1"
    value = -1.5

    def control_values(self, grid):
        half = grid.checkpoint_nodes[0]
        u = np.zeros((grid.n_steps, 1))
        u[:half] = 1.0
        return u

    def state(self, wb):
        half = wb.grid.checkpoint_nodes[0]
        W = wb.W[:, :, 0]
        X = 1.0 + W.copy()
        X[:, half:] = (1.0 + W[:, half])[:, None]
        return X[:, :, None]

    def adjoint(self, wb, beta=None):
        half = wb.grid.checkpoint_nodes[0]
        N = wb.grid.n_steps
        W = wb.W[:, :, 0]
        p = np.empty_like(W)
        p[:, : half + 1] = 2.0 + 2.0 * W[:, : half + 1]
        p[:, half + 1:] = (-2.0 - 2.0 * W[:, half])[:, None]
        q = np.zeros((W.shape[0], N))
        q[:, :half] = 2.0
        right = {0: -2.0 - 2.0 * W[:, half], 1: np.zeros(W.shape[0])}
        return p[:, :, None], q[:, :, None, None], {k: v[:, None] for k, v in right.items()}


class Example2Solution(AnalyticSolution):
    """Transformed production-planning problem; adjoint depends on the multipliers."""

    name = "example2_transformed"
    value = 0.0
    default_beta = (1.0, 0.0, 0.0)

    def control_values(self, grid):
        half = grid.checkpoint_nodes[0]
        s = grid.times[:-1]
        u = np.full((grid.n_steps, 1), 2.0)
        u[:half, 0] = 8.0 * s[:half] / 3.0
        return u

    def state(self, wb):
        grid = wb.grid
        s = grid.times[:-1]
        u = self.control_values(grid)[:, 0]
        incr = (u - 8.0 * s / 3.0) * grid.dt - s * wb.dW[:, :, 0]
        X = np.zeros((wb.n_paths, grid.n_steps + 1))
        X[:, 1:] = np.cumsum(incr, axis=1)
        return X[:, :, None]

    def adjoint(self, wb, beta=None):
        b0, b1, b2 = self.default_beta if beta is None else beta
        grid = wb.grid
        half = grid.checkpoint_nodes[0]
        n = wb.n_paths
        p = np.empty((n, grid.n_steps + 1))
        p[:, : half + 1] = -(2 * b0 + b1 + b2)
        p[:, half + 1:] = -(b0 + b2)
        q = np.zeros((n, grid.n_steps, 1, 1))
        right = {0: np.full((n, 1), -(b0 + b2)), 1: np.zeros((n, 1))}
        return p[:, :, None], q, right


class LinearTerminalSolution(AnalyticSolution):
    name = "linear_terminal"

    def control_values(self, grid):
        return np.zeros((grid.n_steps, 1))

    def adjoint(self, wb, beta=None):
        grid = wb.grid
        n = wb.n_paths
        p = np.zeros((n, grid.n_steps + 1, 1))
        right = {}
        prev = 0
        for i, node in enumerate(grid.checkpoint_nodes):
            val = -sum(LT_WEIGHTS[i:])
            p[:, prev: node + 1, 0] = val
            right[i] = np.full((n, 1), -sum(LT_WEIGHTS[i + 1:]))
            prev = node + 1
        q = np.zeros((n, grid.n_steps, 1, 1))
        return p, q, right


class LQSolution(AnalyticSolution):
    """Exact dynamic programme of the Euler-discretised lq_smooth problem.

    The value function is quadratic, V_k(x) = P_k x^2/2 + Q_k x + R_k, and the
    optimal adapted control is the linear feedback returned by ``feedback``.
    The best deterministic (open-loop) control is the same feedback evaluated
    along the mean path, because the noise is additive and independent of u.
    """

    name = "lq_smooth"

    def __init__(self, grid):
        self.grid = grid
        c = LQ
        dt = grid.dt
        N = grid.n_steps
        A = 1.0 + c["a"] * dt
        P = np.zeros(N + 1)
        Q = np.zeros(N + 1)
        R = np.zeros(N + 1)
        k1 = grid.checkpoint_nodes[0]
        P[N] = c["g2"]
        for k in range(N - 1, -1, -1):
            Pn, Qn, Rn = P[k + 1], Q[k + 1], R[k + 1]
            g = 1.0 + Pn * dt
            P[k] = c["kappa"] * dt + A * A * Pn / g
            Q[k] = A * Qn / g
            R[k] = Rn + 0.5 * Pn * c["s"] ** 2 * dt - 0.5 * dt * Qn * Qn / g
            if k == k1:
                P[k] += c["g1"]
                Q[k] -= c["g1"]
                R[k] += 0.5 * c["g1"]
        self.A, self.P, self.Q, self.R = A, P, Q, R
        x0 = c["x0"]
        self.value = 0.5 * P[0] * x0 * x0 + Q[0] * x0 + R[0]

    def gains(self, k):
        g = 1.0 + self.P[k + 1] * self.grid.dt
        return -self.P[k + 1] * self.A / g, -self.Q[k + 1] / g

    def feedback(self, k, t, x):
        slope, icpt = self.gains(k)
        return slope * x + icpt

    def control_values(self, grid=None):
        """Best deterministic control."""
        grid = grid or self.grid
        if grid != self.grid:
            return LQSolution(grid).control_values()
        mean = LQ["x0"]
        u = np.empty((grid.n_steps, 1))
        for k in range(grid.n_steps):
            u[k, 0] = self.feedback(k, None, mean)
            mean = self.A * mean + grid.dt * u[k, 0]
        return u


def _example1(grid):
    return ProblemSpec(
        x0=(1.0,), drift=("0",), diffusion=(("u",),), running_cost="0",
        terminal_cost="-2*y1^2 + y2^2", grid=grid, box=ControlBox.interval(0.0, 1.0),
        name="example1",
    )


def _example2(grid):
    return ProblemSpec(
        x0=(0.0,), drift=("u - (8/3)*t",), diffusion=(("-t",),), running_cost="0",
        terminal_cost="y1 + y2", grid=grid, box=ControlBox.interval(0.0, 2.0),
        constraints=(Constraint("y1", lower=0.0, name="first"),
                     Constraint("y2", lower=0.0, name="second")),
        name="example2_transformed",
    )


def _linear_terminal(grid):
    a1, a2, a3 = LT_WEIGHTS
    return ProblemSpec(
        x0=(0.0,), drift=("0.3 + 0.5*u",), diffusion=(("0.4 + 0.2*u",),), running_cost="0",
        terminal_cost=f"{a1}*y1 + {a2}*y2 + {a3}*y3", grid=grid,
        box=ControlBox.interval(-1.0, 1.0), name="linear_terminal",
    )


def _lq(grid):
    c = LQ
    return ProblemSpec(
        x0=(c["x0"],), drift=(f"{c['a']}*x + u",), diffusion=((f"{c['s']}",),),
        running_cost=f"0.5*u^2 + {c['kappa'] / 2}*x^2",
        terminal_cost=f"{c['g1'] / 2}*(y1 - 1)^2 + {c['g2'] / 2}*y2^2",
        grid=grid, box=ControlBox.interval(-c["bound"], c["bound"]), name="lq_smooth",
    )


def builtin_problem(name: str, n_steps: int | None = None):
    """Return ``(ProblemSpec, AnalyticSolution or None)`` for a built-in name."""
    if name == "example1":
        grid = build_time_grid(1.0, n_steps or 200, (0.5, 1.0))
        return _example1(grid), Example1Solution()
    if name == "example2_transformed":
        grid = build_time_grid(1.0, n_steps or 200, (0.5, 1.0))
        return _example2(grid), Example2Solution()
    if name == "linear_terminal":
        grid = build_time_grid(1.0, n_steps or 200, LT_CHECKPOINTS)
        return _linear_terminal(grid), LinearTerminalSolution()
    if name == "lq_smooth":
        grid = build_time_grid(1.0, n_steps or 200, (0.5, 1.0))
        return _lq(grid), LQSolution(grid)
    raise ProblemError(f"unknown built-in problem {name!r}; choose from {', '.join(BUILTINS)}")
