"""Exhaustive-search oracle on binomial trees, and random tiny test instances."""
from __future__ import annotations

import itertools
import math

import numpy as np

from .expr import eval_expr
from .forward import ControlProcess
from .problem import ControlBox, ProblemSpec, build_time_grid, validate_problem

MAX_ORACLE_STEPS = 3
MAX_ORACLE_LEVELS = 7


class OracleSizeError(ValueError):
    pass


def tree_expectation(problem, controls) -> float:
    """Exact cost of a deterministic control on the +-sqrt(dt) tree.

    Plain scalar recursion, independent of the vectorised simulator.
    """
    problem = validate_problem(problem)
    grid = problem.grid
    dt, N = grid.dt, grid.n_steps
    h = math.sqrt(dt)
    nodes = list(grid.checkpoint_nodes)
    moves = list(itertools.product((-h, h), repeat=problem.d))
    weight = 1.0 / len(moves)
    controls = np.asarray(controls, dtype=float).reshape(N, problem.k)

    def bind(t, x, u):
        b = {"t": t}
        b.update({name: x[i] for i, name in enumerate(problem.xnames)})
        b.update({name: float(u[j]) for j, name in enumerate(problem.unames)})
        return b

    def terminal(ys):
        b = {}
        for i, row in enumerate(problem.ynames):
            for c, name in enumerate(row):
                b[name] = ys[i][c]
        return float(eval_expr(problem.terminal.expr, b))

    def rec(k, x, ys):
        if k in nodes:
            ys = ys + [list(x)]
        if k == N:
            return terminal(ys)
        t = k * dt
        b = bind(t, x, controls[k])
        run = float(eval_expr(problem.running, b)) * dt
        drift = [float(eval_expr(e, b)) for e in problem.drift]
        sig = [[float(eval_expr(e, b)) for e in row] for row in problem.diffusion]
        total = 0.0
        for dw in moves:
            nxt = [x[i] + drift[i] * dt + sum(sig[i][j] * dw[j] for j in range(problem.d))
                   for i in range(problem.m)]
            total += weight * rec(k + 1, nxt, ys)
        return run + total

    return rec(0, [float(v) for v in problem.x0], [])


def brute_force_oracle(problem, control_grid: int | list = 3):
    """Minimise the tree-exact cost over every control sequence on the grid.

    ``control_grid`` is a point count (uniform on the box) or explicit per-component
    level lists. Ties go to the lexicographically first sequence (smallest indices).
    """
    problem = validate_problem(problem)
    N = problem.grid.n_steps
    if N > MAX_ORACLE_STEPS:
        raise OracleSizeError(f"{N} steps exceed the oracle cap of {MAX_ORACLE_STEPS}")
    levels = problem.box.grid(control_grid) if isinstance(control_grid, int) else \
        [np.asarray(g, dtype=float) for g in control_grid]
    if any(len(g) > MAX_ORACLE_LEVELS for g in levels):
        raise OracleSizeError(f"control grid exceeds {MAX_ORACLE_LEVELS} levels per component")
    choices = list(itertools.product(*levels))
    best, best_u = math.inf, None
    for seq in itertools.product(range(len(choices)), repeat=N):
        u = np.array([choices[i] for i in seq])
        val = tree_expectation(problem, u)
        if val < best:
            best, best_u = val, u
    return ControlProcess.open_loop(problem.grid, best_u, problem.box, label="oracle"), best


def random_tiny_instance(rng: np.random.Generator):
    """A scalar problem whose per-step optimum is a box vertex.

    The running cost 50 c(t) u dominates the checkpoint-cost sensitivity, so the
    grid optimum sits at a box vertex and a full conditional-gradient step lands
    on it exactly. Returns (spec, levels).
    """
    N = int(rng.integers(2, MAX_ORACLE_STEPS + 1))
    levels = int(rng.integers(3, MAX_ORACLE_LEVELS + 1))
    if N == 2:
        cps = (0.5, 1.0)
    else:
        cps = [(1 / 3, 1.0), (2 / 3, 1.0), (1 / 3, 2 / 3, 1.0)][int(rng.integers(0, 3))]
    grid = build_time_grid(1.0, N, cps)
    b0, b1, s0, s1 = (round(float(v), 6) for v in rng.uniform(-1, 1, 4))
    lo = round(float(rng.uniform(-1, 0)), 6)
    hi = round(float(rng.uniform(0.2, 1)), 6)
    c0 = round(float(rng.choice([-1, 1]) * rng.uniform(0.5, 1.0)), 6)
    terms = []
    for i in range(len(cps)):
        a = round(float(rng.uniform(-1, 1)), 6)
        kappa = round(float(rng.uniform(0, 0.5)), 6)
        terms.append(f"{a}*y{i + 1} + {kappa}*y{i + 1}^2")
    spec = ProblemSpec(
        x0=(round(float(rng.uniform(-0.5, 0.5)), 6),),
        drift=(f"{b0} + {b1}*u",),
        diffusion=((f"{s0} + {s1}*u",),),
        running_cost=f"50*{c0}*(1 - 2.5*t)*u",
        terminal_cost=" + ".join(terms),
        grid=grid,
        box=ControlBox.interval(lo, hi),
        name="tiny",
    )
    return spec, levels
