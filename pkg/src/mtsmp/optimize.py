"""Conditional-gradient optimisation of deterministic controls."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .adjoint import RegressionSpec, solve_adjoint
from .forward import BrownianBatch, ControlProcess, mean_stderr, pathwise_cost, simulate_state
from .mp import flat_steps, grad_u_paths
from .problem import ValidatedProblem

STEP_RULES = ("diminishing", "armijo", "linesearch", "lbfgs")


@dataclass(frozen=True)
class OptimizerSpec:
    max_iter: int = 50
    step_rule: str = "armijo"
    grid_points: int = 11
    tol: float = 1e-6
    armijo_c: float = 1e-4
    min_step: float = 1e-6
    flat_atol: float = 1e-6  # |change in H| below which a step counts as flat
    levels: tuple | None = None  # explicit per-component v-grid, overrides grid_points

    def __post_init__(self):
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step rule must be one of {STEP_RULES}")
        if self.grid_points < 2:
            raise ValueError("grid resolution must be at least 2")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if self.levels is not None and any(len(lv) < 1 for lv in self.levels):
            raise ValueError("each control component needs at least one level")

    def vgrid(self, box):
        if self.levels is None:
            return box.grid(self.grid_points)
        if len(self.levels) != box.dim:
            raise ValueError(f"{len(self.levels)} level lists for {box.dim} control components")
        out = [np.asarray(sorted(lv), dtype=float) for lv in self.levels]
        if any(np.any(g < box.lo[c] - 1e-12) or np.any(g > box.hi[c] + 1e-12)
               for c, g in enumerate(out)):
            raise ValueError("control levels must lie in the box")
        return out


@dataclass
class OptimizeTrace:
    rows: list = field(default_factory=list)  # (iteration, value, stderr, gap, step)
    converged: bool = False
    reason: str = ""
    flat_steps: np.ndarray | None = None

    @property
    def values(self):
        return [r[1] for r in self.rows]

    @property
    def final_gap(self):
        return self.rows[-1][3] if self.rows else float("nan")

    def flat_intervals(self, grid):
        """(t_start, t_end) runs of steps where E[H_u] is statistically zero."""
        if self.flat_steps is None:
            return []
        out, start = [], None
        for k, f in enumerate(list(self.flat_steps) + [False]):
            if f and start is None:
                start = k
            elif not f and start is not None:
                out.append((grid.times[start], grid.times[k]))
                start = None
        return out


@dataclass
class Evaluation:
    value: float
    stderr: float
    payload: object = None


def frank_wolfe_vertex(g: np.ndarray, u: np.ndarray, vgrid: list):
    """Per step and component, v maximising g (v - u) on the grid (first index on ties)."""
    v = np.empty_like(u)
    for c, pts in enumerate(vgrid):
        scores = g[:, c, None] * (pts[None, :] - u[:, c, None])
        v[:, c] = pts[np.argmax(scores, axis=1)]
    return v


def conditional_gradient(evaluate: Callable, ascent: Callable, u0: np.ndarray, box, dt: float,
                         spec: OptimizerSpec, log: Callable | None = None):
    """Minimise evaluate(u).value over the box.

    ``ascent(u, evaluation)`` returns (g, g_stderr) with g[k, j] = -(1/dt) dF/du[k, j],
    i.e. the expected Hamiltonian gradient. The gap sum_k dt g (v* - u) bounds the
    first-order decrease available and is the stopping statistic.
    """
    vgrid = spec.vgrid(box)
    u = box.clamp(u0)
    cur = evaluate(u)
    trace = OptimizeTrace()
    for it in range(spec.max_iter + 1):
        g, gse = ascent(u, cur)
        v = frank_wolfe_vertex(g, u, vgrid)
        D = v - u
        gap = float(dt * np.sum(g * D))
        trace.rows.append((it, cur.value, cur.stderr, gap, 0.0))
        if log:
            log(it, cur.value, gap)
        if gap <= spec.tol:
            trace.converged, trace.reason = True, f"gap {gap:.3g} <= tolerance {spec.tol:g}"
            return u, cur, trace
        if it == spec.max_iter:
            trace.reason = "iteration cap reached"
            return u, cur, trace
        if spec.step_rule == "diminishing":
            rho = 2.0 / (it + 2.0)
            new = evaluate(u + rho * D)
        elif spec.step_rule == "armijo":
            rho = 1.0
            while True:
                new = evaluate(u + rho * D)
                if new.value <= cur.value - spec.armijo_c * rho * gap:
                    break
                rho *= 0.5
                if rho < spec.min_step:
                    new = None
                    break
        else:
            cache = {}

            def phi(r):
                if r not in cache:
                    cache[r] = evaluate(u + r * D)
                return cache[r].value

            res = minimize_scalar(phi, bounds=(0.0, 1.0), method="bounded",
                                  options={"xatol": 1e-8})
            rho = float(res.x) if phi(float(res.x)) <= phi(1.0) else 1.0
            new = cache[rho]
            if new.value >= cur.value:
                new = None
        if new is None:
            trace.reason = "no decrease along the conditional-gradient direction"
            return u, cur, trace
        u = box.clamp(u + rho * D)
        trace.rows[-1] = (it, cur.value, cur.stderr, gap, rho)
        cur = new
    return u, cur, trace


def bounded_quasi_newton(evaluate: Callable, ascent: Callable, u0: np.ndarray, box, dt: float,
                         spec: OptimizerSpec, log: Callable | None = None):
    """L-BFGS-B on the same objective and adjoint gradient; the final
    conditional-gradient gap is reported as the stopping statistic."""
    shape = u0.shape
    cache = {}

    def ev_at(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            u = x.reshape(shape)
            e = evaluate(u)
            g, _ = ascent(u, e)
            cache[key] = (e, g)
        return cache[key]

    def fun(x):
        e, g = ev_at(x)
        return e.value, (-dt * g).ravel()

    bounds = [(lo, hi) for _ in range(shape[0]) for lo, hi in zip(box.lo, box.hi)]
    x0 = box.clamp(u0).ravel()
    trace = OptimizeTrace()
    first, _ = ev_at(x0)
    trace.rows.append((0, first.value, first.stderr, float("nan"), float("nan")))
    it = [0]

    def cb(x):
        it[0] += 1
        e, g = ev_at(x)
        trace.rows.append((it[0], e.value, e.stderr, float("nan"), float("nan")))
        if log:
            log(it[0], e.value, float("nan"))

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds, callback=cb,
                   options={"maxiter": max(spec.max_iter, 1), "ftol": 1e-15, "gtol": 1e-12,
                            "maxfun": 20 * max(spec.max_iter, 1)})
    u = box.clamp(res.x.reshape(shape))
    cur = evaluate(u)
    g, gse = ascent(u, cur)
    v = frank_wolfe_vertex(g, u, spec.vgrid(box))
    gap = float(dt * np.sum(g * (v - u)))
    if trace.rows[-1][1] == cur.value:
        trace.rows[-1] = (trace.rows[-1][0], cur.value, cur.stderr, gap, float("nan"))
    else:
        trace.rows.append((res.nit, cur.value, cur.stderr, gap, float("nan")))
    trace.converged = gap <= spec.tol
    trace.reason = f"L-BFGS-B: {res.message}; gap {gap:.3g}"
    return u, cur, trace


def run_optimizer(evaluate, ascent, u0, box, dt, spec: OptimizerSpec, log=None):
    if spec.step_rule == "lbfgs":
        return bounded_quasi_newton(evaluate, ascent, u0, box, dt, spec, log)
    return conditional_gradient(evaluate, ascent, u0, box, dt, spec, log)


def optimize_control(problem: ValidatedProblem, init: ControlProcess, spec: OptimizerSpec,
                     wb: BrownianBatch, rs: RegressionSpec | None = None, terminal=None):
    """Conditional gradient on a fixed Brownian batch (common random numbers).

    Returns (final control, trace, final cost estimate).
    """
    if not init.deterministic:
        raise ValueError("the optimiser works on deterministic (open-loop) controls")
    rs = rs or RegressionSpec()
    prob = problem if terminal is None else problem.with_terminal(terminal)
    grid = wb.grid

    def evaluate(u):
        ctrl = ControlProcess.open_loop(grid, u, prob.box, clamp=False)
        sb = simulate_state(prob, ctrl, wb)
        mean, se = mean_stderr(pathwise_cost(prob, sb))
        return Evaluation(mean, se, sb)

    def ascent(u, ev):
        ab = solve_adjoint(prob, ev.payload, rs)
        g = np.empty_like(u)
        gse = np.zeros_like(u)
        for k in range(grid.n_steps):
            hu = grad_u_paths(prob, ev.payload, ab, k)
            g[k], gse[k] = hu.mean(axis=0), (hu.std(axis=0, ddof=1) / np.sqrt(len(hu))
                                             if len(hu) > 1 else 0.0)
        return g, gse

    u, ev, trace = run_optimizer(evaluate, ascent, init.values, prob.box, grid.dt, spec)
    trace.flat_steps = flat_steps(prob, ev.payload, solve_adjoint(prob, ev.payload, rs), spec.flat_atol)
    return ControlProcess.open_loop(grid, u, prob.box), trace, ev
