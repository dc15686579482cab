"""Problem data: time grid, control box, coefficients, costs and constraints.

Variable names
--------------
dynamics and running cost : ``t``, ``x1..xm``, ``u1..uk`` (``x``/``u`` allowed when the
                            dimension is one)
terminal cost/constraints : ``y1..yn`` for scalar states, ``y{i}_{c}`` otherwise
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import (
    Expr,
    Num,
    EvaluationError,
    ExprError,
    diff_expr,
    eval_expr,
    free_vars,
    nonsmooth_in,
    parse_expr,
    rename,
)


class ProblemError(ValueError):
    pass


# --- grid and box ----------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int
    checkpoints: tuple
    checkpoint_nodes: tuple

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def n_checkpoints(self) -> int:
        return len(self.checkpoints)

    def interval_of_step(self, k: int) -> int:
        """Index i such that step k lies inside (t_i, t_{i+1}), with t_0 = 0."""
        for i, node in enumerate(self.checkpoint_nodes):
            if k < node:
                return i
        raise IndexError(k)

    def with_steps(self, n_steps: int) -> "TimeGrid":
        return build_time_grid(self.horizon, n_steps, self.checkpoints)


def build_time_grid(horizon: float, n_steps: int, checkpoints: Sequence[float]) -> TimeGrid:
    horizon = float(horizon)
    if not horizon > 0 or not math.isfinite(horizon):
        raise ProblemError(f"horizon must be positive, got {horizon}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ProblemError(f"step count must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    cps = [float(c) for c in checkpoints]
    if not cps:
        raise ProblemError("at least one checkpoint (the horizon) is required")
    if any(b <= a for a, b in zip(cps, cps[1:])):
        raise ProblemError(f"checkpoints must be strictly increasing: {cps}")
    if cps[0] < 0:
        raise ProblemError("checkpoints must be non-negative")
    dt = horizon / n_steps
    if abs(cps[-1] - horizon) > 1e-12 * max(1.0, horizon):
        raise ProblemError(f"last checkpoint {cps[-1]} must equal the horizon {horizon}")
    nodes = []
    for c in cps:
        k = int(round(c / dt))
        # a tie between two nodes is ambiguous and counts as unrepresentable
        if abs(k * dt - c) >= dt / 2 - 1e-12 * dt:
            raise ProblemError(
                f"checkpoint {c} is not within half a step of a grid node (step {dt:g})"
            )
        nodes.append(k)
    if nodes[0] == 0:
        raise ProblemError("a checkpoint at t=0 carries no information; drop it")
    if len(set(nodes)) != len(nodes):
        raise ProblemError("two checkpoints snap to the same node")
    return TimeGrid(horizon, n_steps, tuple(k * dt for k in nodes), tuple(nodes))


@dataclass(frozen=True)
class ControlBox:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ProblemError("control box bounds have different lengths")
        for lo, hi in zip(self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ProblemError("control box bounds must be finite")
            if lo > hi:
                raise ProblemError(f"control box lower bound {lo} exceeds upper {hi}")

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ControlBox":
        return cls((float(lo),), (float(hi),))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    def clamp(self, values):
        return np.clip(np.asarray(values, dtype=float), self.lo, self.hi)

    def contains(self, values, tol: float = 1e-12) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def grid(self, points: int) -> list:
        """Uniform per-component grids (a degenerate component gives one point)."""
        if points < 2:
            raise ProblemError("v-grid resolution must be at least 2")
        out = []
        for lo, hi in zip(self.lower, self.upper):
            out.append(np.array([lo]) if lo == hi else np.linspace(lo, hi, points))
        return out


# --- specification ---------------------------------------------------------

@dataclass(frozen=True)
class Constraint:
    """Expectation constraint ``lower <= E phi(Y) <= upper``."""

    expr: str
    lower: float = -math.inf
    upper: float = math.inf
    name: str = ""

    def __post_init__(self):
        if self.lower > self.upper:
            raise ProblemError(f"constraint {self.expr!r}: lower bound exceeds upper bound")


@dataclass(frozen=True)
class ProblemSpec:
    x0: tuple
    drift: tuple
    diffusion: tuple  # m rows of d expressions
    running_cost: str
    terminal_cost: str
    grid: TimeGrid
    box: ControlBox
    constraints: tuple = ()
    name: str = "custom"
    lipschitz_c: float = 10.0  # advisory bound for the secant check
    sample_halfwidth: float = 2.0  # state box half-width around x0 for sampled checks

    @property
    def state_dim(self) -> int:
        return len(self.x0)

    @property
    def brownian_dim(self) -> int:
        return len(self.diffusion[0]) if self.diffusion else 0

    @property
    def control_dim(self) -> int:
        return self.box.dim

    def replace(self, **changes) -> "ProblemSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return ProblemSpec(**d)


def state_names(m: int) -> list:
    return [f"x{i + 1}" for i in range(m)]


def control_names(k: int) -> list:
    return [f"u{j + 1}" for j in range(k)]


def checkpoint_names(n: int, m: int) -> list:
    """names[i][c] of the checkpoint-state variables."""
    if m == 1:
        return [[f"y{i + 1}"] for i in range(n)]
    return [[f"y{i + 1}_{c + 1}" for c in range(m)] for i in range(n)]


def _parse(text, context, aliases, where):
    try:
        e = parse_expr(str(text), set(context) | set(aliases))
    except ExprError as exc:
        raise ProblemError(f"{where}: {exc}") from exc
    return rename(e, aliases) if aliases else e


# --- terminal functionals --------------------------------------------------

class TerminalCost:
    """Scalar function of the checkpoint states ``ys[path, i, c]``."""

    n: int
    m: int
    smooth: bool = True

    def value(self, ys: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, ys: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ExprTerminal(TerminalCost):
    def __init__(self, expr: Expr, n: int, m: int):
        self.expr = expr
        self.n, self.m = n, m
        self.names = checkpoint_names(n, m)
        self._grad = None
        self._grad_error = None
        try:
            self._grad = [[diff_expr(expr, v) for v in row] for row in self.names]
        except ExprError as exc:
            self._grad_error = exc
        self.smooth = self._grad is not None

    def __repr__(self):
        return f"ExprTerminal({self.expr})"

    def binding(self, ys):
        ys = np.asarray(ys, dtype=float)
        return {self.names[i][c]: ys[:, i, c] for i in range(self.n) for c in range(self.m)}

    def value(self, ys):
        ys = np.asarray(ys, dtype=float)
        out = eval_expr(self.expr, self.binding(ys))
        return np.broadcast_to(np.asarray(out, dtype=float), (ys.shape[0],)).copy()

    def gradient_exprs(self):
        if self._grad_error is not None:
            raise self._grad_error
        return self._grad

    def gradient(self, ys):
        grads = self.gradient_exprs()
        ys = np.asarray(ys, dtype=float)
        b = self.binding(ys)
        out = np.zeros(ys.shape)
        for i in range(self.n):
            for c in range(self.m):
                g = grads[i][c]
                if not (isinstance(g, Num) and g.value == 0):
                    out[:, i, c] = eval_expr(g, b)
        return out


class WeightedTerminal(TerminalCost):
    """Sum of weighted terminal functionals."""

    def __init__(self, terms):
        self.terms = [(float(w), t) for w, t in terms]
        self.n, self.m = self.terms[0][1].n, self.terms[0][1].m
        self.smooth = all(t.smooth for w, t in self.terms if w != 0)

    def value(self, ys):
        out = np.zeros(np.asarray(ys).shape[0])
        for w, t in self.terms:
            if w != 0:
                out += w * t.value(ys)
        return out

    def gradient(self, ys):
        out = np.zeros(np.asarray(ys).shape)
        for w, t in self.terms:
            if w != 0:
                out += w * t.gradient(ys)
        return out


@dataclass(frozen=True)
class ConstraintSlot:
    """One multiplier slot: sign +1 for an upper bound, -1 for a lower bound."""

    constraint: int
    sign: int
    bound: float
    phi: TerminalCost = field(compare=False)
    label: str = ""

    def violation(self, mean_phi):
        return (mean_phi - self.bound) if self.sign > 0 else (self.bound - mean_phi)


# --- validated problem -----------------------------------------------------

@dataclass
class LipschitzReport:
    samples: int
    max_slope: float
    bound: float
    growth_ratio: float
    passed: bool
    note: str = ""


class ValidatedProblem:
    """Parsed, differentiated and checked problem. Treat as immutable."""

    def __init__(self, spec: ProblemSpec, *, lipschitz_samples: int = 10_000):
        self.spec = spec
        m, d, k = spec.state_dim, spec.brownian_dim, spec.control_dim
        if m < 1:
            raise ProblemError("state dimension must be at least 1")
        if len(spec.drift) != m:
            raise ProblemError(f"drift has {len(spec.drift)} entries, state dimension is {m}")
        if len(spec.diffusion) != m:
            raise ProblemError(f"diffusion has {len(spec.diffusion)} rows, state dimension is {m}")
        if d < 1 or any(len(row) != d for row in spec.diffusion):
            raise ProblemError("diffusion rows must all have the Brownian dimension as length")
        self.m, self.d, self.k = m, d, k
        self.grid = spec.grid
        self.n = spec.grid.n_checkpoints
        self.x0 = np.asarray(spec.x0, dtype=float)
        self.box = spec.box

        self.xnames = state_names(m)
        self.unames = control_names(k)
        aliases = {}
        if m == 1:
            aliases["x"] = "x1"
        if k == 1:
            aliases["u"] = "u1"
        ctx = {"t", *self.xnames, *self.unames}
        self.drift = [_parse(e, ctx, aliases, f"drift[{i}]") for i, e in enumerate(spec.drift)]
        self.diffusion = [
            [_parse(e, ctx, aliases, f"diffusion[{i}][{j}]") for j, e in enumerate(row)]
            for i, row in enumerate(spec.diffusion)
        ]
        self.running = _parse(spec.running_cost, ctx, aliases, "running cost")

        self.ynames = checkpoint_names(self.n, m)
        yctx = {v for row in self.ynames for v in row}
        terminal_expr = _parse(spec.terminal_cost, yctx, {}, "terminal cost")
        self.terminal = ExprTerminal(terminal_expr, self.n, m)

        self.constraint_exprs = []
        self.slots = []
        for ci, con in enumerate(spec.constraints):
            phi = ExprTerminal(_parse(con.expr, yctx, {}, f"constraint[{ci}]"), self.n, m)
            if not phi.smooth:
                raise ProblemError(f"constraint[{ci}] {con.expr!r} must be differentiable")
            self.constraint_exprs.append(phi)
            label = con.name or f"c{ci + 1}"
            if math.isfinite(con.lower):
                self.slots.append(ConstraintSlot(ci, -1, float(con.lower), phi, label + ":lower"))
            if math.isfinite(con.upper):
                self.slots.append(ConstraintSlot(ci, +1, float(con.upper), phi, label + ":upper"))

        # derivative cache
        def dd(e, v, where):
            try:
                return diff_expr(e, v)
            except ExprError as exc:
                raise ProblemError(f"{where}: {exc}") from exc

        X, U = self.xnames, self.unames
        self.drift_x = [[dd(b, v, "drift") for v in X] for b in self.drift]
        self.drift_u = [[dd(b, v, "drift") for v in U] for b in self.drift]
        self.diffusion_x = [[[dd(s, v, "diffusion") for v in X] for s in row] for row in self.diffusion]
        self.diffusion_u = [[[dd(s, v, "diffusion") for v in U] for s in row] for row in self.diffusion]
        self.running_x = [dd(self.running, v, "running cost") for v in X]
        self.running_u = [dd(self.running, v, "running cost") for v in U]

        coeff_vars = set()
        for e in self.drift + [s for row in self.diffusion for s in row]:
            coeff_vars |= free_vars(e)
        self.x_free = not (coeff_vars & set(X))

        self.notes = []
        if not self.terminal.smooth:
            self.notes.append("non-smooth terminal; mollify before adjoint")
        self.lipschitz = self._lipschitz_check(lipschitz_samples)
        if not self.lipschitz.passed:
            self.notes.append(
                f"advisory: sampled secant slope {self.lipschitz.max_slope:.3g} exceeds "
                f"c={self.lipschitz.bound:g}"
            )

    # -- cache identity

    def cache(self) -> dict:
        return {
            "drift": self.drift,
            "diffusion": self.diffusion,
            "running": self.running,
            "terminal": self.terminal.expr,
            "drift_x": self.drift_x,
            "drift_u": self.drift_u,
            "diffusion_x": self.diffusion_x,
            "diffusion_u": self.diffusion_u,
            "running_x": self.running_x,
            "running_u": self.running_u,
            "terminal_grad": self.terminal._grad,
            "constraints": [c.expr for c in self.constraint_exprs],
        }

    def with_terminal(self, terminal: TerminalCost, running_weight: float | None = None):
        """Copy with a different terminal functional (e.g. a mollified one)."""
        if terminal.n != self.n or terminal.m != self.m:
            raise ProblemError("terminal functional shape does not match the checkpoints")
        other = copy.copy(self)
        other.terminal = terminal
        other.notes = [n for n in self.notes if "non-smooth terminal" not in n]
        if not terminal.smooth:
            other.notes.append("non-smooth terminal; mollify before adjoint")
        return other

    def without_constraints(self):
        other = copy.copy(self)
        other.slots = []
        other.constraint_exprs = []
        return other

    # -- vectorised evaluation

    def binding(self, t, x, u) -> dict:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        b = {"t": t if np.ndim(t) else float(t)}
        for i, name in enumerate(self.xnames):
            b[name] = x[:, i]
        for j, name in enumerate(self.unames):
            b[name] = u[:, j]
        return b

    @staticmethod
    def _fill(out, e, b, index):
        if isinstance(e, Num):
            if e.value != 0:
                out[index] = e.value
            return
        out[index] = eval_expr(e, b)

    def _rows(self, x, u):
        return max(np.shape(x)[0], np.shape(u)[0])

    def drift_value(self, t, x, u):
        b = self.binding(t, x, u)
        out = np.zeros((self._rows(x, u), self.m))
        for i, e in enumerate(self.drift):
            self._fill(out, e, b, (slice(None), i))
        return out

    def diffusion_value(self, t, x, u):
        b = self.binding(t, x, u)
        out = np.zeros((self._rows(x, u), self.m, self.d))
        for i, row in enumerate(self.diffusion):
            for j, e in enumerate(row):
                self._fill(out, e, b, (slice(None), i, j))
        return out

    def running_value(self, t, x, u):
        b = self.binding(t, x, u)
        out = np.zeros(self._rows(x, u))
        self._fill(out, self.running, b, slice(None))
        return out

    def derivatives(self, t, x, u) -> dict:
        """b_x[n,i,l], b_u[n,i,j], s_x[n,i,w,l], s_u[n,i,w,j], f_x[n,l], f_u[n,j]."""
        b = self.binding(t, x, u)
        n = self._rows(x, u)
        m, d, k = self.m, self.d, self.k
        bx = np.zeros((n, m, m))
        bu = np.zeros((n, m, k))
        sx = np.zeros((n, m, d, m))
        su = np.zeros((n, m, d, k))
        fx = np.zeros((n, m))
        fu = np.zeros((n, k))
        for i in range(m):
            for l in range(m):
                self._fill(bx, self.drift_x[i][l], b, (slice(None), i, l))
            for j in range(k):
                self._fill(bu, self.drift_u[i][j], b, (slice(None), i, j))
            for w in range(d):
                for l in range(m):
                    self._fill(sx, self.diffusion_x[i][w][l], b, (slice(None), i, w, l))
                for j in range(k):
                    self._fill(su, self.diffusion_u[i][w][j], b, (slice(None), i, w, j))
        for l in range(m):
            self._fill(fx, self.running_x[l], b, (slice(None), l))
        for j in range(k):
            self._fill(fu, self.running_u[j], b, (slice(None), j))
        return {"b_x": bx, "b_u": bu, "s_x": sx, "s_u": su, "f_x": fx, "f_u": fu}

    # -- advisory Lipschitz check

    def _lipschitz_check(self, samples: int) -> LipschitzReport:
        spec = self.spec
        if samples <= 0:
            return LipschitzReport(0, float("nan"), spec.lipschitz_c, float("nan"), True, "skipped")
        rng = np.random.default_rng(20240611)
        h = spec.sample_halfwidth
        t = rng.uniform(0, self.grid.horizon, samples)
        x1 = self.x0 + rng.uniform(-h, h, (samples, self.m))
        x2 = self.x0 + rng.uniform(-h, h, (samples, self.m))
        u1 = rng.uniform(self.box.lo, self.box.hi, (samples, self.k))
        u2 = rng.uniform(self.box.lo, self.box.hi, (samples, self.k))
        try:
            f1 = np.concatenate([self.drift_value(t, x1, u1),
                                 self.diffusion_value(t, x1, u1).reshape(samples, -1)], axis=1)
            f2 = np.concatenate([self.drift_value(t, x2, u2),
                                 self.diffusion_value(t, x2, u2).reshape(samples, -1)], axis=1)
        except EvaluationError as exc:
            return LipschitzReport(samples, float("nan"), spec.lipschitz_c, float("nan"), False,
                                   f"evaluation failed during sampling: {exc}")
        dz = np.sqrt(np.sum((x1 - x2) ** 2, 1) + np.sum((u1 - u2) ** 2, 1))
        slopes = np.sqrt(np.sum((f1 - f2) ** 2, 1)) / np.maximum(dz, 1e-300)
        growth = np.sqrt(np.sum(f1 ** 2, 1)) / (1 + np.sqrt(np.sum(x1 ** 2, 1)))
        max_slope = float(np.max(slopes))
        max_growth = float(np.max(growth))
        ok = np.isfinite(max_slope) and max_slope <= spec.lipschitz_c and max_growth <= spec.lipschitz_c
        return LipschitzReport(samples, max_slope, spec.lipschitz_c, max_growth, bool(ok))


def validate_problem(p) -> ValidatedProblem:
    """Parse and differentiate every expression; idempotent on validated input."""
    if isinstance(p, ValidatedProblem):
        return p
    if not isinstance(p, ProblemSpec):
        raise TypeError(f"expected ProblemSpec, got {type(p).__name__}")
    return ValidatedProblem(p)
