"""Brownian paths, Euler-Maruyama state simulation, variational flow, MC cost."""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import Num, eval_expr, parse_expr, rename
from .problem import ControlBox, TimeGrid, ValidatedProblem

# Paths are drawn in fixed blocks so a path's increments depend only on
# (seed, path index, grid), never on how work is split between threads.
PATH_BLOCK = 256
MAX_TREE_PATHS = 1 << 12


class SimulationError(RuntimeError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path, self.step = path, step


class AlignmentError(ValueError):
    pass


def _blocks(n_paths: int, workers: int):
    """Path slices aligned to PATH_BLOCK, roughly one group per worker."""
    nblocks = -(-n_paths // PATH_BLOCK)
    per = max(1, -(-nblocks // max(1, workers)))
    out = []
    for b in range(0, nblocks, per):
        out.append(slice(b * PATH_BLOCK, min(n_paths, (b + per) * PATH_BLOCK)))
    return out


def _run(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- Brownian motion -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BrownianBatch:
    grid: TimeGrid
    seed: int | None
    dW: np.ndarray  # [path, step, component]
    W: np.ndarray  # [path, node, component]
    kind: str = "mc"

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def dim(self) -> int:
        return self.dW.shape[2]

    def coarsen(self, factor: int) -> "BrownianBatch":
        """Same paths on a grid with ``factor`` times fewer steps."""
        N = self.grid.n_steps
        if factor < 1 or N % factor:
            raise AlignmentError(f"cannot coarsen {N} steps by {factor}")
        grid = self.grid.with_steps(N // factor)
        dW = self.dW.reshape(self.n_paths, N // factor, factor, self.dim).sum(axis=2)
        return BrownianBatch(grid, self.seed, dW, self.W[:, ::factor].copy(), self.kind)


def _with_cumsum(grid, seed, dW, kind):
    W = np.zeros((dW.shape[0], dW.shape[1] + 1, dW.shape[2]))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return BrownianBatch(grid, seed, dW, W, kind)


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int, dim: int = 1,
                    workers: int = 1) -> BrownianBatch:
    """Increments from Philox streams keyed by (seed, block of PATH_BLOCK paths)."""
    if n_paths < 1:
        raise ValueError("need at least one path")
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    N = grid.n_steps
    sd = np.sqrt(grid.dt)
    dW = np.empty((n_paths, N, dim))

    def fill(sl):
        for start in range(sl.start, sl.stop, PATH_BLOCK):
            block = start // PATH_BLOCK
            stop = min(sl.stop, start + PATH_BLOCK)
            gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, block]))
            dW[start:stop] = gen.standard_normal((stop - start, N, dim)) * sd

    _run(fill, _blocks(n_paths, workers), workers)
    return _with_cumsum(grid, seed, dW, "mc")


def binomial_tree_batch(grid: TimeGrid, dim: int = 1) -> BrownianBatch:
    """Every +-sqrt(dt) increment sequence once; sample means are exact tree expectations."""
    count = grid.n_steps * dim
    if 2 ** count > MAX_TREE_PATHS:
        raise ValueError(f"binomial tree with {2 ** count} paths exceeds the cap {MAX_TREE_PATHS}")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=count)))
    dW = signs.reshape(-1, grid.n_steps, dim) * np.sqrt(grid.dt)
    return _with_cumsum(grid, None, dW, "tree")


# --- controls --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Piecewise-constant control on the grid steps.

    kinds: ``open_loop`` values[step, j]; ``adapted`` values[path, step, j];
    ``feedback`` fn(step, t, x[path, i]) -> [path, j].
    """

    grid: TimeGrid
    kind: str
    values: np.ndarray | None = None
    fn: Callable | None = field(default=None, repr=False)
    box: ControlBox | None = None
    label: str = ""

    @classmethod
    def open_loop(cls, grid, values, box=None, clamp=True, label=""):
        v = np.array(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != grid.n_steps:
            raise AlignmentError(f"control has {v.shape[0]} steps, grid has {grid.n_steps}")
        if box is not None and clamp:
            v = box.clamp(v)
        return cls(grid, "open_loop", v, None, box, label)

    @classmethod
    def constant(cls, grid, value, box=None, label=""):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls.open_loop(grid, np.tile(value, (grid.n_steps, 1)), box, label=label)

    @classmethod
    def direction(cls, grid, values, label=""):
        """Perturbation direction: never clamped."""
        v = np.array(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        kind = "adapted" if v.ndim == 3 else "open_loop"
        return cls(grid, kind, v, None, None, label)

    @classmethod
    def adapted(cls, grid, values, box=None, clamp=True, label=""):
        v = np.array(values, dtype=float)
        if v.ndim != 3 or v.shape[1] != grid.n_steps:
            raise AlignmentError("adapted control must have shape [path, step, component]")
        if box is not None and clamp:
            v = box.clamp(v)
        return cls(grid, "adapted", v, None, box, label)

    @classmethod
    def feedback(cls, grid, fn, box=None, label=""):
        return cls(grid, "feedback", None, fn, box, label)

    @classmethod
    def feedback_exprs(cls, grid, exprs: Sequence[str], problem: ValidatedProblem, label=""):
        """Feedback given by expressions in t and the state variables."""
        aliases = {"x": "x1"} if problem.m == 1 else {}
        ctx = {"t", *problem.xnames, *aliases}
        parsed = [rename(parse_expr(e, ctx), aliases) for e in exprs]
        if len(parsed) != problem.k:
            raise AlignmentError(f"need {problem.k} feedback expressions, got {len(parsed)}")
        names = problem.xnames

        def fn(k, t, x):
            b = {"t": t}
            for i, nm in enumerate(names):
                b[nm] = x[:, i]
            out = np.empty((x.shape[0], len(parsed)))
            for j, e in enumerate(parsed):
                out[:, j] = eval_expr(e, b)
            return out

        return cls(grid, "feedback", None, fn, problem.box, label)

    @property
    def deterministic(self) -> bool:
        return self.kind == "open_loop"

    def step_values(self, k, t, x, paths=slice(None)):
        if self.kind == "open_loop":
            return self.values[k][None, :]
        if self.kind == "adapted":
            return self.values[paths, k]
        u = np.asarray(self.fn(k, t, x), dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        return self.box.clamp(u) if self.box is not None else u


# --- state -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateBatch:
    X: np.ndarray  # [path, node, component]
    U: np.ndarray  # [path or 1, step, component], realised controls
    brownian: BrownianBatch
    control: ControlProcess

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def grid(self):
        return self.brownian.grid

    def controls_at(self, k):
        return self.U[:, k]

    def checkpoint_states(self):
        return self.X[:, list(self.grid.checkpoint_nodes), :]


def _check_aligned(problem, control, wb):
    if control.grid != wb.grid:
        raise AlignmentError("control and Brownian batch use different grids")
    if wb.grid != problem.grid and (wb.grid.horizon, wb.grid.checkpoints) != (
            problem.grid.horizon, problem.grid.checkpoints):
        raise AlignmentError("Brownian batch grid does not match the problem")
    if wb.dim != problem.d:
        raise AlignmentError(f"Brownian dimension {wb.dim} != problem dimension {problem.d}")
    if control.kind == "adapted" and control.values.shape[0] not in (1, wb.n_paths):
        raise AlignmentError("adapted control path count does not match the batch")


def simulate_state(problem: ValidatedProblem, control: ControlProcess, wb: BrownianBatch,
                   workers: int = 1) -> StateBatch:
    """Euler-Maruyama: X_{k+1} = X_k + b dt + sum_j sigma^j dW^j."""
    _check_aligned(problem, control, wb)
    grid = wb.grid
    N, dt = grid.n_steps, grid.dt
    times = grid.times
    n = wb.n_paths
    X = np.empty((n, N + 1, problem.m))
    X[:, 0] = problem.x0
    per_path = control.kind != "open_loop"
    U = np.empty((n if per_path else 1, N, problem.k))
    if not per_path:
        U[0] = control.values

    def block(sl):
        dW = wb.dW[sl]
        for k in range(N):
            x = X[sl, k]
            u = control.step_values(k, times[k], x, sl)
            if per_path:
                U[sl, k] = u
            b = problem.drift_value(times[k], x, u)
            s = problem.diffusion_value(times[k], x, u)
            nxt = x + b * dt + np.einsum("nij,nj->ni", s, dW[:, k])
            if not np.all(np.isfinite(nxt)):
                bad = int(np.argmax(~np.all(np.isfinite(nxt), axis=1)))
                path = (sl.start or 0) + bad
                raise SimulationError(f"non-finite state on path {path} at step {k}", path, k)
            X[sl, k + 1] = nxt

    _run(block, _blocks(n, workers), workers)
    return StateBatch(X, U, wb, control)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int

    def __str__(self):
        return f"{self.mean:.6g} +- {self.stderr:.3g} (N={self.n_paths})"


def mean_stderr(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def running_cost_paths(problem: ValidatedProblem, sb: StateBatch, weight: float = 1.0):
    out = np.zeros(sb.n_paths)
    if isinstance(problem.running, Num) and problem.running.value == 0:
        return out
    times, dt = sb.grid.times, sb.grid.dt
    for k in range(sb.grid.n_steps):
        out += problem.running_value(times[k], sb.X[:, k], sb.U[:, k]) * dt
    return weight * out


def pathwise_cost(problem: ValidatedProblem, sb: StateBatch, terminal=None) -> np.ndarray:
    """Left-Riemann running cost plus the terminal functional, per path."""
    terminal = terminal or problem.terminal
    return running_cost_paths(problem, sb) + terminal.value(sb.checkpoint_states())


def estimate_cost(problem: ValidatedProblem, sb: StateBatch, control=None) -> CostEstimate:
    if control is not None and control is not sb.control:
        raise AlignmentError("state batch was produced by a different control")
    mean, se = mean_stderr(pathwise_cost(problem, sb))
    return CostEstimate(mean, se, sb.n_paths)


# --- variational flow ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VariationalBatch:
    y: np.ndarray  # [path, node, component]
    direction: ControlProcess
    base: StateBatch


def _direction_values(direction: ControlProcess, sb: StateBatch, k):
    if direction.kind == "open_loop":
        return direction.values[k][None, :]
    if direction.kind == "adapted":
        return direction.values[:, k]
    raise ValueError("a perturbation direction must be open-loop or adapted")


def simulate_variational(problem: ValidatedProblem, sb: StateBatch,
                         direction: ControlProcess) -> VariationalBatch:
    """dy = (b_x y + b_u v) dt + sum_j (s^j_x y + s^j_u v) dW^j, y(0) = 0."""
    if direction.grid != sb.grid:
        raise AlignmentError("direction and state batch use different grids")
    grid = sb.grid
    N, dt, times = grid.n_steps, grid.dt, grid.times
    dW = sb.brownian.dW
    y = np.zeros((sb.n_paths, N + 1, problem.m))
    for k in range(N):
        v = _direction_values(direction, sb, k)
        der = problem.derivatives(times[k], sb.X[:, k], sb.U[:, k])
        yk = y[:, k]
        drift = np.einsum("nil,nl->ni", der["b_x"], yk) + np.einsum("nij,nj->ni", der["b_u"], v)
        diff = (np.einsum("niwl,nl->niw", der["s_x"], yk)
                + np.einsum("niwj,nj->niw", der["s_u"], v))
        y[:, k + 1] = yk + drift * dt + np.einsum("niw,nw->ni", diff, dW[:, k])
    return VariationalBatch(y, direction, sb)


def first_order_paths(problem: ValidatedProblem, sb: StateBatch, vb: VariationalBatch,
                      terminal=None) -> np.ndarray:
    """Pathwise sum_i Psi_{x_i} y(t_i) + sum_k (f_x y_k + f_u v_k) dt."""
    terminal = terminal or problem.terminal
    grid = sb.grid
    nodes = list(grid.checkpoint_nodes)
    out = np.einsum("nic,nic->n", terminal.gradient(sb.checkpoint_states()), vb.y[:, nodes])
    for k in range(grid.n_steps):
        der = problem.derivatives(grid.times[k], sb.X[:, k], sb.U[:, k])
        v = _direction_values(vb.direction, sb, k)
        out += (np.einsum("nl,nl->n", der["f_x"], vb.y[:, k])
                + np.einsum("nj,nj->n", der["f_u"], np.broadcast_to(v, der["f_u"].shape))) * grid.dt
    return out


class BoxViolation(ValueError):
    pass


@dataclass
class GateauxReport:
    rhos: list
    finite_difference: list
    expansion: float
    expansion_stderr: float
    gaps: list
    gap_stderr: list
    order: float

    def rows(self):
        return [
            (r, fd, self.expansion, g, s)
            for r, fd, g, s in zip(self.rhos, self.finite_difference, self.gaps, self.gap_stderr)
        ]


def perturbed_control(sb: StateBatch, direction: ControlProcess, rho: float, box=None,
                      check_box: bool = True) -> ControlProcess:
    """u = base + rho * direction, with the base frozen along its own paths."""
    grid = sb.grid
    base = sb.U
    d = direction.values if direction.kind == "open_loop" else direction.values
    if direction.kind == "open_loop":
        vals = base + rho * d[None] if base.shape[0] > 1 else base[0] + rho * d
    else:
        vals = base + rho * d
    if box is not None and check_box and not box.contains(vals):
        raise BoxViolation(f"base + {rho:g} * direction leaves the control box")
    if vals.ndim == 2:
        return ControlProcess.open_loop(grid, vals, box, clamp=False)
    return ControlProcess.adapted(grid, vals, box, clamp=False)


def gateaux_check(problem: ValidatedProblem, base: ControlProcess, direction: ControlProcess,
                  wb: BrownianBatch, rhos: Sequence[float] = (0.1, 0.05, 0.025)) -> GateauxReport:
    """Finite-difference quotient against the first-order expansion, common random numbers."""
    sb = simulate_state(problem, base, wb)
    j0 = pathwise_cost(problem, sb)
    vb = simulate_variational(problem, sb, direction)
    exp_paths = first_order_paths(problem, sb, vb)
    exp_mean, exp_se = mean_stderr(exp_paths)
    fds, gaps, ses = [], [], []
    for rho in rhos:
        ctrl = perturbed_control(sb, direction, rho, problem.box)
        jr = pathwise_cost(problem, simulate_state(problem, ctrl, wb))
        fd = (jr - j0) / rho
        g, s = mean_stderr(fd - exp_paths)
        fds.append(float(fd.mean()))
        gaps.append(g)
        ses.append(s)
    order = float("nan")
    a = np.abs(np.asarray(gaps))
    if len(rhos) >= 2 and np.all(a > 0):
        order = float(np.polyfit(np.log(rhos), np.log(a), 1)[0])
    return GateauxReport(list(rhos), fds, exp_mean, exp_se, gaps, ses, order)
