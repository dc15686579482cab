"""Gaussian mollification of non-smooth multi-time functionals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import roots_legendre

from .expr import free_vars, parse_expr, to_str
from .forward import BrownianBatch, ControlProcess, StateBatch, mean_stderr, simulate_state
from .problem import ExprTerminal, ProblemSpec, TerminalCost, build_time_grid, validate_problem

QUADRATURES = ("half-hermite", "hermite", "mc")
MAX_TENSOR_DIM = 6
MAX_TENSOR_POINTS = 1 << 18
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class QuadratureOverflowError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MollifierSpec:
    """``nodes`` counts points per dimension (symmetric, so half as many distinct |z|)."""

    eps: float
    quadrature: str = "half-hermite"
    nodes: int = 64
    samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier width must be positive")
        if self.quadrature not in QUADRATURES:
            raise ValueError(f"quadrature must be one of {QUADRATURES}")
        if self.nodes < 1 or self.samples < 1:
            raise ValueError("node and sample counts must be at least 1")


# --- one-dimensional rules -------------------------------------------------

@lru_cache(maxsize=None)
def half_range_rule(n: int):
    """Gauss rule for the standard normal density restricted to [0, inf).

    Weights sum to 1/2, so pairing each node with its mirror gives a symmetric
    rule for N(0, 1) that integrates |z|^k exactly up to k = 2n - 1. Built by
    Lanczos on a fine Gauss-Legendre discretisation of [0, 20].
    """
    x, w = roots_legendre(2000)
    L = 20.0
    z = 0.5 * L * (x + 1.0)
    wt = 0.5 * L * w * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    q = np.sqrt(wt)
    q /= np.linalg.norm(q)
    Q = np.zeros((z.size, n))
    a = np.zeros(n)
    b = np.zeros(max(n - 1, 0))
    Q[:, 0] = q
    for j in range(n):
        v = z * Q[:, j]
        a[j] = Q[:, j] @ v
        v -= a[j] * Q[:, j]
        if j:
            v -= b[j - 1] * Q[:, j - 1]
        for _ in range(2):  # full reorthogonalisation
            v -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ v)
        if j < n - 1:
            b[j] = np.linalg.norm(v)
            Q[:, j + 1] = v / b[j]
    if n == 1:
        nodes, vecs = a.copy(), np.ones((1, 1))
    else:
        nodes, vecs = eigh_tridiagonal(a, b)
    weights = 0.5 * vecs[0] ** 2
    weights *= 0.5 / weights.sum()
    return nodes, weights


@lru_cache(maxsize=None)
def symmetric_rule(points: int, kind: str):
    """(nodes, weights) for E[g(Z)], Z ~ N(0, 1)."""
    if kind == "hermite":
        z, w = np.polynomial.hermite_e.hermegauss(points)
        return z, w / w.sum()
    if points % 2:
        raise ValueError("half-range rule needs an even point count")
    z, w = half_range_rule(points // 2)
    return np.concatenate([-z[::-1], z]), np.concatenate([w[::-1], w])


def _tensor(z, w, dim):
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1)
    W = np.ones(Z.shape[0])
    for g in np.meshgrid(*([w] * dim), indexing="ij"):
        W = W * g.ravel()
    return Z, W


# --- mollified functional --------------------------------------------------

class MollifiedTerminal(TerminalCost):
    """Phi^eps(y) = E Phi(y + eps Z); gradient by (1/eps) E[Phi(y + eps Z) Z].

    Only the coordinates Phi actually reads are smoothed.
    """

    smooth = True

    def __init__(self, base: TerminalCost, spec: MollifierSpec, chunk: int = 1 << 22):
        self.base = base
        self.spec = spec
        self.n, self.m = base.n, base.m
        self.chunk = chunk
        if isinstance(base, ExprTerminal):
            used = free_vars(base.expr)
            self.active = [(i, c) for i in range(self.n) for c in range(self.m)
                           if base.names[i][c] in used]
        else:
            self.active = [(i, c) for i in range(self.n) for c in range(self.m)]
        r = len(self.active)
        self.dim = r
        mode = spec.quadrature
        if mode != "mc" and (r > MAX_TENSOR_DIM or spec.nodes ** r > MAX_TENSOR_POINTS):
            mode = "mc"
        self.mode = mode
        if r == 0:
            self.Z, self.W = np.zeros((1, 0)), np.ones(1)
        elif mode == "mc":
            rng = np.random.default_rng(spec.seed)
            half = rng.standard_normal(((spec.samples + 1) // 2, r))
            self.Z = np.concatenate([half, -half])  # antithetic: affine maps exact
            self.W = np.full(self.Z.shape[0], 1.0 / self.Z.shape[0])
        else:
            pts = spec.nodes + (spec.nodes % 2 if mode == "half-hermite" else 0)
            self.Z, self.W = _tensor(*symmetric_rule(pts, mode), r)

    def __repr__(self):
        return f"MollifiedTerminal(eps={self.spec.eps}, {self.mode}, dim={self.dim})"

    @property
    def points(self):
        return self.Z.shape[0]

    def _evaluate(self, ys, want_grad):
        ys = np.asarray(ys, dtype=float)
        P = ys.shape[0]
        K = self.points
        eps = self.spec.eps
        val = np.empty(P)
        grad = np.zeros(ys.shape) if want_grad else None
        step = max(1, self.chunk // max(K, 1))
        for s in range(0, P, step):
            blk = ys[s: s + step]
            b = blk.shape[0]
            big = np.repeat(blk[:, None], K, axis=1)  # [b, K, n, m]
            for a, (i, c) in enumerate(self.active):
                big[:, :, i, c] += eps * self.Z[None, :, a]
            F = self.base.value(big.reshape(b * K, self.n, self.m)).reshape(b, K)
            v = F @ self.W
            if not np.all(np.isfinite(v)):
                raise QuadratureOverflowError(
                    "non-finite quadrature sum; the functional grows faster than the kernel decays")
            val[s: s + b] = v
            if want_grad:
                for a, (i, c) in enumerate(self.active):
                    grad[s: s + b, i, c] = F @ (self.W * self.Z[:, a]) / eps
        return val, grad

    def value(self, ys):
        return self._evaluate(ys, False)[0]

    def gradient(self, ys):
        return self._evaluate(ys, True)[1]


def mollify_terminal(terminal, spec: MollifierSpec, n: int | None = None, m: int = 1):
    """Accepts a TerminalCost or an expression string in y1..yn (m = 1)."""
    if isinstance(terminal, str):
        from .problem import checkpoint_names

        if n is None:
            used = [v for v in free_vars(parse_expr(terminal)) if v.startswith("y")]
            n = max([int(v[1:].split("_")[0]) for v in used], default=1)
        names = {v for row in checkpoint_names(n, m) for v in row}
        terminal = ExprTerminal(parse_expr(terminal, names), n, m)
    return MollifiedTerminal(terminal, spec)


# --- error scan ------------------------------------------------------------

@dataclass
class ScanRow:
    eps: float
    sup_error: float
    bound: float
    measured_c: float
    at: tuple

    @property
    def within(self):
        return self.sup_error <= self.bound


@dataclass
class ScanReport:
    rows: list
    slope: float
    lipschitz: float
    quadrature: str

    @property
    def passed(self):
        return all(r.within for r in self.rows)

    @property
    def measured_c(self):
        return max(r.measured_c for r in self.rows)

    def to_text(self):
        lines = ["[mollifier error scan]", f"quadrature: {self.quadrature}",
                 f"declared Lipschitz constant: {self.lipschitz:g}"]
        for r in self.rows:
            lines.append(f"eps {r.eps:g}: sup error {r.sup_error:.6g} (bound {r.bound:.6g}) "
                         f"C {r.measured_c:.6g} -> {'ok' if r.within else 'EXCEEDED'}")
        lines.append(f"log-log slope: {self.slope:.4g}")
        return "\n".join(lines) + "\n"


def mollify_error_scan(terminal, lipschitz: float, eps_list=(0.2, 0.1, 0.05), probes=None,
                       spec: MollifierSpec | None = None, qtol: float = 1e-9) -> ScanReport:
    """Measured sup |Phi^eps - Phi| over probes against c eps sqrt(2/pi) n m."""
    base = mollify_terminal(terminal, MollifierSpec(1.0)).base
    if probes is None:
        probes = np.linspace(-2.0, 2.0, 81)[:, None, None] * np.ones((1, base.n, base.m))
    probes = np.asarray(probes, dtype=float)
    exact = base.value(probes)
    rows = []
    for eps in eps_list:
        s = MollifierSpec(eps) if spec is None else MollifierSpec(
            eps, spec.quadrature, spec.nodes, spec.samples, spec.seed)
        mt = MollifiedTerminal(base, s)
        err = np.abs(mt.value(probes) - exact)
        j = int(np.argmax(err))
        bound = lipschitz * eps * SQRT_2_OVER_PI * base.n * base.m + qtol
        rows.append(ScanRow(eps, float(err[j]), bound, float(err[j] / eps),
                            tuple(probes[j].ravel().tolist())))
    errs = np.array([r.sup_error for r in rows])
    eps_arr = np.array([r.eps for r in rows])
    if len(rows) >= 2 and np.all(errs > 1e-12):
        slope = float(np.polyfit(np.log(eps_arr), np.log(errs), 1)[0])
    else:
        slope = float("nan")
    return ScanReport(rows, slope, lipschitz, mt.mode)


# --- path functionals ------------------------------------------------------

@dataclass(frozen=True)
class PathFunctionalSpec:
    """A functional of the whole path, restricted to n equally spaced checkpoints.

    ``builder(n)`` returns the restriction as an expression in y1..yn.
    ``terminal_only`` marks functionals of x(T) alone (exact restriction).
    """

    name: str
    builder: Callable = field(compare=False)
    lipschitz: float = 1.0
    terminal_only: bool = False

    def __post_init__(self):
        if not self.lipschitz > 0:
            raise ValueError("Lipschitz constant must be positive")


def _running_max_abs(n):
    if n == 1:
        return "abs(y1)"
    return "max(" + ", ".join(f"abs(y{i})" for i in range(1, n + 1)) + ")"


PATH_FUNCTIONALS = {
    "terminal_abs": PathFunctionalSpec("terminal_abs", lambda n: f"abs(y{n})", 1.0, True),
    "running_max_abs": PathFunctionalSpec("running_max_abs", _running_max_abs, 1.0, False),
    "zero": PathFunctionalSpec("zero", lambda n: "0", 1.0, True),
}


@dataclass
class PathDiscretization:
    expr: str
    checkpoints: tuple
    budget: float
    budget_stderr: float
    exact: bool


def equally_spaced(horizon: float, n: int):
    return tuple(horizon * j / n for j in range(1, n + 1))


def cell_oscillation(sb: StateBatch, checkpoints) -> np.ndarray:
    """Per path, max over cells of sup |X(t) - X(t_j)| (node values inside the cell)."""
    grid = sb.grid
    t = grid.times
    out = np.zeros(sb.n_paths)
    prev = 0.0
    for tj in checkpoints:
        kj = int(round(tj / grid.dt))
        cell = (t >= prev - 1e-12) & (t <= tj + 1e-12)
        diff = np.abs(sb.X[:, cell] - sb.X[:, kj][:, None]).max(axis=(1, 2))
        out = np.maximum(out, diff)
        prev = tj
    return out


def discretize_path_functional(pf: PathFunctionalSpec | str, n: int, sb: StateBatch | None = None,
                               horizon: float | None = None) -> PathDiscretization:
    """Restriction to n checkpoints and the budget c E[max cell oscillation]."""
    if isinstance(pf, str):
        pf = PATH_FUNCTIONALS[pf]
    if n < 1:
        raise ValueError("need at least one checkpoint")
    T = horizon if horizon is not None else (sb.grid.horizon if sb is not None else 1.0)
    cps = equally_spaced(T, n)
    expr = pf.builder(n)
    if pf.terminal_only:
        return PathDiscretization(expr, cps, 0.0, 0.0, True)
    if sb is None:
        raise ValueError("a simulated state batch is needed for the discretisation budget")
    mean, se = mean_stderr(cell_oscillation(sb, cps))
    return PathDiscretization(expr, cps, pf.lipschitz * mean, pf.lipschitz * se, False)


# --- pipeline --------------------------------------------------------------

@dataclass
class NearOptimalReport:
    eps: float
    n: int
    value: float
    stderr: float
    budget: float
    measured_c: float
    gap: float
    control: ControlProcess
    scan: ScanReport
    trace: object = None

    def to_text(self):
        return (
            "[near-optimal pipeline]\n"
            f"eps: {self.eps:g}\ncheckpoints: {self.n}\n"
            f"optimised J^eps: {self.value:.10g} (stderr {self.stderr:.3g})\n"
            f"discretisation budget: {self.budget:.6g}\n"
            f"measured C: {self.measured_c:.6g}\n"
            f"optimiser gap: {self.gap:.3g}\n"
            f"near-optimal within {self.measured_c * self.eps + self.budget + max(self.gap, 0.0):.6g}"
            " = (measured C) eps + discretisation budget + optimiser gap\n"
        )


def near_optimal_pipeline(spec: ProblemSpec, pf: PathFunctionalSpec | str, n: int, eps: float,
                          wb: BrownianBatch, optimizer=None, init: ControlProcess | None = None,
                          rs=None, mollifier: MollifierSpec | None = None):
    """discretise -> mollify -> optimise -> certify."""
    from .optimize import OptimizerSpec, optimize_control

    if isinstance(pf, str):
        pf = PATH_FUNCTIONALS[pf]
    optimizer = optimizer or OptimizerSpec()
    horizon = spec.grid.horizon
    cps = equally_spaced(horizon, n)
    grid = build_time_grid(horizon, spec.grid.n_steps, cps)
    expr = pf.builder(n)
    prob = validate_problem(spec.replace(grid=grid, terminal_cost=expr, constraints=()))
    if init is None:
        init = ControlProcess.constant(grid, 0.5 * (prob.box.lo + prob.box.hi), prob.box)
    if pf.terminal_only:
        disc = PathDiscretization(expr, cps, 0.0, 0.0, True)
    else:
        disc = discretize_path_functional(pf, n, simulate_state(prob, init, wb), horizon)
    ms = mollifier or MollifierSpec(eps)
    if ms.eps != eps:
        ms = MollifierSpec(eps, ms.quadrature, ms.nodes, ms.samples, ms.seed)
    mt = MollifiedTerminal(prob.terminal, ms)
    ctrl, trace, ev = optimize_control(prob, init, optimizer, wb, rs, terminal=mt)
    sb = simulate_state(prob.with_terminal(mt), ctrl, wb)
    Y = sb.checkpoint_states()
    probes = np.concatenate([np.zeros((1,) + Y.shape[1:]), Y[:256]])
    scan = mollify_error_scan(prob.terminal, pf.lipschitz, (eps,), probes, ms)
    return NearOptimalReport(eps, n, ev.value, ev.stderr, disc.budget, scan.measured_c,
                             trace.final_gap, ctrl, scan, trace)


def describe(terminal: MollifiedTerminal) -> str:
    base = terminal.base
    src = to_str(base.expr) if isinstance(base, ExprTerminal) else repr(base)
    return f"{src} mollified at eps={terminal.spec.eps:g} ({terminal.mode}, {terminal.points} points)"
