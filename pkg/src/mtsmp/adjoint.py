"""Backward adjoint (p, q) with checkpoint jumps, by least-squares regression."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .expr import Num
from .forward import (
    AlignmentError,
    BrownianBatch,
    StateBatch,
    VariationalBatch,
    _direction_values,
    mean_stderr,
)
from .problem import ProblemError, ValidatedProblem, WeightedTerminal


class RegressionError(RuntimeError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class RegressionSpec:
    """Polynomials of total degree <= ``degree`` in the current state and past checkpoint states."""

    degree: int = 2
    ridge: float = 1e-8
    max_condition: float = 1e14

    def __post_init__(self):
        if self.degree < 0 or int(self.degree) != self.degree:
            raise ValueError("regression degree must be a non-negative integer")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")


class Projector:
    """Least-squares projection on a polynomial basis of the given features.

    Features are standardised, deterministic or duplicate columns dropped,
    and the intercept is fitted exactly (sample mean) so only the centred
    monomials see the ridge term.
    """

    def __init__(self, features: np.ndarray, spec: RegressionSpec):
        n = features.shape[0]
        cols = []
        for j in range(features.shape[1]):
            c = features[:, j]
            mu = c.mean()
            sd = c.std()
            if sd <= 1e-12 * max(1.0, abs(mu)):
                continue
            z = (c - mu) / sd
            if any(np.array_equal(z, other) for other in cols):
                continue
            cols.append(z)
        self.n = n
        self.k = 0
        self.condition = 1.0
        if spec.degree == 0 or not cols:
            return
        Z = np.column_stack(cols)
        basis = []
        for deg in range(1, spec.degree + 1):
            for combo in itertools.combinations_with_replacement(range(Z.shape[1]), deg):
                basis.append(np.prod(Z[:, combo], axis=1))
        B = np.column_stack(basis)
        B -= B.mean(axis=0)
        G = B.T @ B / n
        if spec.ridge > 0:
            G[np.diag_indices_from(G)] += spec.ridge
        self.condition = float(np.linalg.cond(G))
        if not np.isfinite(self.condition) or self.condition > spec.max_condition:
            raise RegressionError(
                f"regression normal matrix is numerically singular "
                f"(condition estimate {self.condition:.3g}); increase ridge or lower degree",
                self.condition,
            )
        try:
            self.factor = cho_factor(G)
        except LinAlgError as exc:
            raise RegressionError(f"normal matrix not positive definite: {exc}", self.condition)
        self.B = B
        self.k = B.shape[1]

    def fit(self, target: np.ndarray) -> np.ndarray:
        """Fitted values of E[target | features]; ``target`` is [path, ...]."""
        shape = target.shape
        Y = target.reshape(shape[0], -1)
        mean = Y.mean(axis=0)
        out = np.broadcast_to(mean, Y.shape).copy()
        if self.k and np.any(Y != 0):
            coef = cho_solve(self.factor, self.B.T @ (Y - mean) / self.n)
            out += self.B @ coef
        return out.reshape(shape)


@dataclass(frozen=True, eq=False)
class AdjointBatch:
    p: np.ndarray  # [path, node, i]; left limit at checkpoint nodes
    q: np.ndarray  # [path, step, i, w]
    p_step: np.ndarray  # [path, step, i], continuation value used inside step k
    p_right: dict  # checkpoint index -> [path, i]
    jumps: dict  # checkpoint index -> [path, i]
    checkpoint_nodes: tuple
    running_weight: float = 1.0
    terminal: object = field(default=None, repr=False)
    source: str = "regression"

    def p_left(self, i):
        return self.p[:, self.checkpoint_nodes[i]]


def weighted_terminal(problem: ValidatedProblem, multipliers=None):
    """beta0 * Psi + sum_s beta_s * phi_s; plain Psi without multipliers."""
    if multipliers is None:
        return problem.terminal, 1.0
    betas = list(multipliers.betas)
    if len(betas) != len(problem.slots):
        raise ProblemError(f"{len(betas)} constraint multipliers for {len(problem.slots)} slots")
    terms = [(multipliers.beta0, problem.terminal)]
    terms += [(b, slot.phi) for b, slot in zip(betas, problem.slots)]
    return WeightedTerminal(terms), float(multipliers.beta0)


def solve_adjoint(problem: ValidatedProblem, sb: StateBatch, rs: RegressionSpec | None = None,
                  multipliers=None) -> AdjointBatch:
    """Explicit backward scheme.

    For each step k (top down), with c_k = E[p_{k+1} | F_k]:
        q_k = E[(p_{k+1} - c_k) dW_k | F_k] / dt
        p_k = c_k + dt (b_x^T c_k + sum_j s^j_x^T q^j_k - w0 f_x)
    and at checkpoint node k(i) the jump -E[G_i(Y) | F_{t_i}] is added, where G_i
    is the y_i-gradient of the (possibly multiplier-weighted) terminal functional.
    """
    rs = rs or RegressionSpec()
    grid = sb.grid
    if sb.X.shape[2] != problem.m:
        raise AlignmentError("state batch dimension does not match the problem")
    terminal, w0 = weighted_terminal(problem, multipliers)
    if not terminal.smooth:
        raise ProblemError("terminal functional is not differentiable; mollify it first")
    N, dt, times = grid.n_steps, grid.dt, grid.times
    nodes = list(grid.checkpoint_nodes)
    n_paths, m, d = sb.n_paths, problem.m, problem.d
    dW = sb.brownian.dW
    Y = sb.checkpoint_states()
    G = terminal.gradient(Y)  # [path, i, c]

    p = np.empty((n_paths, N + 1, m))
    q = np.zeros((n_paths, N, m, d))
    p_step = np.empty((n_paths, N, m))
    p_right, jumps = {}, {}

    def features(k, upto):
        past = [sb.X[:, nodes[j]] for j in range(upto) if nodes[j] < k]
        return np.concatenate([sb.X[:, k]] + past, axis=1)

    n_cp = len(nodes)
    p_right[n_cp - 1] = np.zeros((n_paths, m))
    jumps[n_cp - 1] = -G[:, n_cp - 1]  # F_T-measurable: no projection needed
    p[:, N] = jumps[n_cp - 1]
    ci = n_cp - 2
    skip_drift = problem.x_free and all(isinstance(e, Num) and e.value == 0
                                        for e in problem.running_x)

    for k in range(N - 1, -1, -1):
        proj = Projector(features(k, n_cp), rs)
        target = p[:, k + 1]
        cont = proj.fit(target)
        resid = target - cont
        qk = proj.fit(resid[:, :, None] * dW[:, k][:, None, :] / dt)
        q[:, k] = qk
        p_step[:, k] = cont
        if skip_drift:
            pk = cont.copy()
        else:
            der = problem.derivatives(times[k], sb.X[:, k], sb.U[:, k])
            pk = cont + dt * (
                np.einsum("nli,nl->ni", der["b_x"], cont)
                + np.einsum("nlwi,nlw->ni", der["s_x"], qk)
                - w0 * der["f_x"]
            )
        if ci >= 0 and k == nodes[ci]:
            p_right[ci] = pk
            jp = Projector(np.concatenate([sb.X[:, nodes[j]] for j in range(ci + 1)], axis=1), rs)
            jumps[ci] = -jp.fit(G[:, ci])
            pk = pk + jumps[ci]
            ci -= 1
        p[:, k] = pk

    return AdjointBatch(p, q, p_step, p_right, jumps, tuple(nodes), w0, terminal)


def analytic_adjoint(name: str, wb: BrownianBatch, beta=None, solution=None) -> AdjointBatch:
    """Closed-form (p, q) of a built-in evaluated on the Brownian paths."""
    from .builtins import builtin_problem

    if solution is None:
        _, solution = builtin_problem(name, wb.grid.n_steps)
    if solution is None or not hasattr(solution, "adjoint"):
        raise ProblemError(f"no closed-form adjoint stored for {name!r}")
    try:
        p, q, right = solution.adjoint(wb, beta)
    except NotImplementedError:
        raise ProblemError(f"no closed-form adjoint stored for {name!r}") from None
    nodes = list(wb.grid.checkpoint_nodes)
    p_step = p[:, 1:].copy()
    # inside step k the continuation value is the right limit at node k
    for i, node in enumerate(nodes[:-1]):
        p_step[:, node] = right[i]
    for k in range(p_step.shape[1]):
        if k not in nodes:
            p_step[:, k] = p[:, k]
    jumps = {i: p[:, nodes[i]] - right[i] for i in range(len(nodes))}
    w0 = 1.0 if beta is None else float(beta[0])
    return AdjointBatch(p, q, p_step, right, jumps, tuple(nodes), w0, None, "analytic")


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    residual: float
    stderr: float

    def within(self, mult=3.0, bias=0.0):
        return self.residual <= mult * self.stderr + bias


def duality_paths(problem: ValidatedProblem, ab: AdjointBatch, sb: StateBatch,
                  vb: VariationalBatch, terminal=None):
    """Pathwise left and right sides of the summed duality identity."""
    grid = sb.grid
    terminal = terminal or ab.terminal or problem.terminal
    w0 = ab.running_weight
    nodes = list(grid.checkpoint_nodes)
    G = terminal.gradient(sb.checkpoint_states())
    lhs = -np.einsum("nic,nic->n", G, vb.y[:, nodes])
    rhs = np.zeros(sb.n_paths)
    for k in range(grid.n_steps):
        der = problem.derivatives(grid.times[k], sb.X[:, k], sb.U[:, k])
        v = np.broadcast_to(_direction_values(vb.direction, sb, k), der["f_u"].shape)
        fu_v = np.einsum("nj,nj->n", der["f_u"], v)
        lhs -= w0 * (np.einsum("nl,nl->n", der["f_x"], vb.y[:, k]) + fu_v) * grid.dt
        rhs += (
            np.einsum("nij,ni,nj->n", der["b_u"], ab.p_step[:, k], v)
            + np.einsum("niwj,niw,nj->n", der["s_u"], ab.q[:, k], v)
            - w0 * fu_v
        ) * grid.dt
    return lhs, rhs


def duality_residual(problem: ValidatedProblem, ab: AdjointBatch, sb: StateBatch,
                     vb: VariationalBatch) -> DualityReport:
    lhs, rhs = duality_paths(problem, ab, sb, vb)
    _, se = mean_stderr(lhs - rhs)
    return DualityReport(float(lhs.mean()), float(rhs.mean()),
                         float(abs(lhs.mean() - rhs.mean())), se)
