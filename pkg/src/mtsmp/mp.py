"""Hamiltonian and the sampled first-order / sufficiency checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointBatch
from .forward import StateBatch
from .problem import ValidatedProblem


def hamiltonian(problem: ValidatedProblem, t, x, u, p, q, beta0: float = 1.0) -> np.ndarray:
    """H = b^T p + sum_j sigma^j^T q^j - beta0 f, one value per row."""
    b = problem.drift_value(t, x, u)
    s = problem.diffusion_value(t, x, u)
    f = problem.running_value(t, x, u)
    return np.einsum("ni,ni->n", b, p) + np.einsum("niw,niw->n", s, q) - beta0 * f


def hamiltonian_grad_u(problem: ValidatedProblem, t, x, u, p, q, beta0: float = 1.0):
    der = problem.derivatives(t, x, u)
    return (np.einsum("nij,ni->nj", der["b_u"], p)
            + np.einsum("niwj,niw->nj", der["s_u"], q)
            - beta0 * der["f_u"])


def hamiltonian_grad_x(problem: ValidatedProblem, t, x, u, p, q, beta0: float = 1.0):
    der = problem.derivatives(t, x, u)
    return (np.einsum("nil,ni->nl", der["b_x"], p)
            + np.einsum("niwl,niw->nl", der["s_x"], q)
            - beta0 * der["f_x"])


def grad_u_paths(problem, sb: StateBatch, ab: AdjointBatch, k: int, beta0=None):
    """H_u along the paths inside step k, using the step's continuation value."""
    w0 = ab.running_weight if beta0 is None else beta0
    x = sb.X[:, k]
    u = np.broadcast_to(sb.U[:, k], (sb.n_paths, problem.k))
    return hamiltonian_grad_u(problem, sb.grid.times[k], x, u, ab.p_step[:, k], ab.q[:, k], w0)


def flat_steps(problem, sb: StateBatch, ab: AdjointBatch, atol: float = 1e-6, beta0=None):
    """Steps where H does not depend on u: moving any component to either box
    edge changes H by at most atol on average over paths."""
    w0 = ab.running_weight if beta0 is None else beta0
    grid = sb.grid
    out = np.ones(grid.n_steps, dtype=bool)
    for k in range(grid.n_steps):
        t, x = grid.times[k], sb.X[:, k]
        u = np.array(np.broadcast_to(sb.U[:, k], (sb.n_paths, problem.k)))
        p, q = ab.p_step[:, k], ab.q[:, k]
        h0 = hamiltonian(problem, t, x, u, p, q, w0)
        for c in range(problem.k):
            for edge in (problem.box.lo[c], problem.box.hi[c]):
                v = u.copy()
                v[:, c] = edge
                if np.mean(np.abs(hamiltonian(problem, t, x, v, p, q, w0) - h0)) > atol:
                    out[k] = False
                    break
            if not out[k]:
                break
    return out


# --- necessary condition ---------------------------------------------------

@dataclass
class IntervalResult:
    index: int
    t_start: float
    t_end: float
    worst: float
    stderr: float
    t_at: float
    v_at: float
    component: int
    passed: bool
    flat: bool


@dataclass
class MPReport:
    intervals: list
    estimates: np.ndarray  # [step, component, v]
    stderrs: np.ndarray
    v_grid: list
    times: np.ndarray
    multiplier: float
    atol: float
    slack: np.ndarray | None = None
    beta0: float = 1.0
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(iv.passed for iv in self.intervals)

    @property
    def worst(self) -> float:
        return max(iv.worst for iv in self.intervals)

    def estimate_at(self, interval: int, v: float, component: int = 0):
        """Average over the interval's steps of the estimate at the grid point nearest v."""
        iv = self.intervals[interval]
        steps = [k for k in range(len(self.times) - 1)
                 if iv.t_start - 1e-12 <= self.times[k] < iv.t_end - 1e-12]
        j = int(np.argmin(np.abs(self.v_grid[component] - v)))
        return float(self.estimates[steps, component, j].mean())

    def rows(self):
        for k in range(self.estimates.shape[0]):
            for c in range(self.estimates.shape[1]):
                for j, v in enumerate(self.v_grid[c]):
                    yield (k, self.times[k], c + 1, v, self.estimates[k, c, j], self.stderrs[k, c, j])

    def to_text(self) -> str:
        lines = ["[maximum-principle check]",
                 f"rule: estimate <= {self.multiplier:g} * stderr + {self.atol:g}"
                 + (" + proximal slack" if self.slack is not None else ""),
                 f"beta0: {self.beta0:.12g}"]
        for iv in self.intervals:
            lines.append(
                f"interval {iv.index} ({iv.t_start:g}, {iv.t_end:g}): worst {iv.worst:.6g} "
                f"(stderr {iv.stderr:.3g}) at t={iv.t_at:g}, v={iv.v_at:g}, component {iv.component + 1}"
                f" -> {'pass' if iv.passed else 'FAIL'}"
                + ("; H_u flat: stationary, not unique" if iv.flat else "")
            )
        lines.extend(self.notes)
        lines.append(f"verdict: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def check_necessary(problem: ValidatedProblem, sb: StateBatch, ab: AdjointBatch,
                    v_points: int = 11, multiplier: float = 3.0, atol: float = 1e-6,
                    beta0: float | None = None, slack: np.ndarray | None = None) -> MPReport:
    """Estimate E[H_u (v - u)] on every step and v-grid point, per open interval.

    Steps are the open cells (s_k, s_{k+1}); none of them straddles a checkpoint,
    so only right limits of p enter at checkpoint nodes. Components are varied one
    at a time: the expectation is separable in v, so the worst point of the product
    grid is the sum of the per-component worst points.

    ``atol`` is a numerical floor for the ridge-shrinkage residue of the regression.
    The stderr is over paths at fixed regression coefficients; for adapted
    candidates the coefficient error is not included.
    """
    grid = sb.grid
    vgrid = problem.box.grid(v_points)
    nv = max(len(g) for g in vgrid)
    N = grid.n_steps
    est = np.full((N, problem.k, nv), -np.inf)
    se = np.zeros((N, problem.k, nv))
    w0 = ab.running_weight if beta0 is None else beta0
    flat = flat_steps(problem, sb, ab, atol, w0)
    for k in range(N):
        hu = grad_u_paths(problem, sb, ab, k, w0)
        u = np.broadcast_to(sb.U[:, k], hu.shape)
        for c in range(problem.k):
            v = vgrid[c]
            vals = hu[:, c, None] * (v[None, :] - u[:, c, None])
            est[k, c, : len(v)] = vals.mean(axis=0)
            se[k, c, : len(v)] = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0]) if vals.shape[0] > 1 else 0

    allow = multiplier * se + atol
    if slack is not None:
        allow = allow + slack
    ok = est <= allow

    intervals = []
    bounds = [0] + list(grid.checkpoint_nodes)
    for i in range(len(bounds) - 1):
        a, b = bounds[i], bounds[i + 1]
        if b <= a:
            continue
        block = est[a:b]
        idx = np.unravel_index(int(np.argmax(block)), block.shape)
        k = a + idx[0]
        intervals.append(IntervalResult(
            index=i,
            t_start=grid.times[a],
            t_end=grid.times[b],
            worst=float(block[idx]),
            stderr=float(se[k, idx[1], idx[2]]),
            t_at=float(grid.times[k]),
            v_at=float(vgrid[idx[1]][idx[2]]),
            component=int(idx[1]),
            passed=bool(np.all(ok[a:b])),
            flat=bool(np.all(flat[a:b])),
        ))
    notes = []
    if sb.U.shape[0] > 1:
        notes.append("note: adapted candidate; regression-coefficient error is not in the stderr")
    return MPReport(intervals, est, se, vgrid, grid.times, multiplier, atol, slack, w0, notes)


# --- sufficiency -----------------------------------------------------------

@dataclass
class SubVerdict:
    name: str
    passed: bool
    worst: float
    samples: int
    detail: str = ""


@dataclass
class SufficiencyReport:
    convexity: SubVerdict
    concavity: SubVerdict
    hmax: SubVerdict

    @property
    def certified(self) -> bool:
        return self.convexity.passed and self.concavity.passed and self.hmax.passed

    def to_text(self) -> str:
        lines = ["[sufficiency check] (sampled, not proved)"]
        for sv in (self.convexity, self.concavity, self.hmax):
            lines.append(f"{sv.name}: {'pass' if sv.passed else 'FAIL'} "
                         f"(worst {sv.worst:.4g} over {sv.samples} samples){' ' + sv.detail if sv.detail else ''}")
        if self.certified:
            lines.append("conclusion: certified optimal up to sampling")
        else:
            lines.append("conclusion: inconclusive (sufficient conditions not all met; "
                         "the necessary condition is checked separately)")
        return "\n".join(lines) + "\n"


def _state_box(sb: StateBatch):
    Y = sb.checkpoint_states().reshape(sb.n_paths, -1)
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    pad = 0.1 * (hi - lo) + 1e-3
    return lo - pad, hi + pad


def check_sufficient(problem: ValidatedProblem, sb: StateBatch, ab: AdjointBatch,
                     samples: int = 10_000, seed: int = 0, box=None, v_points: int = 11,
                     tol: float = 1e-9, hmax_tol: float = 1e-4) -> SufficiencyReport:
    """(a) midpoint convexity of the terminal cost, (b) midpoint concavity of H in (x, u)
    at fixed (p, q), (c) the candidate maximises H over the v-grid."""
    rng = np.random.default_rng(seed)
    n, m = problem.n, problem.m

    # (a)
    lo, hi = box if box is not None else _state_box(sb)
    z1 = rng.uniform(lo, hi, (samples, lo.size)).reshape(samples, n, m)
    z2 = rng.uniform(lo, hi, (samples, lo.size)).reshape(samples, n, m)
    t = problem.terminal
    f1, f2, fm = t.value(z1), t.value(z2), t.value(0.5 * (z1 + z2))
    avg = 0.5 * (f1 + f2)
    excess = fm - avg - tol * np.maximum(1.0, np.abs(avg))
    j = int(np.argmax(excess))
    conv = SubVerdict("terminal cost midpoint convexity", bool(excess[j] <= 0), float(excess[j]),
                      samples, "" if excess[j] <= 0 else
                      f"violated between {z1[j].ravel().round(4).tolist()} and {z2[j].ravel().round(4).tolist()}")

    # (b) and (c) at sampled (path, step) pairs
    grid = sb.grid
    paths = rng.integers(0, sb.n_paths, samples)
    steps = rng.integers(0, grid.n_steps, samples)
    times = grid.times[steps]
    P = ab.p_step[paths, steps]
    Q = ab.q[paths, steps]
    w0 = ab.running_weight
    X = sb.X[paths, steps]
    U = sb.U[paths if sb.U.shape[0] > 1 else np.zeros_like(paths), steps]
    h = problem.spec.sample_halfwidth
    x1 = X + rng.uniform(-h, h, X.shape)
    x2 = X + rng.uniform(-h, h, X.shape)
    u1 = rng.uniform(problem.box.lo, problem.box.hi, U.shape)
    u2 = rng.uniform(problem.box.lo, problem.box.hi, U.shape)
    H1 = hamiltonian(problem, times, x1, u1, P, Q, w0)
    H2 = hamiltonian(problem, times, x2, u2, P, Q, w0)
    Hm = hamiltonian(problem, times, 0.5 * (x1 + x2), 0.5 * (u1 + u2), P, Q, w0)
    avg = 0.5 * (H1 + H2)
    short = avg - Hm - tol * np.maximum(1.0, np.abs(avg))
    j = int(np.argmax(short))
    conc = SubVerdict("Hamiltonian midpoint concavity in (x, u)", bool(short[j] <= 0), float(short[j]), samples)

    # (c)
    H0 = hamiltonian(problem, times, X, U, P, Q, w0)
    vg = problem.box.grid(v_points)
    mesh = np.stack(np.meshgrid(*vg, indexing="ij"), axis=-1).reshape(-1, problem.k)
    best = np.full(samples, -np.inf)
    for v in mesh:
        Hv = hamiltonian(problem, times, X, np.broadcast_to(v, U.shape), P, Q, w0)
        best = np.maximum(best, Hv)
    gain = best - H0 - hmax_tol * np.maximum(1.0, np.abs(H0))
    j = int(np.argmax(gain))
    hmax = SubVerdict("Hamiltonian maximum at the candidate", bool(gain[j] <= 0),
                      float(best[j] - H0[j]), samples,
                      f"(tolerance {hmax_tol:g} relative)")
    return SufficiencyReport(conv, conc, hmax)
