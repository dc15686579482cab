"""Expectation constraints at checkpoints: Ekeland stages and multiplier extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import RegressionSpec, solve_adjoint
from .forward import (
    AlignmentError,
    BrownianBatch,
    ControlProcess,
    pathwise_cost,
    simulate_state,
)
from .mp import MPReport, check_necessary, grad_u_paths
from .optimize import Evaluation, OptimizerSpec, optimize_control, run_optimizer
from .problem import ValidatedProblem


class MultiplierError(ValueError):
    pass


class DegenerateStageError(RuntimeError):
    """J^theta vanished: the iterate is feasible and below the reference value."""


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Multipliers:
    """beta0 >= 0 on the cost; one beta per constraint slot.

    Upper-bound slots carry beta >= 0, lower-bound slots beta <= 0 (mirrored).
    """

    beta0: float
    betas: tuple = ()

    @property
    def vector(self):
        return np.array((self.beta0, *self.betas), dtype=float)

    def validate(self, problem: ValidatedProblem | None = None, tol: float = 1e-12):
        norm = float(np.sum(self.vector ** 2))
        if abs(norm - 1.0) > tol:
            raise MultiplierError(f"multipliers not on the unit sphere: |beta|^2 = {norm!r}")
        if self.beta0 < 0:
            raise MultiplierError(f"beta0 = {self.beta0} is negative")
        if problem is not None:
            if len(self.betas) != len(problem.slots):
                raise MultiplierError(f"{len(self.betas)} multipliers for {len(problem.slots)} slots")
            for b, slot in zip(self.betas, problem.slots):
                if b * slot.sign < -tol:
                    raise MultiplierError(f"multiplier {b} has the wrong sign for slot {slot.label}")
        return self


@dataclass(frozen=True)
class EkelandSchedule:
    theta0: float = 1.0
    decay: float = 0.5
    stages: int = 8

    def __post_init__(self):
        if not self.theta0 > 0:
            raise ValueError("theta0 must be positive")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.stages < 1:
            raise ValueError("at least one stage is required")

    @property
    def thetas(self):
        return [self.theta0 * self.decay ** k for k in range(self.stages)]


@dataclass
class StageRecord:
    stage: int
    theta: float
    control: ControlProcess
    value: float  # exact J^theta
    cost: float
    margins: tuple  # slot violations, positive = violated
    multipliers: Multipliers | None
    distance: float  # d~ to the previous stage control
    distance_start: float  # d~ to the initial control
    gap: float
    reference: float
    note: str = ""


@dataclass
class ConstrainedSolution:
    control: ControlProcess
    multipliers: Multipliers
    stages: list
    report: MPReport | None = None
    complementarity: float = float("nan")
    flags: list = field(default_factory=list)

    def stage_rows(self):
        for s in self.stages:
            beta = s.multipliers.vector.tolist() if s.multipliers else []
            yield (s.stage, s.theta, s.cost, list(s.margins), beta, s.distance, s.gap)


def metric_d(u1: ControlProcess, u2: ControlProcess) -> float:
    """E int |u1 - u2|^2 dt (no square root)."""
    if u1.grid != u2.grid:
        raise AlignmentError("controls live on different grids")
    if u1.kind == "feedback" or u2.kind == "feedback":
        raise AlignmentError("distance needs tabulated controls")
    a, b = u1.values, u2.values
    if a.ndim == 2:
        a = a[None]
    if b.ndim == 2:
        b = b[None]
    diff = a - b
    return float(u1.grid.dt * np.mean(np.sum(diff ** 2, axis=(1, 2))))


# --- J^theta ---------------------------------------------------------------

def _positive(x, width):
    if width <= 0:
        return np.maximum(x, 0.0), (np.asarray(x) > 0).astype(float)
    z = np.asarray(x, dtype=float) / width
    return width * np.logaddexp(0.0, z), 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ThetaTerms:
    cost_paths: np.ndarray
    phi_paths: np.ndarray  # [path, slot]
    cost: float
    margins: np.ndarray
    terms: np.ndarray  # positive parts, cost term first
    slopes: np.ndarray
    value: float

    def multipliers(self, problem) -> Multipliers:
        if self.value <= 0:
            raise DegenerateStageError("J^theta is zero; no multipliers can be extracted")
        w = self.terms * self.slopes / self.value
        signs = [slot.sign for slot in problem.slots]
        return Multipliers(float(w[0]), tuple(float(s * x) for s, x in zip(signs, w[1:])))


def theta_terms(problem: ValidatedProblem, sb, theta: float, reference: float,
                width: float = 0.0) -> ThetaTerms:
    cost_paths = pathwise_cost(problem, sb)
    Y = sb.checkpoint_states()
    phi = np.column_stack([slot.phi.value(Y) for slot in problem.slots]) if problem.slots \
        else np.zeros((sb.n_paths, 0))
    cost = float(cost_paths.mean())
    margins = np.array([slot.violation(phi[:, i].mean()) for i, slot in enumerate(problem.slots)])
    raw = np.concatenate([[cost - reference + theta], margins])
    terms, slopes = _positive(raw, width)
    return ThetaTerms(cost_paths, phi, cost, margins, terms, slopes,
                      float(math.sqrt(np.sum(terms ** 2))))


@dataclass
class PerturbedCost:
    value: float
    stderr: float
    penalty: float = 0.0


def perturbed_cost(problem: ValidatedProblem, control: ControlProcess, theta: float,
                   wb: BrownianBatch, reference: float = 0.0, anchor: ControlProcess | None = None,
                   workers: int = 1) -> PerturbedCost:
    """sqrt([(J - ref + theta)^+]^2 + sum_s [margin_s]^+^2), plus sqrt(theta) d~(anchor, u).

    The stderr is the delta-method linearisation at the sample means.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    sb = simulate_state(problem, control, wb, workers)
    tt = theta_terms(problem, sb, theta, reference)
    penalty = math.sqrt(theta) * metric_d(anchor, control) if anchor is not None else 0.0
    if tt.value > 0:
        w = tt.terms / tt.value
        signs = np.array([slot.sign for slot in problem.slots], dtype=float)
        lin = w[0] * tt.cost_paths + tt.phi_paths @ (w[1:] * signs)
        se = float(lin.std(ddof=1) / math.sqrt(len(lin))) if len(lin) > 1 else 0.0
    else:
        se = 0.0
    return PerturbedCost(tt.value + penalty, se, penalty)


def extract_multipliers(problem: ValidatedProblem, control: ControlProcess, theta: float,
                        wb: BrownianBatch, reference: float = 0.0) -> Multipliers:
    sb = simulate_state(problem, control, wb)
    return theta_terms(problem, sb, theta, reference).multipliers(problem)


# --- solver ----------------------------------------------------------------

def ekeland_slack(control: ControlProcess, anchor: ControlProcess, theta: float, box,
                  v_points: int, gap: float = 0.0):
    """Allowance [step, comp, v] for the proximal term 2 sqrt(theta)(u - anchor)(v - u)
    and for the stage's residual conditional-gradient gap."""
    u, a = control.values, anchor.values
    vgrid = box.grid(v_points)
    nv = max(len(g) for g in vgrid)
    out = np.zeros(u.shape + (nv,))
    for c, v in enumerate(vgrid):
        prox = 2.0 * math.sqrt(theta) * (u[:, c, None] - a[:, c, None]) * (v[None, :] - u[:, c, None])
        out[:, c, : len(v)] = np.maximum(prox, 0.0)
    return out + max(gap, 0.0) / control.grid.dt


def complementarity(problem: ValidatedProblem, multipliers: Multipliers, margins) -> float:
    """sum_s |beta_s| (gamma_s - E phi_s) at the extremal admissible gamma_s (the bound)."""
    return float(sum(b * slot.sign * (-m) for b, slot, m in zip(multipliers.betas, problem.slots, margins)))


def check_constrained_mp(problem: ValidatedProblem, sb, ab, multipliers: Multipliers,
                         v_points: int = 11, multiplier: float = 3.0, atol: float = 1e-6,
                         slack=None) -> MPReport:
    """check_necessary with H(beta0, .); the multipliers are validated first."""
    multipliers.validate(problem)
    if abs(ab.running_weight - multipliers.beta0) > 1e-12:
        raise MultiplierError("adjoint was solved with a different beta0")
    report = check_necessary(problem, sb, ab, v_points, multiplier, atol, multipliers.beta0, slack)
    if problem.slots:
        Y = sb.checkpoint_states()
        margins = [slot.violation(slot.phi.value(Y).mean()) for slot in problem.slots]
        report.notes.append(f"complementarity: {complementarity(problem, multipliers, margins):.6g}")
    return report


def solve_constrained(problem: ValidatedProblem, wb: BrownianBatch, init: ControlProcess,
                      schedule: EkelandSchedule = EkelandSchedule(),
                      optimizer: OptimizerSpec = OptimizerSpec(step_rule="lbfgs", max_iter=300, tol=1e-8),
                      rs: RegressionSpec | None = None, reference: float | None = None,
                      smoothing: float = 1e-3, v_points: int = 11, flag_beta0: float = 0.05,
                      log=None) -> ConstrainedSolution:
    """Minimise J^theta + sqrt(theta) d~(anchor, .) for a decreasing theta sequence.

    Each stage anchors on the previous stage's control. The reference value is
    ``reference`` if given, else the best feasible cost seen so far, else the
    cost at the stage's starting control.
    """
    rs = rs or RegressionSpec()
    grid = wb.grid
    if not init.deterministic:
        raise ValueError("constrained stages work on deterministic controls")

    if not problem.slots:
        ctrl, trace, ev = optimize_control(problem, init, optimizer, wb, rs)
        beta = Multipliers(1.0, ())
        rec = StageRecord(0, 0.0, ctrl, ev.value, ev.value, (), beta, metric_d(init, ctrl),
                          metric_d(init, ctrl), trace.final_gap, float("nan"),
                          "no constraints: unconstrained optimiser")
        sb = simulate_state(problem, ctrl, wb)
        ab = solve_adjoint(problem, sb, rs, beta)
        report = check_constrained_mp(problem, sb, ab, beta, v_points)
        return ConstrainedSolution(ctrl, beta, [rec], report, 0.0)

    start = ControlProcess.open_loop(grid, init.values, problem.box)
    anchor = start
    best_feasible = math.inf
    stages, last = [], None
    for si, theta in enumerate(schedule.thetas):
        sb0 = simulate_state(problem, anchor, wb)
        t0 = theta_terms(problem, sb0, theta, 0.0)
        if np.all(t0.margins <= 0):
            best_feasible = min(best_feasible, t0.cost)
        ref = reference if reference is not None else (
            best_feasible if math.isfinite(best_feasible) else t0.cost)
        width = smoothing * theta
        sq = math.sqrt(theta)
        a_vals = anchor.values

        def evaluate(u, theta=theta, ref=ref, width=width, sq=sq, a_vals=a_vals):
            ctrl = ControlProcess.open_loop(grid, u, problem.box, clamp=False)
            sb = simulate_state(problem, ctrl, wb)
            tt = theta_terms(problem, sb, theta, ref, width)
            pen = sq * grid.dt * float(np.sum((u - a_vals) ** 2))
            return Evaluation(tt.value + pen, 0.0, (sb, tt))

        def ascent(u, ev, sq=sq, a_vals=a_vals):
            sb, tt = ev.payload
            g = -2.0 * sq * (u - a_vals)
            if tt.value <= 0:
                return g, np.zeros_like(u)
            beta = tt.multipliers(problem)
            ab = solve_adjoint(problem, sb, rs, beta)
            for k in range(grid.n_steps):
                g[k] += grad_u_paths(problem, sb, ab, k).mean(axis=0)
            return g, np.zeros_like(u)

        try:
            u, ev, trace = run_optimizer(evaluate, ascent, anchor.values, problem.box,
                                                grid.dt, optimizer)
        except Exception as exc:
            raise StageError(si, exc) from exc
        ctrl = ControlProcess.open_loop(grid, u, problem.box)
        sb = ev.payload[0]
        exact = theta_terms(problem, sb, theta, ref)
        note = ""
        try:
            beta = exact.multipliers(problem)
        except DegenerateStageError as exc:
            beta, note = None, str(exc) + "; stage skipped"
        if np.all(exact.margins <= 0):
            best_feasible = min(best_feasible, exact.cost)
        rec = StageRecord(si, theta, ctrl, exact.value, exact.cost, tuple(exact.margins), beta,
                          metric_d(anchor, ctrl), metric_d(start, ctrl), trace.final_gap, ref, note)
        stages.append(rec)
        if log:
            log(rec)
        if beta is not None:
            last = (rec, anchor)
        anchor = ctrl

    if last is None:
        raise DegenerateStageError("every stage was degenerate; no multipliers extracted")
    rec, prev = last
    beta = rec.multipliers.validate(problem)
    sb = simulate_state(problem, rec.control, wb)
    ab = solve_adjoint(problem, sb, rs, beta)
    slack = ekeland_slack(rec.control, prev, rec.theta, problem.box, v_points, rec.gap)
    report = check_constrained_mp(problem, sb, ab, beta, v_points, slack=slack)
    flags = []
    if beta.beta0 < flag_beta0:
        flags.append("constraint-dominated multipliers")
    comp = complementarity(problem, beta, rec.margins)
    return ConstrainedSolution(rec.control, beta, stages, report, comp, flags)
