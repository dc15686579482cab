"""Command-line entry point.

Exit codes: 0 success or pass, 1 verification failure, 2 input error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .adjoint import RegressionSpec, solve_adjoint
from .config import ConfigError, config_hash, load_yaml, problem_from_config, section, set_dotted
from .constrained import EkelandSchedule, solve_constrained
from .forward import (
    ControlProcess,
    binomial_tree_batch,
    estimate_cost,
    pathwise_cost,
    sample_brownian,
    simulate_state,
)
from .mollify import PATH_FUNCTIONALS, MollifierSpec, mollify_error_scan, near_optimal_pipeline
from .mp import check_necessary, check_sufficient
from .optimize import STEP_RULES, OptimizerSpec, optimize_control
from .oracle import brute_force_oracle
from .problem import validate_problem
from .report import ensure_dir, write_csv, write_text

COMMANDS = ("simulate", "adjoint", "verify-mp", "verify-sufficient", "optimize", "constrained",
            "mollify-scan", "near-optimal", "oracle")

OK, FAILED, BAD_INPUT = 0, 1, 2


def _floats(text, flag):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}", flag) from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("problem and sampling")
    src.add_argument("--builtin", help="built-in problem name")
    src.add_argument("--config", help="YAML run configuration")
    src.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    src.add_argument("--seed", type=int, help="RNG seed (required here or in the config)")
    src.add_argument("--steps", type=int, help="number of time steps")
    src.add_argument("--workers", type=int, help="worker threads; never changes results")
    src.add_argument("--tree", action="store_true", help="use the exact binomial tree instead of sampling")
    src.add_argument("--candidate", help="analytic | feedback | oracle | constant:V[,V..] | expr:E[;E..]")
    src.add_argument("--degree", type=int, help="regression polynomial degree")
    src.add_argument("--out", help="output root (a subdirectory named by config hash is created)")
    src.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field by dotted path")

    p = argparse.ArgumentParser(prog="mtsmp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    sub.add_parser("simulate", parents=[common], help="simulate the state and estimate J") \
        .add_argument("--max-rows", type=int, default=1000, help="trajectory rows written")
    sub.add_parser("adjoint", parents=[common], help="solve the backward adjoint by regression")
    s = sub.add_parser("verify-mp", parents=[common], help="check the first-order condition")
    s.add_argument("--vpoints", type=int, help="v-grid points per component")
    s.add_argument("--mult", type=float, help="stderr multiplier")
    s = sub.add_parser("verify-sufficient", parents=[common], help="sampled sufficiency check")
    s.add_argument("--samples", type=int, help="midpoint samples")
    s = sub.add_parser("optimize", parents=[common], help="conditional-gradient optimisation")
    s.add_argument("--iters", type=int)
    s.add_argument("--rule", choices=STEP_RULES)
    s.add_argument("--ugrid", help="v-grid: point count or comma-separated levels")
    s = sub.add_parser("constrained", parents=[common], help="Ekeland stages with multipliers")
    s.add_argument("--stages", type=int)
    s = sub.add_parser("mollify-scan", parents=[common], help="mollifier error scan")
    s.add_argument("--expr", help="functional in y1..yn (default: the problem's terminal cost)")
    s.add_argument("--lipschitz", type=float, default=1.0)
    s.add_argument("--eps", default="0.2,0.1,0.05")
    s = sub.add_parser("near-optimal", parents=[common], help="discretise, mollify, optimise")
    s.add_argument("--functional", default="terminal_abs", choices=sorted(PATH_FUNCTIONALS))
    s.add_argument("--n", type=int, default=2, help="checkpoints used for the restriction")
    s.add_argument("--eps", default="0.1,0.05")
    s.add_argument("--iters", type=int)
    s = sub.add_parser("oracle", parents=[common], help="exhaustive search on the binomial tree")
    s.add_argument("--ugrid", help="point count or comma-separated levels")
    return p


def effective_config(args) -> dict:
    cfg = load_yaml(args.config) if args.config else {}
    if args.builtin:
        cfg["problem"] = {"builtin": args.builtin}
    for key in ("paths", "seed", "steps", "workers", "candidate"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.tree:
        cfg["tree"] = True
    if args.degree is not None:
        cfg.setdefault("regression", {})["degree"] = args.degree
    for a in args.set:
        set_dotted(cfg, a)
    cfg["command"] = args.command
    extra = {k: getattr(args, k) for k in ("vpoints", "mult", "samples", "iters", "rule", "ugrid",
                                           "stages", "expr", "lipschitz", "eps", "functional", "n",
                                           "max_rows") if getattr(args, k, None) is not None}
    if extra:
        cfg["options"] = {**(cfg.get("options") or {}), **extra}
    if "seed" not in cfg:
        raise ConfigError("a seed is required (--seed or 'seed:' in the config)", "seed")
    return cfg


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.opts = cfg.get("options") or {}
        self.seed = int(cfg["seed"])
        self.workers = int(cfg.get("workers", 1))
        if self.workers < 1:
            raise ConfigError("must be at least 1", "workers")
        standalone = cfg["command"] == "mollify-scan" and "problem" not in cfg \
            and (cfg.get("options") or {}).get("expr")
        if standalone:  # a bare expression needs no dynamics
            self.setup = self.problem = self.grid = None
        else:
            self.setup = problem_from_config(cfg, cfg.get("steps"))
            self.problem = validate_problem(self.setup.spec)
            self.grid = self.problem.grid
        self.tree = bool(cfg.get("tree", False))
        self.paths = int(cfg.get("paths", 10_000))
        if self.paths < 1:
            raise ConfigError("must be at least 1", "paths")
        reg = section(cfg, "regression", {"degree", "ridge", "max_condition"})
        self.rs = RegressionSpec(**reg)
        root = cfg.get("out") or "runs"
        self.dir = ensure_dir(os.path.join(root, config_hash(cfg)))
        g = self.grid
        self.meta = {
            "seed": self.seed,
            "grid": "none" if g is None else
                    f"T={g.horizon:g} N_t={g.n_steps} checkpoints={list(map(float, g.checkpoints))}",
            "paths": "tree" if self.tree else self.paths,
            "problem": "none" if self.setup is None else self.setup.builtin or self.setup.spec.name,
            "command": cfg["command"],
        }

    def path(self, name):
        return os.path.join(self.dir, name)

    def brownian(self):
        if self.tree:
            return binomial_tree_batch(self.grid, self.problem.d)
        return sample_brownian(self.grid, self.paths, self.seed, self.problem.d, self.workers)

    def candidate(self, default="analytic"):
        name = str(self.cfg.get("candidate", default))
        sol, grid, box = self.setup.solution, self.grid, self.problem.box
        if name == "analytic":
            if sol is None:
                return ControlProcess.constant(grid, 0.5 * (box.lo + box.hi), box, "midpoint")
            return ControlProcess.open_loop(grid, sol.control_values(grid), box, label="analytic")
        if name == "feedback":
            if sol is None or not hasattr(sol, "feedback"):
                raise ConfigError("no closed-form feedback for this problem", "candidate")
            return ControlProcess.feedback(grid, sol.feedback, box, "feedback")
        if name == "oracle":
            return brute_force_oracle(self.problem, self.levels(3))[0]
        if name.startswith("constant:"):
            vals = _floats(name.split(":", 1)[1], "candidate")
            if len(vals) != self.problem.k:
                raise ConfigError(f"need {self.problem.k} constant values", "candidate")
            return ControlProcess.constant(grid, vals, box, name)
        if name.startswith("expr:"):
            return ControlProcess.feedback_exprs(grid, name[5:].split(";"), self.problem, name)
        raise ConfigError(f"unknown candidate {name!r}", "candidate")

    def levels(self, default_points=11):
        ug = self.opts.get("ugrid")
        if ug is None:
            return default_points
        vals = _floats(ug, "--ugrid")
        if len(vals) == 1 and float(vals[0]).is_integer() and "," not in str(ug):
            return int(vals[0])
        return [vals] * self.problem.k


# --- subcommands -----------------------------------------------------------

def cmd_simulate(run: Run):
    wb = run.brownian()
    ctrl = run.candidate()
    sb = simulate_state(run.problem, ctrl, wb, run.workers)
    costs = pathwise_cost(run.problem, sb)
    est = estimate_cost(run.problem, sb)
    m = run.problem.m
    cols = ["path", "cost"] + [f"x{c + 1}[{k}]" if m > 1 else f"x[{k}]"
                               for k in range(run.grid.n_steps + 1) for c in range(m)]
    rows = ([i, float(costs[i])] + sb.X[i].ravel().tolist()
            for i in range(min(sb.n_paths, int(run.opts.get("max_rows", 1000)))))
    write_csv(run.path("trajectories.csv"), cols, rows, run.meta)
    text = f"[simulation]\ncandidate: {ctrl.label}\nJ: {est}\n"
    write_text(run.path("summary.txt"), text, run.meta)
    print(text, end="")
    return OK


def cmd_adjoint(run: Run):
    wb = run.brownian()
    ctrl = run.candidate()
    sb = simulate_state(run.problem, ctrl, wb, run.workers)
    ab = solve_adjoint(run.problem, sb, run.rs)
    m, d = run.problem.m, run.problem.d
    cols = ["step", "t"] + [f"p{i + 1}" for i in range(m)] + \
        [f"q{i + 1}_{w + 1}" for i in range(m) for w in range(d)]
    rows = []
    for k in range(run.grid.n_steps):
        rows.append([k, float(run.grid.times[k])] + ab.p_step[:, k].mean(axis=0).tolist()
                    + ab.q[:, k].mean(axis=0).ravel().tolist())
    write_csv(run.path("adjoint.csv"), cols, rows, run.meta)
    text = "[adjoint]\n" + f"candidate: {ctrl.label}\nregression degree: {run.rs.degree}\n"
    sol = run.setup.solution
    if sol is not None and ctrl.label == "analytic":
        try:
            p, q, _ = sol.adjoint(wb)
        except NotImplementedError:
            p = None
        if p is not None:
            rp = np.sqrt(np.mean((ab.p[:, :-1] - p[:, :-1]) ** 2)) / max(np.sqrt(np.mean(p ** 2)), 1e-300)
            rq = np.sqrt(np.mean((ab.q - q) ** 2)) / max(np.sqrt(np.mean(q ** 2)), 1e-300)
            text += f"relative RMSE vs closed form: p {rp:.4g}, q {rq:.4g}\n"
    write_text(run.path("adjoint.txt"), text, run.meta)
    print(text, end="")
    return OK


def cmd_verify_mp(run: Run):
    wb = run.brownian()
    ctrl = run.candidate()
    sb = simulate_state(run.problem, ctrl, wb, run.workers)
    ab = solve_adjoint(run.problem, sb, run.rs)
    rep = check_necessary(run.problem, sb, ab, int(run.opts.get("vpoints", 11)),
                          float(run.opts.get("mult", 3.0)))
    write_csv(run.path("mp_estimates.csv"), ["step", "t", "component", "v", "estimate", "stderr"],
              rep.rows(), run.meta)
    write_text(run.path("mp_report.txt"), rep.to_text(), run.meta)
    print(rep.to_text(), end="")
    return OK if rep.passed else FAILED


def cmd_verify_sufficient(run: Run):
    wb = run.brownian()
    ctrl = run.candidate()
    sb = simulate_state(run.problem, ctrl, wb, run.workers)
    ab = solve_adjoint(run.problem, sb, run.rs)
    rep = check_sufficient(run.problem, sb, ab, int(run.opts.get("samples", 10_000)), run.seed)
    write_text(run.path("sufficiency.txt"), rep.to_text(), run.meta)
    rows = [(sv.name, sv.passed, sv.worst, sv.samples) for sv in (rep.convexity, rep.concavity, rep.hmax)]
    write_csv(run.path("sufficiency.csv"), ["check", "passed", "worst", "samples"], rows, run.meta)
    print(rep.to_text(), end="")
    return OK if rep.certified else FAILED


def _optimizer_spec(run: Run, **defaults):
    sec = section(run.cfg, "optimizer", {"max_iter", "step_rule", "grid_points", "tol",
                                         "armijo_c", "min_step"})
    sec = {**defaults, **sec}
    if "iters" in run.opts:
        sec["max_iter"] = int(run.opts["iters"])
    if "rule" in run.opts:
        sec["step_rule"] = run.opts["rule"]
    lv = run.levels(sec.get("grid_points", 11))
    if isinstance(lv, int):
        sec["grid_points"] = lv
    else:
        sec["levels"] = tuple(tuple(x) for x in lv)
    return OptimizerSpec(**sec)


def cmd_optimize(run: Run):
    spec = _optimizer_spec(run)
    wb = run.brownian()
    box = run.problem.box
    init = run.candidate(default=f"constant:{','.join(repr(float(v)) for v in 0.5 * (box.lo + box.hi))}")
    ctrl, trace, ev = optimize_control(run.problem, init, spec, wb, run.rs)
    k = run.problem.k
    write_csv(run.path("control.csv"), ["step", "t"] + [f"u{j + 1}" for j in range(k)],
              ([i, float(run.grid.times[i])] + ctrl.values[i].tolist() for i in range(run.grid.n_steps)),
              run.meta)
    write_csv(run.path("trace.csv"), ["iteration", "value", "stderr", "gap", "step"], trace.rows, run.meta)
    flat = trace.flat_intervals(run.grid)
    text = ("[optimisation]\n"
            f"step rule: {spec.step_rule}\niterations: {len(trace.rows) - 1}\n"
            f"final value: {ev.value!r} (stderr {ev.stderr:.3g})\n"
            f"final gap: {trace.final_gap:.3g}\nstop: {trace.reason}\n")
    for a, b in flat:
        text += f"flat Hamiltonian on [{a:g}, {b:g}): stationary, not unique\n"
    write_text(run.path("optimize.txt"), text, run.meta)
    print(text, end="")
    return OK


def cmd_constrained(run: Run):
    if not run.problem.slots:
        raise ConfigError("the problem declares no constraints", "problem.constraints")
    sched = EkelandSchedule(**section(run.cfg, "schedule", {"theta0", "decay", "stages"}))
    if "stages" in run.opts:
        sched = EkelandSchedule(sched.theta0, sched.decay, int(run.opts["stages"]))
    spec = _optimizer_spec(run, step_rule="lbfgs", max_iter=300, tol=1e-8)
    ref = (run.cfg.get("constrained") or {}).get("reference")
    wb = run.brownian()
    init = run.candidate()
    sol = solve_constrained(run.problem, wb, init, sched, spec, run.rs,
                            None if ref is None else float(ref))
    labels = [s.label for s in run.problem.slots]
    cols = ["stage", "theta", "cost"] + [f"margin[{l}]" for l in labels] + \
        ["beta0"] + [f"beta[{l}]" for l in labels] + ["distance", "gap"]
    rows = []
    for s in sol.stages:
        beta = s.multipliers.vector.tolist() if s.multipliers else [float("nan")] * (len(labels) + 1)
        rows.append([s.stage, s.theta, s.cost] + list(map(float, s.margins)) + beta + [s.distance, s.gap])
    write_csv(run.path("stages.csv"), cols, rows, run.meta)
    b = sol.multipliers
    text = ("[constrained]\n"
            f"multipliers: beta0={b.beta0!r} " + " ".join(f"{l}={v!r}" for l, v in zip(labels, b.betas)) + "\n"
            f"complementarity: {sol.complementarity:.6g}\n"
            + "".join(f"flag: {f}\n" for f in sol.flags) + sol.report.to_text())
    write_text(run.path("constrained.txt"), text, run.meta)
    print(text, end="")
    return OK if sol.report.passed else FAILED


def cmd_mollify_scan(run: Run):
    expr = run.opts.get("expr") or run.setup.spec.terminal_cost
    eps = _floats(run.opts.get("eps", "0.2,0.1,0.05"), "--eps")
    if any(e <= 0 for e in eps):
        raise ConfigError("must be positive", "--eps")
    rep = mollify_error_scan(expr, float(run.opts.get("lipschitz", 1.0)), eps)
    write_csv(run.path("scan.csv"), ["eps", "sup_error", "bound", "measured_c"],
              ((r.eps, r.sup_error, r.bound, r.measured_c) for r in rep.rows), run.meta)
    write_text(run.path("scan.txt"), rep.to_text(), run.meta)
    print(rep.to_text(), end="")
    return OK if rep.passed else FAILED


def cmd_near_optimal(run: Run):
    eps = _floats(run.opts.get("eps", "0.1,0.05"), "--eps")
    spec = _optimizer_spec(run)
    wb = run.brownian()
    reps = [near_optimal_pipeline(run.setup.spec, run.opts.get("functional", "terminal_abs"),
                                  int(run.opts.get("n", 2)), e, wb, spec, rs=run.rs) for e in eps]
    write_csv(run.path("near_optimal.csv"), ["eps", "value", "stderr", "budget", "measured_c", "gap"],
              ((r.eps, r.value, r.stderr, r.budget, r.measured_c, r.gap) for r in reps), run.meta)
    text = "".join(r.to_text() for r in reps)
    write_text(run.path("near_optimal.txt"), text, run.meta)
    print(text, end="")
    return OK


def cmd_oracle(run: Run):
    lv = run.levels(3)
    ctrl, value = brute_force_oracle(run.problem, lv)
    k = run.problem.k
    write_csv(run.path("oracle.csv"), ["step", "t"] + [f"u{j + 1}" for j in range(k)],
              ([i, float(run.grid.times[i])] + ctrl.values[i].tolist() for i in range(run.grid.n_steps)),
              run.meta)
    text = f"[oracle]\nexact tree value: {value!r}\n"
    write_text(run.path("oracle.txt"), text, run.meta)
    print(text, end="")
    return OK


DISPATCH = {
    "simulate": cmd_simulate,
    "adjoint": cmd_adjoint,
    "verify-mp": cmd_verify_mp,
    "verify-sufficient": cmd_verify_sufficient,
    "optimize": cmd_optimize,
    "constrained": cmd_constrained,
    "mollify-scan": cmd_mollify_scan,
    "near-optimal": cmd_near_optimal,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return OK if exc.code in (0, None) else BAD_INPUT
    if args.command is None:
        parser.print_help(sys.stderr)
        return BAD_INPUT
    try:
        cfg = effective_config(args)
        if args.out:
            cfg["out"] = args.out
        run = Run(cfg)
        status = DISPATCH[args.command](run)
    except ValueError as exc:  # config, expression, problem and alignment errors
        print(f"input error: {exc}", file=sys.stderr)
        return BAD_INPUT
    print(f"artifacts: {run.dir}")
    return status


if __name__ == "__main__":
    sys.exit(main())
