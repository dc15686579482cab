"""Run configuration: YAML document, dotted-path overrides, content hash."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import yaml

from .builtins import BUILTINS, builtin_problem
from .problem import Constraint, ControlBox, ProblemError, ProblemSpec, build_time_grid


class ConfigError(ValueError):
    """Malformed config; ``where`` names the field or line."""

    def __init__(self, message, where=None):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


def load_yaml(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(str(exc), path) from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path} line {mark.line + 1}, column {mark.column + 1}" if mark else path
        raise ConfigError(getattr(exc, "problem", None) or str(exc), where) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path)
    return data


def set_dotted(cfg: dict, assignment: str):
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value", "--set")
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{p!r} is not a section", key)
        node = nxt
    node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict, exclude=("workers", "out")) -> str:
    body = {k: v for k, v in cfg.items() if k not in exclude}
    blob = json.dumps(body, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _need(section, key, where):
    if key not in section:
        raise ConfigError(f"missing field {key!r}", where)
    return section[key]


def _floats(value, where):
    try:
        if isinstance(value, (int, float)):
            return (float(value),)
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number or list of numbers, got {value!r}", where) from None


@dataclass
class ProblemSetup:
    spec: ProblemSpec
    solution: object
    builtin: str | None


def problem_from_config(cfg: dict, steps: int | None = None) -> ProblemSetup:
    sec = cfg.get("problem")
    if sec is None:
        raise ConfigError("missing section 'problem' (or pass --builtin)", "problem")
    if isinstance(sec, str):
        sec = {"builtin": sec}
    if not isinstance(sec, dict):
        raise ConfigError("must be a mapping or a built-in name", "problem")
    steps = steps or sec.get("steps")
    if "builtin" in sec:
        name = sec["builtin"]
        if name not in BUILTINS:
            raise ConfigError(f"unknown built-in {name!r}; choose from {', '.join(BUILTINS)}",
                              "problem.builtin")
        spec, sol = builtin_problem(name, int(steps) if steps else None)
        return ProblemSetup(spec, sol, name)

    where = "problem"
    try:
        grid = build_time_grid(float(sec.get("horizon", 1.0)), int(steps or 200),
                               _floats(_need(sec, "checkpoints", where), "problem.checkpoints"))
        box_sec = _need(sec, "control_box", where)
        if not isinstance(box_sec, dict):
            raise ConfigError("expected {lower: [...], upper: [...]}", "problem.control_box")
        box = ControlBox(_floats(_need(box_sec, "lower", "problem.control_box"), "problem.control_box.lower"),
                         _floats(_need(box_sec, "upper", "problem.control_box"), "problem.control_box.upper"))
        diffusion = _need(sec, "diffusion", where)
        if isinstance(diffusion, str):
            diffusion = [[diffusion]]
        diffusion = tuple(tuple(str(e) for e in (row if isinstance(row, list) else [row]))
                          for row in diffusion)
        drift = _need(sec, "drift", where)
        drift = tuple(str(e) for e in (drift if isinstance(drift, list) else [drift]))
        cons = []
        for i, c in enumerate(sec.get("constraints", []) or []):
            cw = f"problem.constraints[{i}]"
            if not isinstance(c, dict):
                raise ConfigError("expected a mapping", cw)
            cons.append(Constraint(str(_need(c, "expr", cw)), float(c.get("lower", "-inf")),
                                   float(c.get("upper", "inf")), str(c.get("name", ""))))
        spec = ProblemSpec(
            x0=_floats(_need(sec, "x0", where), "problem.x0"),
            drift=drift,
            diffusion=diffusion,
            running_cost=str(sec.get("running_cost", "0")),
            terminal_cost=str(_need(sec, "terminal_cost", where)),
            grid=grid,
            box=box,
            constraints=tuple(cons),
            name=str(sec.get("name", "custom")),
            lipschitz_c=float(sec.get("lipschitz_c", 10.0)),
        )
    except ProblemError as exc:
        raise ConfigError(str(exc), where) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), where) from None
    return ProblemSetup(spec, None, None)


def section(cfg: dict, name: str, allowed: set) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError("must be a mapping", name)
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)}; allowed {sorted(allowed)}", name)
    return copy.deepcopy(sec)
