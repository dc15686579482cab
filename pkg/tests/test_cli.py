import os
import subprocess
import sys

import pytest

from mtsmp.cli import main
from mtsmp.report import csv_body

SMALL = ["--paths", "3000", "--steps", "20", "--seed", "7"]


def _run(tmp_path, tag, *argv):
    out = tmp_path / tag
    code = main(list(argv) + ["--out", str(out)])
    dirs = os.listdir(out) if out.exists() else []
    return code, (out / dirs[0]) if dirs else None


def test_verify_mp_pass_and_fail(tmp_path):
    code, d = _run(tmp_path, "a", "verify-mp", "--builtin", "example1", *SMALL)
    assert code == 0
    text = (d / "mp_report.txt").read_text()
    assert text.startswith("# seed: 7\n# grid: T=1 N_t=20")
    assert "verdict: pass" in text
    code, _ = _run(tmp_path, "b", "verify-mp", "--builtin", "example1", "--candidate", "constant:0.5", *SMALL)
    assert code == 1


def test_bad_input_exit_codes(tmp_path):
    assert _run(tmp_path, "a", "simulate", "--builtin", "nope", *SMALL)[0] == 2
    assert _run(tmp_path, "b", "simulate", "--builtin", "example1", "--paths", "10")[0] == 2
    assert _run(tmp_path, "c", "simulate", "--builtin", "example1", "--candidate", "expr:u+", *SMALL)[0] == 2
    assert _run(tmp_path, "d", "frobnicate")[0] == 2


def test_config_errors_are_located(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("seed: 1\nproblem: [unclosed\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "line" in capsys.readouterr().err


def test_inline_problem_from_config(tmp_path):
    cfg = tmp_path / "p.yaml"
    cfg.write_text(
        "seed: 3\npaths: 200\nproblem:\n  horizon: 1.0\n  steps: 10\n  checkpoints: [1.0]\n"
        "  control_box: {lower: [0.0], upper: [1.0]}\n  drift: ['u']\n  diffusion: [['0.1']]\n"
        "  x0: [0.0]\n  running_cost: '0'\n  terminal_cost: 'y1^2'\n"
    )
    code, d = _run(tmp_path, "a", "simulate", "--config", str(cfg), "--candidate", "constant:0")
    assert code == 0
    assert "J" in (d / "summary.txt").read_text()


def test_oracle_and_tree_optimize_agree(tmp_path):
    code, d = _run(tmp_path, "a", "oracle", "--builtin", "example1", "--steps", "2", "--ugrid", "0,0.5,1", "--seed", "0")
    assert code == 0
    assert "-1.5" in (d / "oracle.txt").read_text()
    code, d = _run(tmp_path, "b", "optimize", "--builtin", "example1", "--steps", "2", "--tree",
                   "--ugrid", "0,0.5,1", "--seed", "0")
    assert code == 0
    assert "-1.5" in (d / "optimize.txt").read_text()


@pytest.mark.parametrize("argv,files", [
    (["simulate", "--builtin", "example1"], ["trajectories.csv"]),
    (["adjoint", "--builtin", "example1"], ["adjoint.csv"]),
    (["verify-mp", "--builtin", "lq_smooth", "--candidate", "feedback"], ["mp_estimates.csv"]),
    (["optimize", "--builtin", "lq_smooth", "--iters", "3"], ["control.csv", "trace.csv"]),
    (["mollify-scan", "--expr", "abs(y1)"], ["scan.csv"]),
])
def test_worker_count_does_not_change_csv(tmp_path, argv, files):
    _, d1 = _run(tmp_path, "w1", *argv, *SMALL, "--workers", "1")
    _, d3 = _run(tmp_path, "w3", *argv, *SMALL, "--workers", "3")
    assert d1.name == d3.name  # the run hash ignores the worker count
    for f in files:
        assert csv_body(d1 / f) == csv_body(d3 / f)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mtsmp", "simulate", "--builtin", "example1",
                        "--paths", "1", "--steps", "10", "--seed", "0", "--candidate", "constant:0",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "artifacts:" in r.stdout
