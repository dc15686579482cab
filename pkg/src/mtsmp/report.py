"""CSV and text artifacts with a provenance header block."""
from __future__ import annotations

import csv
import io
import os

from . import __version__


def header_lines(meta: dict) -> list:
    keys = ("seed", "grid", "paths", "version")
    meta = {**meta, "version": __version__}
    out = [f"# {k}: {meta[k]}" for k in keys if k in meta]
    out += [f"# {k}: {v}" for k, v in meta.items() if k not in keys]
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, columns, rows, meta: dict):
    buf = io.StringIO()
    for line in header_lines(meta):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def write_text(path, text, meta: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(header_lines(meta)) + "\n")
        fh.write(text)
    return path


def csv_body(path) -> str:
    """Everything after the header block."""
    with open(path, encoding="utf-8") as fh:
        return "".join(line for line in fh if not line.startswith("#"))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
