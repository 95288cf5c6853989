"""Serialisation of evaluation results: JSON, aligned text and CSV.

Floats are written with 17 significant digits; NaN and infinities become
JSON ``null``.
"""

from __future__ import annotations

import csv
import io
import json
import math

import numpy as np


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def to_json(obj, indent: int = 2) -> str:
    return _encode(obj, indent, 0) + "\n"


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_json(obj))


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt_float(float(v)) if isinstance(v, (float, np.floating)) else v
                    for k, v in row.items()})
    return buf.getvalue()


def metrics_text(report: dict) -> str:
    """Aligned per-component table followed by the aggregate block."""
    comps = report["components"]
    cols = ["r2", "rmse", "mae", "rrmse", "mape", "nrmse", "willmott_d", "kge", "pearson", "spearman"]
    lines = [f"{'':<6}" + "".join(f"{c:>12}" for c in cols)]
    for name, vals in comps.items():
        lines.append(f"{name:<6}" + "".join(f"{vals.get(c, float('nan')):>12.5g}" for c in cols))
    lines.append("")
    for k, v in report["aggregate"].items():
        lines.append(f"{k:<24}{v:>14.6g}" if isinstance(v, float) else f"{k:<24}{v!s:>14}")
    return "\n".join(lines) + "\n"
