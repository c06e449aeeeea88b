"""Plain-text and CSV renderings of evaluation results."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

ABLATION_SETTINGS = ("Baseline", "Baseline + LF", "Baseline + LF + FM", "Baseline + LF + AM")


def _fmt(v, digits=3):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, tuple):
        return f"{v[0]:.{digits}f} ± {v[1]:.{digits}f}"
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.{digits}f}"


def _raw(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, tuple):
        return f"{v[0]!r}±{v[1]!r}"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def text_table(header, rows, digits=3):
    cells = [list(map(str, header))] + [[_fmt(v, digits) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_raw(v) for v in r])
    return Path(path)


def ablation_rows(results, class_names):
    """Rows ``(setting, metric, per-class..., average)``: an IS row and a FID row per setting.

    ``results[setting]`` is either ``{"is": {class: (mean, std)}, "fid": {class: value}}``
    or ``{"failed": message}``. A failed setting keeps its two rows, filled with ``failed``.
    """
    rows = []
    for setting in ABLATION_SETTINGS:
        res = results.get(setting, {"failed": "not run"})
        for metric in ("IS", "FID"):
            if "failed" in res:
                rows.append([setting, metric] + ["failed"] * (len(class_names) + 1))
                continue
            per = [res[metric.lower()].get(c) for c in class_names]
            if metric == "IS":
                means = [p[0] for p in per if p is not None]
                stds = [p[1] for p in per if p is not None]
                avg = (float(np.mean(means)), float(np.mean(stds))) if means else None
            else:
                vals = [p for p in per if p is not None and not math.isnan(p)]
                avg = float(np.mean(vals)) if vals else None
            rows.append([setting, metric, *per, avg])
    return rows


def ablation_header(class_names):
    return ["setting", "metric", *class_names, "average"]


def fid_matrix_rows(matrix):
    rows = [[src, *row] for src, row in zip(matrix.class_names, matrix.values.tolist())]
    rows.append(["mean", *matrix.col_mean.tolist()])
    rows.append(["std", *matrix.col_std.tolist()])
    return rows


def fid_matrix_header(matrix):
    return ["source\\target", *matrix.class_names]


def recall_rows(report):
    return [[cond, *per.tolist(), mean] for cond, per, mean in report.rows()]


def recall_header(report):
    return ["condition", *report.class_names, "mean"]


def emit(path_stem, header, rows, title=None):
    """Write ``<stem>.txt`` and ``<stem>.csv``; returns both paths."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    text = (title + "\n\n" if title else "") + text_table(header, rows)
    txt = stem.with_suffix(".txt")
    txt.write_text(text)
    return txt, write_csv(stem.with_suffix(".csv"), header, rows)
