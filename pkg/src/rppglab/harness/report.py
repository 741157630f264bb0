"""Evaluation report: versioned JSON, per-group CSV, per-window HR CSV, figures."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from ..metrics import GROUPS, MetricsReport

SCHEMA_VERSION = 1

_NUM = {"anyOf": [{"type": "number"}, {"enum": ["inf", "-inf", "nan"]}, {"type": "null"}]}
_SUMMARY = {
    "type": "object",
    "required": ["n", "mae", "rmse", "pcc", "snr"],
    "additionalProperties": False,
    "properties": {"n": {"type": "integer", "minimum": 0},
                   "mae": _NUM, "rmse": _NUM, "pcc": _NUM, "snr": _NUM},
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "seed", "methods"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "methods": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["subjects", "groups", "overall", "bias"],
                "additionalProperties": False,
                "properties": {
                    "subjects": {"type": "array", "items": {
                        "type": "object",
                        "required": ["id", "fitzpatrick", "group", "mae", "rmse", "pcc", "snr"],
                        "additionalProperties": False,
                        "properties": {"id": {"type": "string"},
                                       "fitzpatrick": {"enum": ["I", "II", "III", "IV", "V", "VI"]},
                                       "group": {"enum": list(GROUPS)},
                                       "mae": _NUM, "rmse": _NUM, "pcc": _NUM, "snr": _NUM}}},
                    "groups": {"type": "object", "propertyNames": {"enum": list(GROUPS)},
                               "additionalProperties": _SUMMARY},
                    "overall": _SUMMARY,
                    "bias": {"type": "object", "required": ["std_mae", "std_rmse"],
                             "additionalProperties": False,
                             "properties": {"std_mae": _NUM, "std_rmse": _NUM}},
                },
            },
        },
    },
}


class ReportError(ValueError):
    pass


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _unnum(x):
    return float(x) if isinstance(x, str) else x


def _summary_json(d: dict) -> dict:
    return {"n": int(d["n"]), **{k: _num(d[k]) for k in ("mae", "rmse", "pcc", "snr")}}


def report_to_json(reports: Sequence[MetricsReport], seed: int) -> dict:
    methods = {}
    for rep in reports:
        methods[rep.method] = {
            "subjects": [{"id": s.subject_id, "fitzpatrick": s.fitzpatrick, "group": s.group,
                          "mae": _num(s.mae), "rmse": _num(s.rmse), "pcc": _num(s.pcc),
                          "snr": _num(s.snr)} for s in rep.subjects],
            "groups": {g: _summary_json(v) for g, v in rep.groups.items()},
            "overall": _summary_json(rep.overall),
            "bias": {k: _num(v) for k, v in rep.bias.items()},
        }
    return {"schema_version": SCHEMA_VERSION, "seed": int(seed), "methods": methods}


def validate_report(doc: dict) -> None:
    """Raise :class:`ReportError` unless ``doc`` matches the current schema."""
    version = doc.get("schema_version") if isinstance(doc, dict) else None
    if version != SCHEMA_VERSION:
        raise ReportError(f"report schema version {version!r} does not match {SCHEMA_VERSION}")
    try:
        jsonschema.validate(doc, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ReportError(f"report invalid at '{path}': {exc.message}") from None


def dumps_report(doc: dict) -> str:
    validate_report(doc)
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def load_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    validate_report(doc)
    return doc


def group_table(doc: dict) -> list[dict]:
    """Rows ``method, group, n, mae, rmse, pcc, snr`` plus overall and bias rows."""
    rows = []
    for method, body in doc["methods"].items():
        for g in GROUPS:
            if g in body["groups"]:
                rows.append({"method": method, "group": g, **body["groups"][g]})
        rows.append({"method": method, "group": "overall", **body["overall"]})
        rows.append({"method": method, "group": "bias_std", "n": len(body["groups"]),
                     "mae": body["bias"]["std_mae"], "rmse": body["bias"]["std_rmse"],
                     "pcc": None, "snr": None})
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def window_rows(reports: Sequence[MetricsReport], stride_s: float) -> list[dict]:
    rows = []
    for rep in reports:
        for s in rep.subjects:
            for j, (e, g) in enumerate(zip(s.hr_est, s.hr_gt)):
                rows.append({"method": rep.method, "subject": s.subject_id, "group": s.group,
                             "window": j, "t_start_s": j * stride_s,
                             "hr_est": None if not np.isfinite(e) else float(e),
                             "hr_gt": float(g)})
    return rows


def render_figures(doc: dict, windows: list[dict], out_dir) -> list[Path]:
    """Per-group MAE/RMSE bars and per-window HR traces as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    paths = []

    methods = list(doc["methods"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    width = 0.8 / max(len(methods), 1)
    for ax, key in zip(axes, ("mae", "rmse")):
        for k, m in enumerate(methods):
            groups = doc["methods"][m]["groups"]
            vals = [_unnum(groups[g][key]) if g in groups else np.nan for g in GROUPS]
            ax.bar(np.arange(len(GROUPS)) + k * width, vals, width, label=m)
        ax.set_xticks(np.arange(len(GROUPS)) + width * (len(methods) - 1) / 2)
        ax.set_xticklabels(GROUPS)
        ax.set_ylabel(f"{key.upper()} (BPM)")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "group_errors.png"
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(path)

    for m in methods:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        rows = [r for r in windows if r["method"] == m]
        subjects = sorted({r["subject"] for r in rows})
        gt = np.array([np.mean([r["hr_gt"] for r in rows if r["subject"] == s]) for s in subjects])
        est = np.array([np.nanmean([np.nan if r["hr_est"] is None else r["hr_est"]
                                    for r in rows if r["subject"] == s]) for s in subjects])
        groups = [next(r["group"] for r in rows if r["subject"] == s) for s in subjects]
        for g in GROUPS:
            sel = np.array([x == g for x in groups], dtype=bool)
            if sel.any():
                ax.scatter(gt[sel], est[sel], s=12, label=g)
        if len(gt):
            lo, hi = float(np.min(gt)) - 5, float(np.max(gt)) + 5
            ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("ground-truth HR (BPM)")
        ax.set_ylabel("estimated HR (BPM)")
        ax.set_title(m)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"hr_scatter_{m}.png"
        fig.savefig(path, dpi=100, metadata=meta)
        plt.close(fig)
        paths.append(path)
    return paths
