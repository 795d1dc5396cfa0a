"""Evaluation report rendering: JSON detail, CSV curves, and figures.

``write_report`` lays down everything for one evaluation: ``report.json``
with the full per-image detail, one ``curve_<axes>.csv`` per axes subset
(rows ``threshold,fraction``), matching ``curve_<axes>.png`` plots, and a
combined ``curves.png``.  ``render_curves`` recreates the CSV/PNG pair
from a previously written ``report.json``, so plots can be restyled
without re-running evaluation.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DataError
from .metrics import EvaluationReport

__all__ = [
    "write_report",
    "load_report_dict",
    "render_curves",
    "write_training_figure",
]


def _write_curve_csv(path, samples: Sequence[Tuple[float, float]]) -> None:
    lines = ["threshold,fraction"]
    lines += [f"{float(t)!r},{float(f)!r}" for t, f in samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _plot_curve(path, samples: Sequence[Tuple[float, float]], label: str) -> None:
    ts = [t for t, _ in samples]
    fs = [f for _, f in samples]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ts, fs, lw=1.8)
    ax.set_xlabel("GTE threshold (%)")
    ax.set_ylabel("fraction of images below")
    ax.set_title(f"cumulative error, axes {label}")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_combined(path, curves: Dict[str, Sequence[Tuple[float, float]]]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for key in sorted(curves):
        samples = curves[key]
        ax.plot([t for t, _ in samples], [f for _, f in samples],
                lw=1.6, label=key)
    ax.set_xlabel("GTE threshold (%)")
    ax.set_ylabel("fraction of images below")
    ax.set_title("cumulative error by axes subset")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _curve_outputs(curves: Dict[str, Sequence[Tuple[float, float]]],
                   out_dir: Path) -> Dict[str, str]:
    paths: Dict[str, str] = {}
    for key, samples in curves.items():
        csv_path = out_dir / f"curve_{key}.csv"
        png_path = out_dir / f"curve_{key}.png"
        _write_curve_csv(csv_path, samples)
        _plot_curve(png_path, samples, key)
        paths[f"curve_{key}_csv"] = str(csv_path)
        paths[f"curve_{key}_png"] = str(png_path)
    combined = out_dir / "curves.png"
    _plot_combined(combined, curves)
    paths["curves_png"] = str(combined)
    return paths


def write_report(report: EvaluationReport, out_dir) -> Dict[str, str]:
    """Write report.json plus per-axes curve CSVs and figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    paths = {"report_json": str(json_path)}
    paths.update(_curve_outputs(report.curves, out_dir))
    return paths


def load_report_dict(report_dir) -> dict:
    path = Path(report_dir) / "report.json"
    if not path.exists():
        raise DataError(f"no report.json under {Path(report_dir)}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"report.json is not valid JSON: {exc}") from None


def render_curves(report_dir, out_dir=None) -> Dict[str, str]:
    """Regenerate curve CSVs/figures from a written report.json."""
    raw = load_report_dict(report_dir)
    curves = raw.get("curves", {})
    if not curves:
        raise DataError("report.json has no curve samples")
    parsed = {k: [(float(t), float(f)) for t, f in v] for k, v in curves.items()}
    target = Path(out_dir) if out_dir is not None else Path(report_dir)
    target.mkdir(parents=True, exist_ok=True)
    return _curve_outputs(parsed, target)


def _read_log_csv(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"training log {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"training log {path} is empty")
    return rows


def write_training_figure(log_csv_path, out_path) -> None:
    """Loss per epoch (by stage) and validation scores from a training log."""
    rows = _read_log_csv(log_csv_path)
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    xs = range(len(rows))
    stages = [r["stage"] for r in rows]
    losses = [float(r["loss"]) for r in rows]
    for stage in dict.fromkeys(stages):  # first-seen order
        idx = [i for i, s in enumerate(stages) if s == stage]
        ax_loss.plot(idx, [losses[i] for i in idx], marker="o", ms=3,
                     lw=1.4, label=stage)
    ax_loss.set_xlabel("epoch (global)")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_yscale("log")
    ax_loss.grid(alpha=0.3)
    ax_loss.legend(fontsize=8)

    for col, label in (("val_gte_xy", "GTE(x,y) %"), ("val_gte_z", "GTE(z) %")):
        pts = [(i, float(r[col])) for i, r in zip(xs, rows) if r[col] != ""]
        if pts:
            ax_val.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", ms=3, lw=1.4, label=label)
    ax_val.set_xlabel("epoch (global)")
    ax_val.set_ylabel("validation GTE (%)")
    ax_val.grid(alpha=0.3)
    ax_val.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(out_path), dpi=110)
    plt.close(fig)
