"""Merge run directories into comparison tables and SVG line charts."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .exceptions import InputError
from .training import CSV_COLUMNS, RunMetrics, epochs_to_threshold, read_metrics_csv

logger = logging.getLogger(__name__)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def load_runs(run_dirs) -> dict[str, RunMetrics]:
    runs = {}
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.exists():
            logger.warning("skipping %s: no metrics.csv", d)
            continue
        name = Path(d).name or str(d)
        while name in runs:
            name += "'"
        runs[name] = read_metrics_csv(path)
    if not runs:
        raise InputError("none of the given run directories contain metrics")
    return runs


def merged_rows(runs: dict[str, RunMetrics]):
    for name, m in runs.items():
        for row in m.rows():
            yield {"run": name, **row}


def threshold_rows(runs: dict[str, RunMetrics], metric: str, threshold: float):
    for name, m in runs.items():
        first = epochs_to_threshold(m.epoch, getattr(m, metric), threshold)
        yield {"run": name, "metric": metric, "threshold": threshold, "epoch": "" if first is None else first}


def svg_chart(series: dict[str, tuple[list, list]], title: str, ylabel: str,
              width: int = 640, height: int = 400) -> str:
    """Polyline chart, one series per run."""
    left, right, top, bottom = 60, 150, 30, 40
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv if np.isfinite(y)]
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">epoch</text>',
           f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" transform="rotate(-90 14 {top + ph / 2:.1f})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    for v, anchor in ((y0, "end"), (y1, "end")):
        out.append(f'<text x="{left - 4}" y="{py(v) + 4:.1f}" text-anchor="{anchor}" font-size="10">{v:.4g}</text>')
    for v in (x0, x1):
        out.append(f'<text x="{px(v):.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{v:g}</text>')
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xv, yv) if np.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(run_dirs, out_dir, metric: str = "train_acc", threshold: float = 0.95,
                 plot_metric: str = "val_loss") -> dict[str, Path]:
    """Write ``comparison.csv``, ``thresholds.csv`` and ``<plot_metric>.svg`` into ``out_dir``."""
    runs = load_runs(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"comparison": out / "comparison.csv", "thresholds": out / "thresholds.csv",
             "plot": out / f"{plot_metric}.svg"}
    with open(paths["comparison"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ("run",) + CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in merged_rows(runs):
            writer.writerow({k: (v if k in ("run", "epoch") else repr(float(v))) for k, v in row.items()})
    with open(paths["thresholds"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ("run", "metric", "threshold", "epoch"), lineterminator="\n")
        writer.writeheader()
        writer.writerows(threshold_rows(runs, metric, threshold))
    series = {name: (m.epoch, getattr(m, plot_metric)) for name, m in runs.items()}
    paths["plot"].write_text(svg_chart(series, f"{plot_metric} per epoch", plot_metric))
    return paths
