"""Static SVG line charts from a metrics CSV.

Every series is a metric averaged over runs, plotted against epoch.  With a
grid metadata file at hand, experiments are grouped along each ablation axis
(a config field that takes more than one value across the grid) and each axis
gets its own chart; otherwise one chart holds one series per experiment.
The output depends only on the inputs, so identical CSVs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

from dpkit.errors import ParseError
from dpkit.metrics import CSV_COLUMNS, MetricsRecord

AXES = ("epsilon", "clip_norm", "batch_size", "learning_rate", "epochs", "optimizer")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")
WIDTH, HEIGHT = 640, 360
MARGIN = dict(left=70, right=160, top=40, bottom=50)


def read_metrics(path) -> list[MetricsRecord]:
    return parse_metrics(Path(path).read_text())


def parse_metrics(text: str) -> list[MetricsRecord]:
    """Parse a metrics CSV; any problem raises ParseError with its 1-based line."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("empty CSV: no header row", 1)
    rows = list(csv.reader(lines))
    if tuple(rows[0]) != CSV_COLUMNS:
        raise ParseError(f"header must be {','.join(CSV_COLUMNS)}", 1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", lineno)
        try:
            rec = MetricsRecord(row[0], int(row[1]), int(row[2]),
                                *(float(v) for v in row[3:]))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        out.append(rec)
    if not out:
        raise ParseError("CSV has a header but no records", 2)
    return out


def mean_curves(records, metric: str) -> dict[str, list[tuple[int, float]]]:
    """experiment -> [(epoch, mean over runs)], epochs ascending."""
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        acc[r.experiment_id][r.epoch].append(getattr(r, metric))
    return {exp: [(e, _mean(v)) for e, v in sorted(by_epoch.items())]
            for exp, by_epoch in acc.items()}


def _mean(values):
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else math.nan


def ablation_axes(configs: dict[str, dict]) -> list[str]:
    return [a for a in AXES if len({repr(c.get(a)) for c in configs.values()}) > 1]


def _charts(records, metric, configs):
    curves = mean_curves(records, metric)
    if not configs:
        return [("all experiments", curves)]
    axes = ablation_axes({k: v for k, v in configs.items() if k in curves})
    if not axes:
        return [("all experiments", curves)]
    charts = []
    for axis in axes:
        groups: dict[str, list[str]] = defaultdict(list)
        for exp in curves:
            groups[_label(configs.get(exp, {}).get(axis))].append(exp)
        series = {}
        for label in sorted(groups, key=_sort_key):
            by_epoch: dict[int, list[float]] = defaultdict(list)
            for exp in groups[label]:
                for e, v in curves[exp]:
                    by_epoch[e].append(v)
            series[f"{axis}={label}"] = [(e, _mean(v)) for e, v in sorted(by_epoch.items())]
        charts.append((f"by {axis}", series))
    return charts


def _label(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:g}"
    return str(value)


def _sort_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _chart_svg(title, series, metric, y0):
    left, top = MARGIN["left"], y0 + MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    pts = [(e, v) for s in series.values() for e, v in s if math.isfinite(v)]
    xs = [e for e, _ in pts] or [0]
    ys = [v for _, v in pts] or [0.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

    def sx(x):
        return left + (pw * (x - x_lo) / (x_hi - x_lo) if x_hi > x_lo else pw / 2)

    def sy(y):
        return top + ph - ph * (y - y_lo) / (y_hi - y_lo)

    out = [f'<g class="chart">',
           f'<text x="{WIDTH / 2:.1f}" y="{y0 + 24}" text-anchor="middle" font-size="15">'
           f'{escape(metric)} vs epoch, {escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for t in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{left - 4}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" '
                   'stroke="#333"/>')
        out.append(f'<text x="{left - 7}" y="{sy(t) + 4:.2f}" text-anchor="end" '
                   f'font-size="11">{t:.4g}</text>')
    for t in sorted(set(int(round(v)) for v in _ticks(x_lo, x_hi))):
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 4}" '
                   'stroke="#333"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 17}" text-anchor="middle" '
                   f'font-size="11">{t}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{top + ph + 38}" text-anchor="middle" '
               'font-size="12">epoch</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(metric)}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        finite = [(e, v) for e, v in s if math.isfinite(v)]
        path = " ".join(f"{sx(e):.2f},{sy(v):.2f}" for e, v in finite)
        out.append(f'<polyline class="series" data-name="{escape(name)}" fill="none" '
                   f'stroke="{color}" stroke-width="2" points="{path}"/>')
        for e, v in finite:
            out.append(f'<circle cx="{sx(e):.2f}" cy="{sy(v):.2f}" r="2.5" fill="{color}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 30}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly}" font-size="11">{escape(name)}</text>')
    out.append("</g>")
    return out


def render_svg(records, metric: str = "test_acc", configs: dict | None = None) -> str:
    if metric not in CSV_COLUMNS[3:]:
        raise ValueError(f"unknown metric {metric!r}")
    charts = _charts(records, metric, configs or {})
    total_h = HEIGHT * len(charts)
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total_h}" '
            f'viewBox="0 0 {WIDTH} {total_h}" font-family="sans-serif">',
            f'<rect width="{WIDTH}" height="{total_h}" fill="white"/>']
    for i, (title, series) in enumerate(charts):
        body.extend(_chart_svg(title, series, metric, i * HEIGHT))
    body.append("</svg>")
    return "\n".join(body) + "\n"


def load_configs(metadata_path) -> dict[str, dict]:
    meta = json.loads(Path(metadata_path).read_text())
    return meta.get("experiments", {})


def report(csv_path, out_path=None, metric: str = "test_acc", metadata_path=None) -> str:
    """Render the CSV to SVG (written to ``out_path`` when given) and return it."""
    records = read_metrics(csv_path)
    configs = load_configs(metadata_path) if metadata_path else None
    svg = render_svg(records, metric, configs)
    if out_path is not None:
        Path(out_path).write_text(svg)
    return svg
