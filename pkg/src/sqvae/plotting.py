"""Deterministic SVG line plots of metrics CSVs (no timestamps, fixed float
formatting) for the annealing, entropy and codebook-capacity views."""

from __future__ import annotations

import math
import os
from xml.sax.saxutils import escape

from .data import DataFormatError
from .records import read_table

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 80, "right": 170, "top": 40, "bottom": 60}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
          "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
DASHES = ("", "6,3", "2,2", "8,3,2,3")


class PlotError(DataFormatError):
    pass


def _num(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def line_plot(series: list[tuple[str, list[float], list[float]]], xlabel: str, ylabel: str,
              title: str, log_y: bool = False) -> str:
    """SVG text for labelled (name, xs, ys) series."""
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys)]
    if not pts:
        raise PlotError("no data rows")
    if log_y and any(y <= 0 for _, y in pts):
        raise PlotError("log-scale axis needs positive values")
    fy = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    xs_all = [p[0] for p in pts]
    ys_all = [fy(p[1]) for p in pts]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x0, x1):
        if x0 <= t <= x1:
            X = px(t)
            out.append(f'<line x1="{_num(X)}" y1="{MARGIN["top"] + ph}" x2="{_num(X)}" '
                       f'y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{_num(X)}" y="{MARGIN["top"] + ph + 18}" '
                       f'text-anchor="middle">{t:g}</text>')
    if log_y:
        yticks = [float(e) for e in range(math.floor(y0), math.ceil(y1) + 1)]
        if len([t for t in yticks if y0 <= t <= y1]) < 2:
            yticks = _nice_ticks(y0, y1)
    else:
        yticks = _nice_ticks(y0, y1)
    for t in yticks:
        if y0 <= t <= y1:
            Y = py(t)
            label = f"{10 ** t:.3g}" if log_y else f"{t:g}"
            out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{_num(Y)}" x2="{MARGIN["left"]}" '
                       f'y2="{_num(Y)}" stroke="black"/>')
            out.append(f'<text x="{MARGIN["left"] - 8}" y="{_num(Y + 4)}" '
                       f'text-anchor="end">{label}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 15}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    ylab = ylabel + (" (log scale)" if log_y else "")
    cy = MARGIN["top"] + ph / 2
    out.append(f'<text x="18" y="{cy:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {cy:.2f})">{escape(ylab)}</text>')
    for i, (name, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        dash = DASHES[(i // len(COLORS)) % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        coords = " ".join(f"{_num(px(x))},{_num(py(fy(y)))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash_attr} '
                   f'points="{coords}"/>')
        ly = MARGIN["top"] + 12 + 18 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="1.5"{dash_attr}/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _column(rows, name, path):
    vals = []
    for r in rows:
        if name not in r:
            raise PlotError(f"{path}: missing column {name}")
        vals.append(float(r[name]) if r[name] != "" else None)
    return vals


def _load(paths):
    out = []
    for p in paths:
        _, rows, columns = read_table(p)
        if not columns:
            raise PlotError(f"{p}: missing header row")
        out.append((p, rows, columns))
    if all(not rows for _, rows, _ in out):
        raise PlotError("no data rows")
    return out


def _label(path, n_files):
    if n_files == 1:
        return ""
    return os.path.basename(os.path.dirname(os.path.abspath(path))) + ": "


def anneal_plot(paths) -> str:
    """sigma2 and sigma2_phi (or kappa and kappa_phi) relative to their first
    logged value, against epoch, on a log axis."""
    series = []
    tables = _load(paths)
    for p, rows, columns in tables:
        for req in ("epoch",):
            if req not in columns:
                raise PlotError(f"{p}: missing column {req}")
        rows = [r for r in rows if r.get("epoch", "") != ""]
        pairs = [c for c in ("sigma2", "sigma2_phi", "kappa", "kappa_phi")
                 if c in columns and any(r[c] != "" for r in rows)]
        if not pairs:
            raise PlotError(f"{p}: missing column sigma2_phi (or kappa_phi)")
        epochs = _column(rows, "epoch", p)
        for c in pairs:
            vals = _column(rows, c, p)
            xs = [e for e, v in zip(epochs, vals) if v is not None]
            ys = [v for v in vals if v is not None]
            if ys:
                series.append((f"{_label(p, len(tables))}{c} / initial", xs,
                               [v / ys[0] for v in ys]))
    return line_plot(series, "epoch", "value relative to first epoch",
                     "Scale parameters during training", log_y=True)


def entropy_plot(paths) -> str:
    series = []
    tables = _load(paths)
    for p, rows, columns in tables:
        for req in ("epoch", "mean_entropy"):
            if req not in columns:
                raise PlotError(f"{p}: missing column {req}")
        epochs = _column(rows, "epoch", p)
        ent = _column(rows, "mean_entropy", p)
        pts = [(e, h) for e, h in zip(epochs, ent) if h is not None]
        series.append((f"{_label(p, len(tables))}entropy".strip(),
                       [e for e, _ in pts], [h for _, h in pts]))
    return line_plot(series, "epoch", "mean quantization entropy (nats)",
                     "Quantization entropy")


def capacity_plot(paths) -> str:
    """Perplexity and test MSE against K from sweep summary files, one line per model."""
    series = []
    for p, rows, columns in _load(paths):
        for req in ("model", "K", "perplexity_mean", "test_mse_mean"):
            if req not in columns:
                raise PlotError(f"{p}: missing column {req}")
        models = sorted({r["model"] for r in rows})
        for metric in ("perplexity_mean", "test_mse_mean"):
            for m in models:
                pts = sorted((float(r["K"]), float(r[metric])) for r in rows
                             if r["model"] == m and r[metric] != "")
                if pts:
                    series.append((f"{m} {metric.replace('_mean', '')}",
                                   [k for k, _ in pts], [v for _, v in pts]))
    return line_plot(series, "codebook size K", "mean over seeds",
                     "Codebook capacity", log_y=True)


PLOTS = {"anneal": anneal_plot, "entropy": entropy_plot, "capacity": capacity_plot}
