"""Deterministic CSV and SVG emission for reports and figures.

Every plot writes a CSV twin of the same data.  SVG output is plain
static markup rendered with fixed canvas and repr-stable number
formatting, so identical input yields identical bytes.  Files are written
to a temporary name and atomically renamed; errors leave nothing behind.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DomainError

CANVAS_W = 800
CANVAS_H = 500
MARGIN = 60

PLOT_KINDS = ("gate-trace", "lr-schedule", "filter-response", "scatter")

_KIND_COLUMNS = {
    "gate-trace": ("sample_index", "gate_value", "cosine"),
    "lr-schedule": ("epoch", "lr"),
    "filter-response": ("freq_hz", "gain_db"),
    "scatter": ("x", "y", "label"),
}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def _atomic_write(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, columns: tuple[str, ...], rows) -> None:
    rows = list(rows)
    if not rows:
        raise DomainError("refusing to write an empty CSV")
    lines = [",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise DomainError(f"row width {len(row)} != {len(columns)} columns")
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _scale(values, lo_px, hi_px):
    values = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(values.min()), float(values.max())
    if vmax == vmin:
        vmax = vmin + 1.0
    return (values - vmin) / (vmax - vmin) * (hi_px - lo_px) + lo_px, vmin, vmax


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_doc(body: list[str], x_label: str, y_label: str, title: str) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" height="{CANVAS_H}" '
        f'viewBox="0 0 {CANVAS_W} {CANVAS_H}">',
        f'<rect width="{CANVAS_W}" height="{CANVAS_H}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{CANVAS_H - MARGIN}" x2="{CANVAS_W - MARGIN}" '
        f'y2="{CANVAS_H - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{CANVAS_H - MARGIN}" stroke="black"/>',
        f'<text x="{CANVAS_W // 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<text x="{CANVAS_W // 2}" y="{CANVAS_H - 16}" text-anchor="middle" '
        f'font-size="12">{x_label}</text>',
        f'<text x="18" y="{CANVAS_H // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {CANVAS_H // 2})">{y_label}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _polyline(xs, ys, color: str) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def emit_plot(kind: str, data: dict, path) -> None:
    """Write ``<path>.svg`` and ``<path>.csv`` for the given series.

    data maps the kind's column names to equal-length sequences.
    """
    if kind not in _KIND_COLUMNS:
        raise DomainError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    columns = _KIND_COLUMNS[kind]
    missing = [c for c in columns if c not in data]
    if missing:
        raise DomainError(f"plot data missing columns {missing}")
    series = [np.asarray(data[c]) for c in columns]
    n = len(series[0])
    if n == 0:
        raise DomainError("refusing to plot empty data")
    if any(len(s) != n for s in series):
        raise DomainError("plot columns must have equal length")

    write_csv(str(path) + ".csv", columns, zip(*series))

    xcol, ycols = series[0], series[1:]
    xs, xmin, xmax = _scale(xcol.astype(np.float64), MARGIN, CANVAS_W - MARGIN)
    body = []
    if kind == "scatter":
        pys, ymin, ymax = _scale(series[1].astype(np.float64), CANVAS_H - MARGIN, MARGIN)
        labels = series[2].astype(np.int64)
        for x, y, lab in zip(xs, pys, labels):
            color = _PALETTE[int(lab) % len(_PALETTE)]
            body.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{color}"/>')
    else:
        allv = np.concatenate([c.astype(np.float64) for c in ycols])
        _, ymin, ymax = _scale(allv, CANVAS_H - MARGIN, MARGIN)
        for ci, col in enumerate(ycols):
            span = ymax - ymin if ymax != ymin else 1.0
            pys = (CANVAS_H - MARGIN) - (col.astype(np.float64) - ymin) / span * (
                CANVAS_H - 2 * MARGIN
            )
            body.append(_polyline(xs, pys, _PALETTE[ci % len(_PALETTE)]))
    body.append(
        f'<text x="{MARGIN}" y="{CANVAS_H - MARGIN + 16}" font-size="10">{_fmt(xmin)}</text>'
    )
    body.append(
        f'<text x="{CANVAS_W - MARGIN}" y="{CANVAS_H - MARGIN + 16}" text-anchor="end" '
        f'font-size="10">{_fmt(xmax)}</text>'
    )
    body.append(f'<text x="{MARGIN - 6}" y="{CANVAS_H - MARGIN}" text-anchor="end" '
                f'font-size="10">{_fmt(ymin)}</text>')
    body.append(f'<text x="{MARGIN - 6}" y="{MARGIN + 4}" text-anchor="end" '
                f'font-size="10">{_fmt(ymax)}</text>')
    _atomic_write(str(path) + ".svg", _svg_doc(body, columns[0], "/".join(columns[1:]), kind))
