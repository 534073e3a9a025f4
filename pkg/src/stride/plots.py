"""Deterministic SVG figures for forecast evaluation.

Every coordinate is written with a fixed number of decimals, and element order
follows input order, so identical CSVs give byte-identical documents.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import (
    EVAL_FIELDS, FH_GRID_MS, N_FH, RESIDUAL_FIELDS, boxplot_stats, read_rows, residual_regression,
)

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=20, top=40, bottom=55)
UNITS = {"cop": "mm", "toi": "ms"}


def _f(x: float) -> str:
    return f"{x:.3f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


class Figure:
    """Minimal SVG canvas with a linear data-to-pixel mapping."""

    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim, manifest: str = ""):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        x0, x1 = xlim
        y0, y1 = ylim
        if not x1 > x0:
            x0, x1 = x0 - 1.0, x0 + 1.0
        if not y1 > y0:
            y0, y1 = y0 - 1.0, y0 + 1.0
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        self.manifest = manifest
        self.body: list = []

    def px(self, x):
        x0, x1 = self.xlim
        return MARGIN["left"] + (np.asarray(x, dtype=np.float64) - x0) / (x1 - x0) * (
            WIDTH - MARGIN["left"] - MARGIN["right"])

    def py(self, y):
        y0, y1 = self.ylim
        return HEIGHT - MARGIN["bottom"] - (np.asarray(y, dtype=np.float64) - y0) / (y1 - y0) * (
            HEIGHT - MARGIN["top"] - MARGIN["bottom"])

    def polyline(self, xs, ys, cls: str, color: str = "#1f77b4", width: float = 1.5):
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(self.px(xs), self.py(ys)))
        self.body.append(f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="{width}" '
                         f'points="{pts}"/>')

    def band(self, xs, lo, hi, cls: str, color: str = "#1f77b4"):
        up = [f"{_f(a)},{_f(b)}" for a, b in zip(self.px(xs), self.py(hi))]
        dn = [f"{_f(a)},{_f(b)}" for a, b in zip(self.px(xs)[::-1], self.py(lo)[::-1])]
        self.body.append(f'<polygon class="{cls}" fill="{color}" fill-opacity="0.2" stroke="none" '
                         f'points="{" ".join(up + dn)}"/>')

    def points(self, xs, ys, cls: str, color: str = "#1f77b4", r: float = 1.8):
        for a, b in zip(self.px(xs), self.py(ys)):
            self.body.append(f'<circle class="{cls}" cx="{_f(a)}" cy="{_f(b)}" r="{r}" fill="{color}" '
                             f'fill-opacity="0.5"/>')

    def line(self, x0, y0, x1, y1, cls: str, color: str = "#000", dash: bool = False, data: dict | None = None):
        attrs = "".join(f' data-{k}="{v!r}"' for k, v in (data or {}).items())
        d = ' stroke-dasharray="5,4"' if dash else ""
        self.body.append(
            f'<line class="{cls}" x1="{_f(self.px(x0))}" y1="{_f(self.py(y0))}" x2="{_f(self.px(x1))}" '
            f'y2="{_f(self.py(y1))}" stroke="{color}" stroke-width="1.2"{d}{attrs}/>')

    def rect(self, x0, y0, x1, y1, cls: str, color: str = "#1f77b4"):
        ax, bx = sorted((float(self.px(x0)), float(self.px(x1))))
        ay, by = sorted((float(self.py(y0)), float(self.py(y1))))
        self.body.append(f'<rect class="{cls}" x="{_f(ax)}" y="{_f(ay)}" width="{_f(bx - ax)}" '
                         f'height="{_f(by - ay)}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>')

    def text(self, x: float, y: float, s: str, anchor: str = "middle", size: int = 11, rotate: bool = False):
        rot = f' transform="rotate(-90 {_f(x)} {_f(y)})"' if rotate else ""
        self.body.append(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}"'
                         f'{rot}>{escape(s)}</text>')

    def _axes(self) -> list:
        out = []
        L, R = MARGIN["left"], WIDTH - MARGIN["right"]
        T, B = MARGIN["top"], HEIGHT - MARGIN["bottom"]
        out.append(f'<rect class="frame" x="{L}" y="{T}" width="{R - L}" height="{B - T}" fill="none" '
                   f'stroke="#000"/>')
        for t in _nice_ticks(*self.xlim):
            x = float(self.px(t))
            out.append(f'<line class="tick" x1="{_f(x)}" y1="{B}" x2="{_f(x)}" y2="{B + 5}" stroke="#000"/>')
            out.append(f'<text x="{_f(x)}" y="{B + 18}" font-size="10" text-anchor="middle">{t:g}</text>')
        for t in _nice_ticks(*self.ylim):
            y = float(self.py(t))
            out.append(f'<line class="tick" x1="{L - 5}" y1="{_f(y)}" x2="{L}" y2="{_f(y)}" stroke="#000"/>')
            out.append(f'<text x="{L - 8}" y="{_f(y + 3)}" font-size="10" text-anchor="end">{t:g}</text>')
        out.append(f'<text x="{(L + R) / 2:.3f}" y="{HEIGHT - 15}" font-size="12" text-anchor="middle">'
                   f'{escape(self.xlabel)}</text>')
        cy = (T + B) / 2
        out.append(f'<text x="18" y="{cy:.3f}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 18 {cy:.3f})">{escape(self.ylabel)}</text>')
        out.append(f'<text x="{WIDTH / 2:.3f}" y="22" font-size="14" text-anchor="middle">'
                   f'{escape(self.title)}</text>')
        return out

    def render(self) -> str:
        head = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f"<metadata>manifest:{escape(self.manifest)}</metadata>",
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>',
        ]
        return "\n".join(head + self._axes() + self.body + ["</svg>", ""])


def _lim(*arrays, pad: float = 0.05):
    vals = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays] + [np.zeros(0)])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - pad * span, hi + pad * span


FH_LIM = (0.0, float(FH_GRID_MS[-1]) + 10.0)


def mae_curve_svg(rows: list, task: str, manifest: str = "") -> str:
    """MAE against FH with the bootstrap interval shaded."""
    rs = sorted((r for r in rows if r["task"] == task and r["scope"] == "all" and r["metric"] == "MAE"),
                key=lambda r: float(r["fh_frames"]))
    fh = np.array([float(r["fh_ms"]) for r in rs])
    v = np.array([float(r["value"]) for r in rs])
    lo = np.array([float(r["ci_lo"]) for r in rs])
    hi = np.array([float(r["ci_hi"]) for r in rs])
    u = UNITS.get(task, "")
    fig = Figure(f"{task.upper()} MAE vs forecast horizon", "forecast horizon (ms)", f"MAE ({u})",
                 FH_LIM, _lim(v, lo, hi, [0.0]), manifest)
    ok = np.isfinite(lo) & np.isfinite(hi)
    if ok.any():
        fig.band(fh[ok], lo[ok], hi[ok], "ci")
    if fh.size:
        fig.polyline(fh, v, "mae")
        fig.points(fh, v, "mae-pt", r=2.5)
    return fig.render()


def ftoi_svg(rows: list, manifest: str = "") -> str:
    """Mean forecast TOI per horizon against the ideal ``prediction == FH`` line."""
    rs = sorted((r for r in rows if r["task"] == "toi" and r["scope"] == "all" and r["metric"] == "mean-prediction"),
                key=lambda r: float(r["fh_frames"]))
    fh = np.array([float(r["fh_ms"]) for r in rs])
    v = np.array([float(r["value"]) for r in rs])
    fig = Figure("Mean forecast TOI vs horizon", "forecast horizon (ms)", "mean fTOI (ms)",
                 FH_LIM, _lim(v, FH_GRID_MS, [0.0]), manifest)
    fig.line(0.0, 0.0, FH_LIM[1], FH_LIM[1], "ideal", dash=True)
    if fh.size:
        fig.polyline(fh, v, "ftoi", color="#d62728")
    return fig.render()


def prediction_scatter_svg(rows: list, task: str, manifest: str = "") -> str:
    rs = [r for r in rows if r["task"] == task]
    y = np.array([float(r["truth"]) for r in rs])
    p = np.array([float(r["prediction"]) for r in rs])
    u = UNITS.get(task, "")
    lim = _lim(y, p)
    fig = Figure(f"{task.upper()} prediction vs ground truth", f"ground truth ({u})", f"prediction ({u})",
                 lim, lim, manifest)
    fig.line(lim[0], lim[0], lim[1], lim[1], "ideal", dash=True)
    fig.points(y, p, "obs")
    return fig.render()


def residual_scatter_svg(rows: list, task: str, manifest: str = "") -> str:
    """Residual against truth with the ``r ~ y`` least-squares line."""
    rs = [r for r in rows if r["task"] == task]
    y = np.array([float(r["truth"]) for r in rs])
    res = np.array([float(r["residual"]) for r in rs])
    u = UNITS.get(task, "")
    fig = Figure(f"{task.upper()} residual vs ground truth", f"ground truth ({u})", f"residual ({u})",
                 _lim(y), _lim(res, [0.0]), manifest)
    fig.line(fig.xlim[0], 0.0, fig.xlim[1], 0.0, "zero", color="#888", dash=True)
    fig.points(y, res, "obs")
    try:
        fit = residual_regression(res, y)
    except ValueError:
        fit = None
    if fit is not None:
        x0, x1 = float(y.min()), float(y.max())
        fig.line(x0, fit.intercept + fit.slope * x0, x1, fit.intercept + fit.slope * x1, "fit", color="#d62728",
                 data=dict(slope=fit.slope, intercept=fit.intercept, r2=fit.r2))
    return fig.render()


def residual_boxplot_svg(rows: list, task: str, manifest: str = "") -> str:
    """One Tukey boxplot of residuals per horizon."""
    rs = [r for r in rows if r["task"] == task]
    u = UNITS.get(task, "")
    by_k = {k: [] for k in range(1, N_FH + 1)}
    for r in rs:
        by_k[int(float(r["fh_frames"]))].append(float(r["residual"]))
    allv = np.array([float(r["residual"]) for r in rs])
    fig = Figure(f"{task.upper()} residuals by forecast horizon", "forecast horizon (ms)", f"residual ({u})",
                 FH_LIM, _lim(allv, [0.0]), manifest)
    half = 5.0
    for k, vals in by_k.items():
        if not vals:
            continue
        b = boxplot_stats(vals)
        x = float(FH_GRID_MS[k - 1])
        fig.rect(x - half, b.q1, x + half, b.q3, "box")
        fig.line(x - half, b.median, x + half, b.median, "median", color="#d62728")
        fig.line(x, b.whisker_lo, x, b.q1, "whisker")
        fig.line(x, b.q3, x, b.whisker_hi, "whisker")
        if b.outliers:
            fig.points([x] * len(b.outliers), b.outliers, "outlier", color="#000", r=1.5)
    return fig.render()


def emit_plots(eval_csv, residual_csv, out_dir, manifest: str = "") -> list:
    """Write every figure that the inputs support; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = read_rows(eval_csv, EVAL_FIELDS, numeric=("fh_frames", "fh_ms", "value"))
    rs = read_rows(residual_csv, RESIDUAL_FIELDS, numeric=("fh_frames", "fh_ms", "truth", "prediction", "residual"))
    if not ev and not rs:
        log.warning("plot inputs are empty; writing empty axes")
    tasks = sorted({r["task"] for r in ev} | {r["task"] for r in rs}) or ["cop"]
    written = []

    def put(name: str, doc: str):
        p = out / name
        p.write_text(doc, encoding="utf-8")
        written.append(p)

    for t in tasks:
        put(f"{t}_mae_fh.svg", mae_curve_svg(ev, t, manifest))
        put(f"{t}_pred_vs_truth.svg", prediction_scatter_svg(rs, t, manifest))
        put(f"{t}_residual_vs_truth.svg", residual_scatter_svg(rs, t, manifest))
        put(f"{t}_residual_box.svg", residual_boxplot_svg(rs, t, manifest))
        if t == "toi":
            put("toi_mean_ftoi.svg", ftoi_svg(ev, manifest))
    return written
