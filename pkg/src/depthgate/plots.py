"""Dependency-free SVG charts for run records, sweeps, benchmarks, and
routing traces.

Every function reads one of the project's CSV schemas and writes a standalone
vector file. Nothing here imports a plotting package; the charts are plain
text emission, which keeps the artifact chain inspectable end to end.
"""

from __future__ import annotations

import math
from pathlib import Path

from .metrics import read_records_csv
from .routing import read_trace_csv
from .sparse import read_bench_csv


class PlotError(Exception):
    """Raised when chart inputs are missing, empty, or malformed."""


PALETTE = ("#2a5db0", "#b33a3a", "#1f7a4d", "#8a6d1a", "#6a4a91", "#3a8ba0")
FONT = "font-family=\"Helvetica,Arial,sans-serif\""


def _fmt(x: float) -> str:
    if x == 0:
        return "0"
    if abs(x) >= 1000 or abs(x) < 0.01:
        return f"{x:.1e}"
    return f"{x:g}" if abs(x) >= 1 else f"{x:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-9 * step:
        out.append(round(t, 12))
        t += step
    return out


class _Frame:
    """One cartesian panel: data-to-pixel mapping plus axis furniture."""

    def __init__(self, x0, y0, width, height, xlim, ylim, title="",
                 xlabel="", ylabel=""):
        self.x0, self.y0 = x0, y0
        self.w, self.h = width, height
        lo, hi = xlim
        if hi <= lo:
            hi = lo + 1.0
        self.xlim = (lo, hi)
        lo, hi = ylim
        if hi <= lo:
            hi = lo + 1.0
        pad = 0.05 * (hi - lo)
        self.ylim = (lo - pad, hi + pad)
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x: float) -> float:
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.w

    def py(self, y: float) -> float:
        lo, hi = self.ylim
        return self.y0 + self.h - (y - lo) / (hi - lo) * self.h

    def furniture(self) -> list[str]:
        e = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}"'
             ' fill="none" stroke="#444" stroke-width="1"/>']
        for t in _ticks(*self.xlim):
            x = self.px(t)
            e.append(f'<line x1="{x:.1f}" y1="{self.y0 + self.h}" x2="{x:.1f}"'
                     f' y2="{self.y0 + self.h + 4}" stroke="#444"/>')
            e.append(f'<text x="{x:.1f}" y="{self.y0 + self.h + 16}" {FONT}'
                     f' font-size="10" text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(*self.ylim):
            y = self.py(t)
            e.append(f'<line x1="{self.x0 - 4}" y1="{y:.1f}" x2="{self.x0}"'
                     f' y2="{y:.1f}" stroke="#444"/>')
            e.append(f'<text x="{self.x0 - 7}" y="{y + 3:.1f}" {FONT}'
                     f' font-size="10" text-anchor="end">{_fmt(t)}</text>')
        if self.title:
            e.append(f'<text x="{self.x0 + self.w / 2}" y="{self.y0 - 8}" {FONT}'
                     f' font-size="12" text-anchor="middle">{self.title}</text>')
        if self.xlabel:
            e.append(f'<text x="{self.x0 + self.w / 2}" y="{self.y0 + self.h + 32}"'
                     f' {FONT} font-size="11" text-anchor="middle">{self.xlabel}</text>')
        if self.ylabel:
            cx, cy = self.x0 - 40, self.y0 + self.h / 2
            e.append(f'<text x="{cx}" y="{cy}" {FONT} font-size="11"'
                     f' text-anchor="middle" transform="rotate(-90 {cx} {cy})">'
                     f'{self.ylabel}</text>')
        return e

    def polyline(self, xs, ys, color, width=1.6) -> str:
        pts = " ".join(f"{self.px(x):.1f},{self.py(y):.1f}" for x, y in zip(xs, ys))
        return (f'<polyline points="{pts}" fill="none" stroke="{color}"'
                f' stroke-width="{width}"/>')

    def dots(self, xs, ys, color, r=3.0) -> list[str]:
        return [f'<circle cx="{self.px(x):.1f}" cy="{self.py(y):.1f}" r="{r}"'
                f' fill="{color}"/>' for x, y in zip(xs, ys)]


def _document(width: int, height: int, elements: list[str]) -> str:
    body = "\n".join(elements)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}"'
            f' height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f"{body}\n</svg>\n")


def _legend(x, y, labels, colors) -> list[str]:
    e = []
    for i, (label, color) in enumerate(zip(labels, colors)):
        yy = y + 14 * i
        e.append(f'<line x1="{x}" y1="{yy}" x2="{x + 18}" y2="{yy}"'
                 f' stroke="{color}" stroke-width="2"/>')
        e.append(f'<text x="{x + 23}" y="{yy + 3}" {FONT} font-size="10">{label}</text>')
    return e


def _load_records(path):
    try:
        records = read_records_csv(path)
    except FileNotFoundError:
        raise PlotError(f"records file not found: {path}")
    except ValueError as err:
        raise PlotError(f"{path}: {err}")
    if not records:
        raise PlotError(f"{path} holds no evaluation rows, refusing an empty chart")
    return records


def plot_loss_curves(records_paths, out_path, labels=None) -> Path:
    """Two panels: validation loss against step, and against cumulative
    compute. Several runs overlay with a shared legend."""
    if not records_paths:
        raise PlotError("no records files given")
    runs = [_load_records(p) for p in records_paths]
    if labels is None:
        labels = [Path(p).parent.name or f"run {i}" for i, p in enumerate(records_paths)]
    if len(labels) != len(runs):
        raise PlotError(f"{len(labels)} labels for {len(runs)} records files")

    all_loss = [r.loss_nats for run in runs for r in run]
    ylim = (min(all_loss), max(all_loss))
    xmax_step = max(r.step for run in runs for r in run)
    xmax_tlops = max(r.tlops_cumulative for run in runs for r in run)
    left = _Frame(60, 40, 300, 240, (0, xmax_step), ylim,
                  title="Validation loss vs step", xlabel="step", ylabel="loss (nats)")
    right = _Frame(440, 40, 300, 240, (0, xmax_tlops), ylim,
                   title="Validation loss vs compute", xlabel="cumulative token-layer ops")
    elements = left.furniture() + right.furniture()
    for i, run in enumerate(runs):
        color = PALETTE[i % len(PALETTE)]
        elements.append(left.polyline([r.step for r in run],
                                      [r.loss_nats for r in run], color))
        elements.append(right.polyline([r.tlops_cumulative for r in run],
                                       [r.loss_nats for r in run], color))
    elements += _legend(620, 60, labels, PALETTE)
    out_path = Path(out_path)
    out_path.write_text(_document(780, 330, elements))
    return out_path


def plot_pareto(sweep_csv, out_path) -> Path:
    """Quality against occupancy for a regularisation sweep. Each gated row
    is labelled with its penalty weight; the ungated row anchors the right
    edge at occupancy 1."""
    import csv

    try:
        with open(sweep_csv, newline="") as fh:
            sweep_rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise PlotError(f"sweep file not found: {sweep_csv}")
    if not sweep_rows:
        raise PlotError(f"{sweep_csv} holds no rows, refusing an empty chart")
    needed = ("lambda", "val_loss", "alpha")
    missing = [c for c in needed if c not in sweep_rows[0]]
    if missing:
        raise PlotError(f"{sweep_csv} missing columns: {missing}")
    losses = [float(r["val_loss"]) for r in sweep_rows]
    frame = _Frame(70, 40, 420, 280, (0.0, 1.05), (min(losses), max(losses)),
                   title="Quality vs occupancy", xlabel="active fraction",
                   ylabel="val loss (nats)")
    elements = frame.furniture()
    for r in sweep_rows:
        loss = float(r["val_loss"])
        if str(r["lambda"]) == "":
            x, y = frame.px(1.0), frame.py(loss)
            elements.append(f'<rect x="{x - 4:.1f}" y="{y - 4:.1f}" width="8" height="8"'
                            f' fill="{PALETTE[1]}"/>')
            elements.append(f'<text x="{x - 8:.1f}" y="{y - 8:.1f}" {FONT}'
                            f' font-size="10" text-anchor="end">no gating</text>')
            continue
        alpha = float(r["alpha"])
        x, y = frame.px(alpha), frame.py(loss)
        elements.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="{PALETTE[0]}"/>')
        label = f"{float(r['lambda']):g}"
        if r.get("note"):
            label += f" ({r['note']})"
        elements.append(f'<text x="{x + 6:.1f}" y="{y - 6:.1f}" {FONT}'
                        f' font-size="10">{label}</text>')
    out_path = Path(out_path)
    out_path.write_text(_document(520, 370, elements))
    return out_path


def plot_ee_tradeoff(sweep_csv, out_path) -> Path:
    """Early-exit quality against occupancy, one labelled point per
    confidence threshold."""
    import csv

    try:
        with open(sweep_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise PlotError(f"sweep file not found: {sweep_csv}")
    if not rows:
        raise PlotError(f"{sweep_csv} holds no rows, refusing an empty chart")
    needed = ("threshold", "val_loss", "alpha")
    missing = [c for c in needed if c not in rows[0]]
    if missing:
        raise PlotError(f"{sweep_csv} missing columns: {missing}")
    losses = [float(r["val_loss"]) for r in rows]
    frame = _Frame(70, 40, 420, 280, (0.0, 1.05), (min(losses), max(losses)),
                   title="Early exit: quality vs occupancy",
                   xlabel="active fraction", ylabel="val loss (nats)")
    elements = frame.furniture()
    pts = sorted(((float(r["alpha"]), float(r["val_loss"]), float(r["threshold"]))
                  for r in rows))
    elements.append(frame.polyline([p[0] for p in pts], [p[1] for p in pts],
                                   PALETTE[2], width=1.2))
    for alpha, loss, th in pts:
        x, y = frame.px(alpha), frame.py(loss)
        elements.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.5"'
                        f' fill="{PALETTE[2]}"/>')
        elements.append(f'<text x="{x + 5:.1f}" y="{y - 5:.1f}" {FONT}'
                        f' font-size="9">{th:g}</text>')
    out_path = Path(out_path)
    out_path.write_text(_document(520, 370, elements))
    return out_path


def plot_speedup(bench_csv, out_path) -> Path:
    """Wall-clock speedup of sparse execution against occupancy, one line
    per batch size, with the break-even line drawn at 1."""
    try:
        rows = read_bench_csv(bench_csv)
    except FileNotFoundError:
        raise PlotError(f"benchmark file not found: {bench_csv}")
    except ValueError as err:
        raise PlotError(f"{bench_csv}: {err}")
    by_batch: dict[str, list[dict]] = {}
    for r in rows:
        by_batch.setdefault(r["batch"], []).append(r)
    speeds = [r["speedup"] for r in rows]
    frame = _Frame(70, 40, 420, 280, (0.0, 1.05), (min(speeds + [1.0]), max(speeds + [1.0])),
                   title="Sparse speedup vs occupancy", xlabel="forced active fraction",
                   ylabel="speedup over dense")
    elements = frame.furniture()
    y1 = frame.py(1.0)
    elements.append(f'<line x1="{frame.x0}" y1="{y1:.1f}" x2="{frame.x0 + frame.w}"'
                    f' y2="{y1:.1f}" stroke="#999" stroke-dasharray="4 3"/>')
    labels = []
    for i, (batch, group) in enumerate(sorted(by_batch.items(), key=lambda kv: int(kv[0]))):
        group = sorted(group, key=lambda r: r["alpha"])
        color = PALETTE[i % len(PALETTE)]
        frame_xs = [r["alpha"] for r in group]
        frame_ys = [r["speedup"] for r in group]
        elements.append(frame.polyline(frame_xs, frame_ys, color))
        elements += frame.dots(frame_xs, frame_ys, color, r=2.5)
        labels.append(f"batch {batch}")
    elements += _legend(frame.x0 + frame.w - 80, 60, labels,
                        PALETTE[: len(labels)])
    out_path = Path(out_path)
    out_path.write_text(_document(520, 370, elements))
    return out_path


def _heat_color(p: float) -> str:
    # p = halting probability: 0 paints full green (active), 1 full red
    p = min(1.0, max(0.0, p))
    lo = (47, 158, 68)
    hi = (183, 50, 50)
    r = round(lo[0] + (hi[0] - lo[0]) * p)
    g = round(lo[1] + (hi[1] - lo[1]) * p)
    b = round(lo[2] + (hi[2] - lo[2]) * p)
    return f"rgb({r},{g},{b})"


def plot_heatmap(trace_csv, out_path, batch_index: int = 0) -> Path:
    """Routing-decision grid for one sequence: rows are the gated slots in
    depth order, columns are positions, colour runs green (active) to red
    (halted). The caption carries the trace-wide mean active fraction."""
    try:
        trace, _tokens = read_trace_csv(trace_csv)
    except FileNotFoundError:
        raise PlotError(f"trace file not found: {trace_csv}")
    except ValueError as err:
        raise PlotError(f"{trace_csv}: {err}")
    n_dec, bsz, seq = trace.shape
    if not 0 <= batch_index < bsz:
        raise PlotError(f"trace holds batch indices 0..{bsz - 1}, not {batch_index}")
    alpha = float(1.0 - trace.mean())
    cell, x0, y0 = 14, 90, 40
    elements = []
    for i in range(n_dec):
        elements.append(f'<text x="{x0 - 6}" y="{y0 + i * cell + cell * 0.7:.1f}" {FONT}'
                        f' font-size="10" text-anchor="end">gap {i + 1}</text>')
        for j in range(seq):
            p = float(trace[i, batch_index, j])
            elements.append(f'<rect x="{x0 + j * cell}" y="{y0 + i * cell}"'
                            f' width="{cell - 1}" height="{cell - 1}"'
                            f' fill="{_heat_color(p)}"/>')
    for j in range(0, seq, 5):
        elements.append(f'<text x="{x0 + j * cell + cell / 2:.1f}"'
                        f' y="{y0 + n_dec * cell + 12}" {FONT}'
                        f' font-size="9" text-anchor="middle">{j}</text>')
    width = max(x0 + seq * cell + 30, 360)
    height = y0 + n_dec * cell + 60
    elements.append(f'<text x="{x0}" y="{y0 - 14}" {FONT} font-size="12">'
                    f'Per-position routing, sequence {batch_index}</text>')
    elements.append(f'<text x="{x0}" y="{height - 18}" {FONT} font-size="11">'
                    f'mean active fraction over trace: {alpha:.3f}'
                    f' (green active, red halted)</text>')
    out_path = Path(out_path)
    out_path.write_text(_document(width, height, elements))
    return out_path
