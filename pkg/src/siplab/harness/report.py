"""CSV learning curves, comparison tables and dependency-free SVG charts.

CSV schema (UTF-8, header row, ``.`` decimal separator)::

    iteration,wall_s,loss,mae_x,rel_acc

``loss``, ``mae_x`` and ``rel_acc`` are written with ``repr`` so that equal runs
produce equal bytes; undefined quantities are written as ``nan``.  Only
``wall_s`` depends on the machine.
"""

from __future__ import annotations

import csv
import html
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from ..train import TrainRecord

COLUMNS = ("iteration", "wall_s", "loss", "mae_x", "rel_acc")
TIMED_COLUMNS = ("wall_s",)


def _fmt(v: float) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


class CsvLog:
    """Append-only CSV writer that flushes every row, so a crash leaves a valid partial file."""

    def __init__(self, path, extra_columns: Sequence[str] = ()):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self.extra = tuple(extra_columns)
        self._w.writerow(COLUMNS + self.extra)
        self._fh.flush()

    def write(self, rec: TrainRecord, extra: Sequence[float] = ()) -> None:
        self._w.writerow([str(rec.iteration), f"{rec.wall_s:.6f}", _fmt(rec.loss), _fmt(rec.mae_x),
                          _fmt(rec.rel_acc)] + [_fmt(e) for e in extra])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, records: Iterable[TrainRecord]) -> Path:
    with CsvLog(path) as log:
        for r in records:
            log.write(r)
    return Path(path)


def read_csv(path) -> list[TrainRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainRecord(int(r["iteration"]), float(r["wall_s"]), float(r["loss"]), float(r["mae_x"]),
                        float(r["rel_acc"])) for r in rows]


def strip_timing(text: str) -> str:
    """CSV text with the wall-clock column blanked, for byte comparisons between runs."""
    lines = text.splitlines()
    col = lines[0].split(",").index("wall_s")
    out = [lines[0]]
    for line in lines[1:]:
        cells = line.split(",")
        cells[col] = ""
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


# -- aggregation ---------------------------------------------------------------------------

def last_fraction_mean(values: Sequence[float], fraction: float = 0.1) -> float:
    """Mean of the last ``fraction`` of ``values`` (at least one value)."""
    if not len(values):
        raise ValueError("no values to aggregate")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = max(1, int(round(len(values) * fraction)))
    return float(np.mean(np.asarray(values, dtype=np.float64)[-k:]))


def running_average(values: Sequence[float], window: int = 64) -> np.ndarray:
    """Trailing mean over up to ``window`` previous values (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be positive")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _at_iteration(recs: list[TrainRecord], it: int) -> TrainRecord:
    return max((r for r in recs if r.iteration <= it), key=lambda r: r.iteration)


def _at_time(recs: list[TrainRecord], t: float) -> TrainRecord | None:
    within = [r for r in recs if r.wall_s <= t]
    return within[-1] if within else None


def summary_table(curves: dict[str, list[TrainRecord]], metric: str = "mae_x", window: int = 64) -> str:
    """Compare methods at the last common iteration and at the shortest common wall-clock.

    Values are running averages over ``window`` records ending at the matched point.
    """
    curves = {k: v for k, v in curves.items() if v}
    if not curves:
        raise ValueError("no curves to summarise")
    it = min(v[-1].iteration for v in curves.values())
    t = min(v[-1].wall_s for v in curves.values())

    def smoothed(recs, upto):
        vals = [getattr(r, metric) for r in recs if r.iteration <= upto.iteration]
        return float(running_average(vals, window)[-1])

    rows = [f"| method | {metric} @ iteration {it} | {metric} @ {t:.2f} s | iterations in {t:.2f} s |",
            "|---|---|---|---|"]
    for name, recs in curves.items():
        a = smoothed(recs, _at_iteration(recs, it))
        r_t = _at_time(recs, t)
        b = smoothed(recs, r_t) if r_t else float("nan")
        n_t = r_t.iteration if r_t else 0
        rows.append(f"| {name} | {a:.6g} | {b:.6g} | {n_t} |")
    return "\n".join(rows) + "\n"


# -- SVG -----------------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def svg_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
              xlabel: str = "iteration", ylabel: str = "", log_y: bool = True,
              width: int = 640, height: int = 400) -> str:
    """Minimal line chart; non-finite (and, for a log axis, non-positive) points are skipped."""
    left, right, top, bottom = 70, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    clean = {}
    for name, (xs, ys) in series.items():
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        ok = np.isfinite(xs) & np.isfinite(ys) & ((ys > 0) if log_y else True)
        if ok.any():
            clean[name] = (xs[ok], np.log10(ys[ok]) if log_y else ys[ok])
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{left + pw / 2}" y="18" text-anchor="middle">{html.escape(title)}</text>',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    if clean:
        x_lo = min(v[0].min() for v in clean.values())
        x_hi = max(v[0].max() for v in clean.values())
        y_lo = min(v[1].min() for v in clean.values())
        y_hi = max(v[1].max() for v in clean.values())
        x_hi = x_hi if x_hi > x_lo else x_lo + 1
        y_hi = y_hi if y_hi > y_lo else y_lo + 1
        px = lambda x: left + (x - x_lo) / (x_hi - x_lo) * pw
        py = lambda y: top + ph - (y - y_lo) / (y_hi - y_lo) * ph
        for frac in np.linspace(0, 1, 5):
            xv, yv = x_lo + frac * (x_hi - x_lo), y_lo + frac * (y_hi - y_lo)
            ylab = f"1e{yv:.1f}" if log_y else f"{yv:.3g}"
            parts.append(f'<text x="{px(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.4g}</text>')
            parts.append(f'<text x="{left - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{ylab}</text>')
        for i, (name, (xs, ys)) in enumerate(clean.items()):
            color = _PALETTE[i % len(_PALETTE)]
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            ly = top + 15 + 18 * i
            parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                         f'stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{html.escape(name)}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{html.escape(xlabel)}</text>')
    parts.append(f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {top + ph / 2})">{html.escape(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def learning_curve_svg(curves: dict[str, list[TrainRecord]], metric: str = "mae_x", window: int = 64,
                       title: str = "") -> str:
    series = {name: ([r.iteration for r in recs], running_average([getattr(r, metric) for r in recs], window))
              for name, recs in curves.items()}
    return svg_chart(series, title=title, ylabel=f"{metric} (running mean, {window})")
