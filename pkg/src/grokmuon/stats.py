"""Grokking-epoch statistics: t-tests, group summaries and boxplots.

Quartiles use linear interpolation between order statistics (numpy's default
``"linear"`` percentile method): the q-quantile of sorted ``x[0..n-1]`` sits at
fractional index ``q * (n - 1)``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import AnalysisError

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_survival(t: float, df: float) -> float:
    """Upper tail ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t > 0 else 1.0 - tail


def _mean_var(x: np.ndarray) -> tuple[float, float]:
    m = math.fsum(x) / len(x)
    return m, math.fsum((x - m) ** 2) / (len(x) - 1)


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float], pooled: bool = False) -> TTestResult:
    """Two-sided two-sample t-test, Welch by default or pooled-variance Student."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise AnalysisError(f"t-test needs at least 2 values per sample, got n_a={na}, n_b={nb}")
    ma, va = _mean_var(a)
    mb, vb = _mean_var(b)
    if va == 0.0 and vb == 0.0:
        if ma == mb:
            return TTestResult(0.0, float(na + nb - 2), 1.0, ma, mb, na, nb)
        raise AnalysisError(f"both samples have zero variance (n_a={na}, n_b={nb})")
    if pooled:
        df = float(na + nb - 2)
        sp = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = sp * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        df = se2 * se2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
    t = (ma - mb) / math.sqrt(se2)
    p = min(1.0, 2.0 * t_survival(abs(t), df))
    return TTestResult(t, df, p, ma, mb, na, nb)


def quartiles(values: Iterable[float]) -> tuple[float, float, float]:
    x = np.asarray(list(values), dtype=np.float64)
    q1, med, q3 = np.percentile(x, [25, 50, 75], method="linear")
    return float(q1), float(med), float(q3)


@dataclass
class BoxStats:
    group: str
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    outliers: list

    def csv_row(self) -> list:
        return [self.group, _fmt(self.min), _fmt(self.q1), _fmt(self.median), _fmt(self.q3),
                _fmt(self.max), ";".join(_fmt(v) for v in self.outliers)]


def box_stats(group: str, values: Sequence[float]) -> BoxStats:
    """Tukey box: ``min``/``max`` are the whisker ends (extreme non-outliers)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise AnalysisError(f"group {group!r} has no values")
    q1, med, q3 = quartiles(x)
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo) & (x <= hi)]
    outliers = [float(v) for v in x if v < lo or v > hi]
    return BoxStats(group, int(x.size), float(inside.min()), q1, med, q3, float(inside.max()), outliers)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    v = float(v)
    return str(int(v)) if v.is_integer() else f"{v:.6g}"


SUMMARY_HEADER = ("group", "n", "grok_rate", "mean_epoch", "median_epoch", "min", "max")
BOXPLOT_HEADER = ("group", "min", "q1", "median", "q3", "max", "outliers")


def _group_key(run, by: Sequence[str]) -> str:
    return "/".join(str(getattr(run, k) if not isinstance(run, dict) else run[k]) for k in by)


def _get(run, key):
    return run[key] if isinstance(run, dict) else getattr(run, key)


def group_runs(runs, by: Sequence[str] = ("optimizer",)) -> dict[str, list]:
    groups: dict[str, list] = {}
    for r in runs:
        groups.setdefault(_group_key(r, by), []).append(r)
    return dict(sorted(groups.items()))


def grok_epochs(runs) -> list[float]:
    return [float(_get(r, "grok_epoch")) for r in runs if _get(r, "grok_epoch") is not None]


def summarize(runs, by: Sequence[str] = ("optimizer",)) -> list[dict]:
    """Per group: run count, grok rate and grok-epoch statistics over grokked runs.

    ``runs`` holds RunResult objects or dicts with ``grok_epoch`` (None when
    the run never grokked) plus the grouping keys.
    """
    rows = []
    for group, members in group_runs(runs, by).items():
        epochs = grok_epochs(members)
        row = {"group": group, "n": len(members), "grok_rate": len(epochs) / len(members),
               "mean_epoch": None, "median_epoch": None, "min": None, "max": None}
        if epochs:
            row.update(mean_epoch=float(np.mean(epochs)), median_epoch=float(np.median(epochs)),
                       min=min(epochs), max=max(epochs))
        rows.append(row)
    return rows


def boxplot_stats(runs, by: Sequence[str] = ("optimizer",)) -> tuple[list[BoxStats], list[str]]:
    """Box statistics per group; groups with no grokked run are skipped with a warning."""
    boxes, skipped = [], []
    for group, members in group_runs(runs, by).items():
        epochs = grok_epochs(members)
        if not epochs:
            skipped.append(group)
            warnings.warn(f"boxplot: group {group!r} has no grokked runs; omitted", stacklevel=2)
            continue
        boxes.append(box_stats(group, epochs))
    return boxes, skipped


def write_summary_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r["group"], r["n"], f"{r['grok_rate']:.6g}"] +
                       [_fmt(r[k]) for k in ("mean_epoch", "median_epoch", "min", "max")])


def write_boxplot_csv(boxes: list[BoxStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOXPLOT_HEADER)
        for b in boxes:
            w.writerow(b.csv_row())


def boxplot_svg(boxes: list[BoxStats], title: str = "Grokking epoch by optimizer") -> str:
    """Side-by-side vertical boxplots as a standalone SVG document."""
    width, height = 120 + 140 * max(1, len(boxes)), 360
    top, bottom, left = 50, 300, 70
    values = [v for b in boxes for v in (b.min, b.max, *b.outliers)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def y(v):
        return bottom - (v - lo) / (hi - lo) * (bottom - top)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="25" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{width - 20}" y2="{bottom}" stroke="black"/>',
    ]
    for tick in np.linspace(lo + pad, hi - pad, 5):
        out.append(f'<line x1="{left - 5}" y1="{y(tick):.1f}" x2="{left}" y2="{y(tick):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.0f}</text>')
    for i, b in enumerate(boxes):
        cx = left + 80 + 140 * i
        half = 30
        out.append(f'<g class="box" data-group="{b.group}">')
        out.append(f'<line x1="{cx}" y1="{y(b.min):.1f}" x2="{cx}" y2="{y(b.q1):.1f}" stroke="black"/>')
        out.append(f'<line x1="{cx}" y1="{y(b.q3):.1f}" x2="{cx}" y2="{y(b.max):.1f}" stroke="black"/>')
        for v in (b.min, b.max):
            out.append(f'<line x1="{cx - half / 2}" y1="{y(v):.1f}" x2="{cx + half / 2}" y2="{y(v):.1f}" stroke="black"/>')
        out.append(f'<rect x="{cx - half}" y="{y(b.q3):.1f}" width="{2 * half}" '
                   f'height="{max(y(b.q1) - y(b.q3), 0.5):.1f}" fill="#9ecae1" stroke="black"/>')
        out.append(f'<line x1="{cx - half}" y1="{y(b.median):.1f}" x2="{cx + half}" y2="{y(b.median):.1f}" '
                   f'stroke="black" stroke-width="2"/>')
        for v in b.outliers:
            out.append(f'<circle cx="{cx}" cy="{y(v):.1f}" r="3" fill="none" stroke="black"/>')
        out.append(f'<text x="{cx}" y="{bottom + 20}" text-anchor="middle">{b.group}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def boxplot_emit(runs, out_dir, by: Sequence[str] = ("optimizer",)) -> list[BoxStats]:
    """Write ``boxplot.csv`` and ``boxplot.svg`` into ``out_dir``."""
    from pathlib import Path

    out_dir = Path(out_dir)
    boxes, _ = boxplot_stats(runs, by)
    write_boxplot_csv(boxes, out_dir / "boxplot.csv")
    (out_dir / "boxplot.svg").write_text(boxplot_svg(boxes))
    return boxes
