"""ROC/AUC, threshold metrics, multi-run aggregation and report/plot emitters."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .cohort import quantile
from .errors import EmptyInput, OneClassOnly

THRESHOLD = 0.50
GRID_POINTS = 101
# Row order and labels of the results table.
METRIC_ROWS = [("auc", "AUC"), ("sensitivity", "sensitivity"), ("specificity", "specificity"),
               ("ppv", "PPV"), ("npv", "NPV"), ("f1", "F1 score")]


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def _check_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise EmptyInput("no samples")
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion_at(scores, labels, threshold: float = THRESHOLD) -> Confusion:
    """Confusion counts; a sample is predicted positive iff ``score >= threshold``."""
    s, y = _check_inputs(scores, labels)
    pred = s >= threshold
    return Confusion(
        tp=int(np.sum(pred & (y == 1))), fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))), fn=int(np.sum(~pred & (y == 1))),
    )


def _ratio(num, den) -> Optional[float]:
    return num / den if den else None


@dataclass(frozen=True)
class RunMetrics:
    """Per-run metrics; ``None`` marks an undefined (0/0) value."""

    auc: Optional[float] = None
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    ppv: Optional[float] = None
    npv: Optional[float] = None
    f1: Optional[float] = None


def threshold_metrics(c: Confusion) -> RunMetrics:
    sens = _ratio(c.tp, c.tp + c.fn)
    ppv = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if sens is not None and ppv is not None and ppv + sens > 0:
        f1 = 2 * ppv * sens / (ppv + sens)
    return RunMetrics(None, sens, _ratio(c.tn, c.tn + c.fp), ppv, _ratio(c.tn, c.tn + c.fn), f1)


def _split_classes(scores, labels):
    s, y = _check_inputs(scores, labels)
    if y.min() == y.max():
        raise OneClassOnly("AUC needs both positive and negative samples")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half (mid-ranks)."""
    s, y = _split_classes(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # descending; thresholds[0] = +inf for the (0, 0) point

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))


def roc_curve(scores, labels) -> RocCurve:
    """Sweep the distinct scores in descending order; each tie group is one (diagonal) step."""
    s, y = _split_classes(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
    return RocCurve(
        fpr=np.r_[0.0, fp / n_neg], tpr=np.r_[0.0, tp / n_pos], thresholds=np.r_[np.inf, s[last_of_group]]
    )


def fpr_grid(points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def roc_at(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Right-continuous step evaluation: best TPR among curve points with FPR <= grid value."""
    idx = np.searchsorted(curve.fpr, grid + 1e-12, side="right") - 1
    return np.maximum.accumulate(curve.tpr)[idx]


@dataclass(frozen=True)
class RocEnvelope:
    fpr: np.ndarray
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray


def roc_envelope(curves, grid_points: int = GRID_POINTS) -> RocEnvelope:
    curves = list(curves)
    if not curves:
        raise EmptyInput("no ROC curves to combine")
    grid = fpr_grid(grid_points)
    tprs = np.stack([roc_at(c, grid) for c in curves])
    return RocEnvelope(grid, tprs.mean(axis=0), tprs.min(axis=0), tprs.max(axis=0))


@dataclass(frozen=True)
class MetricStats:
    n: int
    excluded: int
    mean: float
    std: float  # sample std (n - 1); nan for a single run
    min: float
    max: float
    median: float
    q25: float
    q75: float

    def cell(self) -> str:
        std = "-" if math.isnan(self.std) else f"{self.std:.2f}"
        return f"{self.mean:.2f} ({std})"


def metric_stats(values) -> Optional[MetricStats]:
    defined = [float(v) for v in values if v is not None]
    excluded = len(values) - len(defined)
    if not defined:
        return None
    n = len(defined)
    mean = sum(defined) / n
    std = math.sqrt(sum((v - mean) ** 2 for v in defined) / (n - 1)) if n > 1 else math.nan
    return MetricStats(n, excluded, mean, std, min(defined), max(defined),
                       quantile(defined, 0.5), quantile(defined, 0.25), quantile(defined, 0.75))


def aggregate_runs(runs) -> dict[str, Optional[MetricStats]]:
    """Per-metric statistics across runs; undefined values are excluded and counted."""
    runs = list(runs)
    if not runs:
        raise EmptyInput("no runs to aggregate")
    return {f.name: metric_stats([getattr(r, f.name) for r in runs]) for f in fields(RunMetrics)}


def emit_report(aggregates: dict, fmt: str = "text") -> str:
    """Render ``{model: aggregate}`` as the results table (text) or the long CSV form."""
    models = list(aggregates)
    if fmt == "text":
        label_width = max(len(label) for _, label in METRIC_ROWS)
        cells = {m: {key: (a[key].cell() if a[key] else "n/a") for key, _ in METRIC_ROWS}
                 for m, a in aggregates.items()}
        widths = [max(len(m), *(len(c) for c in cells[m].values())) for m in models]
        lines = ["  ".join([" " * label_width] + [m.rjust(w) for m, w in zip(models, widths)])]
        for key, label in METRIC_ROWS:
            lines.append("  ".join([label.ljust(label_width)] +
                                   [cells[m][key].rjust(w) for m, w in zip(models, widths)]))
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["model", "metric", "mean", "std", "min", "max", "median", "q25", "q75"])
        for m in models:
            for key, label in METRIC_ROWS:
                st = aggregates[m][key]
                if st is None:
                    writer.writerow([m, label] + [""] * 7)
                else:
                    writer.writerow([m, label] + [_num(v) for v in
                                                  (st.mean, st.std, st.min, st.max, st.median, st.q25, st.q75)])
        return out.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def _num(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def roc_csv(env: RocEnvelope) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["fpr", "tpr_mean", "tpr_min", "tpr_max"])
    for row in zip(env.fpr, env.mean, env.min, env.max):
        writer.writerow([repr(float(v)) for v in row])
    return out.getvalue()


def read_roc_csv(path) -> RocEnvelope:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) for r in rows])
    return RocEnvelope(col("fpr"), col("tpr_mean"), col("tpr_min"), col("tpr_max"))


def roc_svg(env: RocEnvelope, title: str = "", size: int = 400) -> str:
    """Mean ROC polyline over a shaded min/max band, with the chance diagonal."""
    pad = 40
    plot = size - 2 * pad
    px = lambda f: pad + f * plot
    py = lambda t: size - pad - t * plot
    pts = lambda xs, ys: " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    band = pts(env.fpr, env.max) + " " + pts(env.fpr[::-1], env.min[::-1])
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="white" stroke="black"/>',
        f'<line class="diagonal" x1="{px(0)}" y1="{py(0)}" x2="{px(1)}" y2="{py(1)}" stroke="gray" stroke-dasharray="4,4"/>',
        f'<polygon class="envelope" points="{band}" fill="steelblue" fill-opacity="0.3" stroke="none"/>',
        f'<polyline class="mean" points="{pts(env.fpr, env.mean)}" fill="none" stroke="steelblue" stroke-width="2"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">false positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">true positive rate</text>',
        f'<text x="{size / 2}" y="{pad - 12}" text-anchor="middle" font-size="14">{title}</text>',
        "</svg>",
    ]) + "\n"


def emit_roc(env: RocEnvelope, path, title: str = "") -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.svg``; returns both paths."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    csv_path.write_text(roc_csv(env))
    svg_path.write_text(roc_svg(env, title))
    return csv_path, svg_path
