"""Angle-error metrics, 15-degree category accuracy, heatmaps and run aggregation.

All metrics work in degrees. Categories are 15 degrees wide and left-open,
right-closed: bin ``k`` holds angles in ``(15k - 7.5, 15k + 7.5]``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

CATEGORY_WIDTH = 15.0
HALF_WIDTH = 7.5


@dataclass
class PredictionSet:
    predicted: np.ndarray  # degrees
    true: np.ndarray  # degrees
    angle: str = "yaw"
    run_id: str = "run0"
    indices: np.ndarray | None = None  # positions in the source dataset

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1)
        self.true = np.asarray(self.true, dtype=np.float64).reshape(-1)
        if self.predicted.shape != self.true.shape:
            raise ContractError(f"{self.predicted.size} predictions vs {self.true.size} true values")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=int).reshape(-1)

    @property
    def n(self) -> int:
        return int(self.predicted.size)

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(self.predicted - self.true)

    def to_dict(self) -> dict:
        d = {
            "angle": self.angle,
            "run_id": self.run_id,
            "n": self.n,
            "predicted": self.predicted.tolist(),
            "true": self.true.tolist(),
        }
        if self.indices is not None:
            d["indices"] = self.indices.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionSet":
        return cls(d["predicted"], d["true"], d.get("angle", "yaw"), d.get("run_id", "run0"), d.get("indices"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PredictionSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _require(s: PredictionSet, n: int) -> None:
    if s.n < n:
        raise ContractError(f"need at least {n} predictions, got {s.n}")


def mae(s: PredictionSet) -> float:
    _require(s, 1)
    return float(np.mean(s.abs_errors))


def abs_error_std(s: PredictionSet) -> float:
    """Population standard deviation of the absolute errors."""
    _require(s, 2)
    return float(np.std(s.abs_errors))


def bin_category(angle):
    """Category index k with ``15k - 7.5 < angle <= 15k + 7.5``."""
    k = np.ceil((np.asarray(angle, dtype=np.float64) - HALF_WIDTH) / CATEGORY_WIDTH).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def category_accuracy(s: PredictionSet) -> float:
    _require(s, 1)
    return float(np.mean(bin_category(s.predicted) == bin_category(s.true)))


def tolerant_accuracy(s: PredictionSet) -> float:
    """Fraction whose predicted category equals or neighbours the true one."""
    _require(s, 1)
    return float(np.mean(np.abs(bin_category(s.predicted) - bin_category(s.true)) <= 1))


def category_range_for(limit_deg: float) -> tuple[int, int]:
    """Inclusive bin range covering ``[-limit, limit]``."""
    return bin_category(-limit_deg), bin_category(limit_deg)


@dataclass
class Heatmap:
    """Rows: true category; columns: predicted category; cells in percent of the row."""

    bins: list[int]
    matrix: np.ndarray
    counts: np.ndarray  # raw counts, same shape
    empty_rows: list[int] = field(default_factory=list)
    clamped: int = 0
    normalization: str = "row (true category)"

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "bin_edges_deg": [[CATEGORY_WIDTH * b - HALF_WIDTH, CATEGORY_WIDTH * b + HALF_WIDTH] for b in self.bins],
            "interval": "left-open, right-closed",
            "normalization": self.normalization,
            "percent": self.matrix.tolist(),
            "counts": self.counts.tolist(),
            "empty_rows": self.empty_rows,
            "clamped": self.clamped,
        }

    def to_text(self) -> str:
        head = "true\\pred " + " ".join(f"{b:>6d}" for b in self.bins)
        lines = [head]
        for b, row in zip(self.bins, self.matrix):
            flag = " *" if b in self.empty_rows else ""
            lines.append(f"{b:>9d} " + " ".join(f"{v:6.1f}" for v in row) + flag)
        if self.empty_rows:
            lines.append("* no samples in this true category")
        return "\n".join(lines) + "\n"


def confusion_heatmap(s: PredictionSet, category_range: tuple[int, int] | None = None) -> Heatmap:
    """Per-true-category distribution of predicted categories, in percent.

    Bins outside ``category_range`` are clamped to the outermost bins (counted,
    with a warning). Rows with no samples stay zero and are listed in
    ``empty_rows``.
    """
    tb, pb = bin_category(s.true), bin_category(s.predicted)
    if category_range is None:
        lo, hi = int(min(tb.min(), pb.min())), int(max(tb.max(), pb.max()))
    else:
        lo, hi = category_range
    outside = int(np.sum((tb < lo) | (tb > hi)) + np.sum((pb < lo) | (pb > hi)))
    if outside:
        warnings.warn(f"{outside} category values outside [{lo}, {hi}] clamped to the outer bins", stacklevel=2)
    tb = np.clip(tb, lo, hi) - lo
    pb = np.clip(pb, lo, hi) - lo
    size = hi - lo + 1
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (tb, pb), 1)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = np.where(totals > 0, 100.0 * counts / np.maximum(totals, 1), 0.0)
    bins = list(range(lo, hi + 1))
    empty = [bins[i] for i in range(size) if totals[i, 0] == 0]
    return Heatmap(bins, pct, counts, empty, outside)


@dataclass
class EvaluationReport:
    angle: str
    mae: float
    std_dev: float
    category_accuracy: float
    tolerant_accuracy: float
    n: int
    heatmap: Heatmap | None = None
    runs: list[dict] = field(default_factory=list)
    loss_history: list[float] | None = None

    def to_dict(self) -> dict:
        d = {
            "angle": self.angle,
            "mae_deg": self.mae,
            "std_dev_deg": self.std_dev,
            "category_accuracy": self.category_accuracy,
            "tolerant_accuracy": self.tolerant_accuracy,
            "n": self.n,
            "std_dev_form": "population",
            "runs": self.runs,
        }
        if self.heatmap is not None:
            d["heatmap"] = self.heatmap.to_dict()
        if self.loss_history is not None:
            d["loss_history"] = self.loss_history
        return d

    def scalar_row(self, run_id: str = "mean") -> dict:
        return {
            "run_id": run_id,
            "angle": self.angle,
            "n": self.n,
            "mae_deg": self.mae,
            "std_dev_deg": self.std_dev,
            "category_accuracy": self.category_accuracy,
            "tolerant_accuracy": self.tolerant_accuracy,
        }


def evaluate(s: PredictionSet, category_range: tuple[int, int] | None = None) -> EvaluationReport:
    rep = EvaluationReport(
        angle=s.angle,
        mae=mae(s),
        std_dev=abs_error_std(s) if s.n >= 2 else 0.0,
        category_accuracy=category_accuracy(s),
        tolerant_accuracy=tolerant_accuracy(s),
        n=s.n,
        heatmap=confusion_heatmap(s, category_range),
    )
    rep.runs = [rep.scalar_row(s.run_id)]
    return rep


_SCALARS = ("mae", "std_dev", "category_accuracy", "tolerant_accuracy")


def aggregate_runs(reports: list[EvaluationReport]) -> EvaluationReport:
    """Unweighted mean across runs; heatmaps averaged cellwise."""
    if not reports:
        raise ContractError("aggregate_runs needs at least one report")
    angles = {r.angle for r in reports}
    if len(angles) > 1:
        raise ContractError(f"cannot aggregate reports for different angles: {sorted(angles)}")
    if len(reports) == 1:
        return reports[0]
    # math.fsum keeps the mean independent of run order.
    means = {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in _SCALARS}
    heat = None
    maps = [r.heatmap for r in reports if r.heatmap is not None]
    if len(maps) == len(reports):
        lo = min(m.bins[0] for m in maps)
        hi = max(m.bins[-1] for m in maps)
        size = hi - lo + 1
        total = np.zeros((len(maps), size, size))
        counts = np.zeros((size, size), dtype=np.int64)
        for i, m in enumerate(maps):
            off = m.bins[0] - lo
            k = len(m.bins)
            total[i, off : off + k, off : off + k] = m.matrix
            counts[off : off + k, off : off + k] += m.counts
        pct = np.sort(total, axis=0).sum(axis=0) / len(maps)
        bins = list(range(lo, hi + 1))
        empty = [bins[i] for i in range(size) if counts[i].sum() == 0]
        heat = Heatmap(bins, pct, counts, empty, sum(m.clamped for m in maps),
                       normalization="row (true category), mean over runs")
    runs = [row for r in reports for row in r.runs]
    return EvaluationReport(
        angle=reports[0].angle,
        n=sum(r.n for r in reports),
        heatmap=heat,
        runs=runs,
        **means,
    )


def write_report_json(report: EvaluationReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def write_report_csv(report: EvaluationReport, path) -> Path:
    path = Path(path)
    fields = ["run_id", "angle", "n", "mae_deg", "std_dev_deg", "category_accuracy", "tolerant_accuracy"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in report.runs:
            w.writerow(row)
        if len(report.runs) != 1:
            w.writerow(report.scalar_row("mean"))
    return path
