"""Confusion-matrix metrics with MDD as the positive class.

Rates are fractions in [0, 1].  A rate whose denominator is zero is
undefined and reported as ``None``, never as 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

RATE_NAMES = ("accuracy", "sensitivity", "specificity", "f1")


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    delta_accuracy: float | None = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))
        if self.n == 0:
            raise ValidationError("empty confusion matrix")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def sensitivity(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1(self) -> float | None:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def with_delta(self, reference_accuracy: float | None) -> MetricsReport:
        """Attach ``accuracy - reference_accuracy`` (both fractions)."""
        if reference_accuracy is None:
            return self
        return MetricsReport(self.tp, self.fp, self.fn, self.tn,
                             self.accuracy - float(reference_accuracy))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update({name: getattr(self, name) for name in RATE_NAMES})
        return d


def compute_metrics(y_true, y_pred) -> MetricsReport:
    """Confusion counts and rates from 0/1 (or "MDD"/"NC") vectors."""
    y_true = _binary(y_true, "y_true")
    y_pred = _binary(y_pred, "y_pred")
    if y_true.shape != y_pred.shape:
        raise ValidationError(f"length mismatch: {y_true.size} labels vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise ValidationError("no predictions to score")
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    return MetricsReport(tp, fp, fn, tn)


def _binary(v, name):
    a = np.asarray(v)
    if a.dtype.kind in "US":
        if not np.all(np.isin(a, ("MDD", "NC"))):
            raise ValidationError(f"{name} labels must be MDD or NC")
        return (a == "MDD").astype(np.int64)
    a = a.astype(np.int64) if a.dtype.kind == "b" else a
    if a.ndim != 1 or not np.all(np.isin(a, (0, 1))):
        raise ValidationError(f"{name} must be a 1-D vector of 0/1")
    return a.astype(np.int64)


# ---------------------------------------------------------------------------
# aggregation over splits

@dataclass(frozen=True)
class Aggregate:
    """Mean and population std (ddof=0) of each rate over the splits where
    it is defined; ``defined`` counts those splits."""

    mean: dict
    std: dict
    defined: dict

    def formatted(self, name: str) -> str:
        if self.mean[name] is None:
            return "n/a"
        return format_mean_std(self.mean[name], self.std[name])

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "defined": self.defined,
                "formatted": {n: self.formatted(n) for n in self.mean}}


def format_mean_std(mean: float, std: float) -> str:
    """Percentages with two decimals, e.g. ``96.88±0.85``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def aggregate(reports: Sequence[MetricsReport]) -> Aggregate:
    if not reports:
        raise ValidationError("nothing to aggregate")
    names = list(RATE_NAMES)
    if any(r.delta_accuracy is not None for r in reports):
        names.append("delta_accuracy")
    mean, std, defined = {}, {}, {}
    for name in names:
        vals = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None])
        defined[name] = int(vals.size)
        mean[name] = float(vals.mean()) if vals.size else None
        std[name] = float(vals.std()) if vals.size else None
    return Aggregate(mean, std, defined)


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def metrics_table(rows: Sequence[tuple[str, MetricsReport]], title: str = "") -> str:
    """Aligned text table: one row per split, rates in percent."""
    header = ["split", "TP", "FP", "FN", "TN", "Accuracy", "Sensitivity", "Specificity", "F1"]
    with_delta = any(r.delta_accuracy is not None for _, r in rows)
    if with_delta:
        header.append("dAccuracy")
    body = []
    for name, r in rows:
        line = [name, str(r.tp), str(r.fp), str(r.fn), str(r.tn),
                _pct(r.accuracy), _pct(r.sensitivity), _pct(r.specificity), _pct(r.f1)]
        if with_delta:
            line.append(_pct(r.delta_accuracy))
        body.append(line)
    return _align(header, body, title)


def aggregate_table(rows: Sequence[tuple[str, Aggregate]], title: str = "") -> str:
    """One row per configuration with mean±std cells."""
    header = ["configuration", "Accuracy", "Sensitivity", "Specificity", "F1"]
    body = [[name] + [a.formatted(n) for n in RATE_NAMES] for name, a in rows]
    return _align(header, body, title)


def _align(header, body, title):
    widths = [max(len(str(row[j])) for row in [header, *body]) for j in range(len(header))]

    def fmt(row):
        cells = (str(c).ljust(w) if j == 0 else str(c).rjust(w)
                 for j, (c, w) in enumerate(zip(row, widths)))
        return "  ".join(cells).rstrip()

    lines = ([title] if title else []) + [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in body]
    return "\n".join(lines) + "\n"
