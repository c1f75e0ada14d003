"""Classification metrics and the label-correlation analysis of feature categories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

BETACF_TOL = 1e-12
BETACF_MAX_ITER = 10_000


# --------------------------------------------------------------------------
# performance metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    # binary fields are only filled for K == 2, positive class = 1
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _f1(p, r):
    return np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1.0), 0.0)


def per_class_scores(true_labels, predicted_labels, k):
    """Per-class precision, recall, F1 and support (zero-division -> 0)."""
    y = np.asarray(true_labels, dtype=np.int64)
    yhat = np.asarray(predicted_labels, dtype=np.int64)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, yhat), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_count = conf.sum(axis=0)
    support = conf.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros(k), where=pred_count > 0)
    recall = np.divide(tp, support, out=np.zeros(k), where=support > 0)
    return precision, recall, _f1(precision, recall), support


def classification_metrics(true_labels, predicted_labels, k: int) -> MetricReport:
    y = np.asarray(true_labels)
    yhat = np.asarray(predicted_labels)
    if y.shape != yhat.shape or y.ndim != 1:
        raise DimensionError("labels", y.shape, yhat.shape, "classification_metrics")
    if y.size == 0:
        raise ValidationError("no labels to score")
    for name, arr in (("true", y), ("predicted", yhat)):
        if np.any(arr < 0) or np.any(arr >= k):
            raise ValidationError(f"{name} labels must lie in [0, {k})")
    precision, recall, f1, support = per_class_scores(y, yhat, k)
    w = support / support.sum()
    report = dict(
        accuracy=float(np.mean(y == yhat)),
        weighted_precision=float(w @ precision),
        weighted_recall=float(w @ recall),
        weighted_f1=float(w @ f1),
    )
    if k == 2:
        report.update(precision=float(precision[1]), recall=float(recall[1]), f1=float(f1[1]))
    return MetricReport(**report)


# --------------------------------------------------------------------------
# point-biserial correlation
# --------------------------------------------------------------------------

def _betacf(a, b, x):
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_TOL:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValidationError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValidationError(f"betainc needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t with ``df`` degrees of freedom."""
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def point_biserial(values, labels):
    """Correlation between a continuous variable and a 0/1 label.

    ``r = (M1 - M0) / s * sqrt(n1 * n0 / n**2)`` with ``s`` the population
    standard deviation of ``values``; this equals Pearson's r against the 0/1
    coding. The p-value is two-sided from ``t = r * sqrt(n - 2) / sqrt(1 - r**2)``.

    Returns:
        ``(r, p_value)``; ``|r| == 1`` gives ``p == 0``.
    """
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 1 or y.shape != x.shape:
        raise DimensionError("values/labels", x.shape, y.shape, "point_biserial")
    n = x.size
    if n < 3:
        raise ValidationError("correlation undefined: need at least 3 observations")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0/1")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = n - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("correlation undefined: only one label group present")
    s = x.std()
    if s == 0 or np.all(x == x[0]):
        raise ValidationError("correlation undefined: values are constant")
    r = (x[pos].mean() - x[~pos].mean()) / s * math.sqrt(n1 * n0 / (n * n))
    r = float(min(1.0, max(-1.0, r)))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t = r * math.sqrt(df) / math.sqrt(1.0 - r * r)
    return r, t_two_sided_p(t, df)


# --------------------------------------------------------------------------
# Benjamini-Hochberg
# --------------------------------------------------------------------------

def benjamini_hochberg(p_values, q: float = 0.05) -> np.ndarray:
    """Step-up false-discovery-rate control; returns a boolean rejection mask."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError("need a non-empty vector of p-values")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValidationError("p-values must lie in [0, 1]")
    if not 0 < q <= 1:
        raise ValidationError(f"q must lie in (0, 1], got {q}")
    m = p.size
    sorted_p = np.sort(p)
    passing = np.flatnonzero(sorted_p <= np.arange(1, m + 1) * q / m)
    if passing.size == 0:
        return np.zeros(m, dtype=bool)
    # everything at or below the largest passing p-value is rejected, ties included
    return p <= sorted_p[passing[-1]]


# --------------------------------------------------------------------------
# linguistic analysis
# --------------------------------------------------------------------------

POSITIVE = "positive-class"
NEGATIVE = "negative-class"


@dataclass(frozen=True)
class CorrelationRow:
    feature: str
    r_pb: float
    p_value: float
    significant: bool

    @property
    def direction(self) -> str:
        return POSITIVE if self.r_pb > 0 else NEGATIVE


@dataclass(frozen=True)
class CorrelationReport:
    rows: list          # defined correlations, sorted by |r| descending then name
    undefined: list     # feature names whose correlation could not be computed
    q: float


def linguistic_analysis(features, feature_names, labels, q: float = 0.05) -> CorrelationReport:
    """Point-biserial correlation of every feature column with a binary label.

    Columns where the correlation is undefined (constant values) are listed in
    ``undefined`` and left out of the multiple-comparison correction.
    """
    x = np.asarray(features, dtype=np.float64)
    names = list(feature_names)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[1] != len(names):
        raise DimensionError("features", f"(n, {len(names)})", x.shape, "linguistic_analysis")
    if y.shape != (x.shape[0],):
        raise DimensionError("labels", (x.shape[0],), y.shape, "linguistic_analysis")

    defined, undefined = [], []
    for j, name in enumerate(names):
        col = x[:, j]
        if np.all(col == col[0]):
            undefined.append(name)
            continue
        r, p = point_biserial(col, y)
        defined.append((name, r, p))
    if not defined:
        return CorrelationReport([], undefined, q)
    reject = benjamini_hochberg([p for _, _, p in defined], q)
    rows = [CorrelationRow(name, r, p, bool(flag)) for (name, r, p), flag in zip(defined, reject)]
    rows.sort(key=lambda row: (-abs(row.r_pb), row.feature))
    return CorrelationReport(rows, undefined, q)


def write_correlation_csv(path, report: CorrelationReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_direction", "feature", "correlation", "p_value", "significant"])
        for row in report.rows:
            w.writerow([row.direction, row.feature, repr(row.r_pb), repr(row.p_value),
                        str(row.significant).lower()])
        for name in report.undefined:
            w.writerow(["undefined", name, "", "", "false"])
