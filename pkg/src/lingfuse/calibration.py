"""Expected and adaptive calibration error, plus reliability-table data."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class PredictionSet:
    probs: np.ndarray              # (N, K)
    true_labels: np.ndarray        # (N,)
    predicted_labels: np.ndarray   # argmax, ties to the lowest index
    confidences: np.ndarray        # probability of the predicted label

    @classmethod
    def from_probs(cls, probs, true_labels) -> "PredictionSet":
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(true_labels)
        if probs.ndim != 2 or probs.shape[0] < 1 or probs.shape[1] < 2:
            raise DimensionError("probs", "(N>=1, K>=2) matrix", probs.shape, "PredictionSet")
        if labels.shape != (probs.shape[0],):
            raise DimensionError("true_labels", (probs.shape[0],), labels.shape, "PredictionSet")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValidationError("probabilities must be finite and non-negative")
        bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOL)
        if bad.size:
            raise ValidationError(f"row {int(bad[0])} of probs does not sum to 1")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.mod(labels, 1) == 0):
                raise ValidationError("true labels must be integers")
            labels = labels.astype(np.int64)
        k = probs.shape[1]
        if np.any(labels < 0) or np.any(labels >= k):
            raise ValidationError(f"true labels must lie in [0, {k})")
        pred = probs.argmax(axis=1)
        conf = probs[np.arange(len(pred)), pred]
        return cls(probs, labels.astype(np.int64), pred, conf)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    @property
    def correct(self) -> np.ndarray:
        return self.predicted_labels == self.true_labels


@dataclass(frozen=True)
class CalibrationConfig:
    num_bins: int = 10     # equal-width bins for ECE
    num_ranges: int = 10   # equal-count ranges for ACE

    def __post_init__(self):
        if self.num_bins < 1 or self.num_ranges < 1:
            raise ValidationError("num_bins and num_ranges must be >= 1")


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float


def bin_edges(m: int) -> np.ndarray:
    return np.arange(m + 1) / m


def ece(preds: PredictionSet, cfg: CalibrationConfig = CalibrationConfig()):
    """Expected calibration error over bins ``((m-1)/M, m/M]``.

    Returns:
        ``(ece, bins)``; empty bins report zero accuracy and confidence and
        contribute nothing.
    """
    m = cfg.num_bins
    edges = bin_edges(m)
    # side="left" puts a value equal to an upper edge into that edge's bin
    idx = np.clip(np.searchsorted(edges, preds.confidences, side="left") - 1, 0, m - 1)
    counts = np.bincount(idx, minlength=m)
    acc_sum = np.bincount(idx, weights=preds.correct.astype(np.float64), minlength=m)
    conf_sum = np.bincount(idx, weights=preds.confidences, minlength=m)
    nz = counts > 0
    acc = np.zeros(m)
    conf = np.zeros(m)
    acc[nz] = acc_sum[nz] / counts[nz]
    conf[nz] = conf_sum[nz] / counts[nz]
    total = float(np.sum(counts / preds.n * np.abs(acc - conf)))
    bins = [Bin(float(edges[i]), float(edges[i + 1]), int(counts[i]), float(acc[i]), float(conf[i]))
            for i in range(m)]
    return total, bins


def range_sizes(n: int, r: int) -> np.ndarray:
    """Group sizes for ``n`` sorted items in ``r`` ranges; the last ``n % r`` get one extra."""
    sizes = np.full(r, n // r, dtype=np.int64)
    if n % r:
        sizes[r - n % r:] += 1
    return sizes


def ace(preds: PredictionSet, cfg: CalibrationConfig = CalibrationConfig()):
    """Adaptive calibration error over per-class equal-count ranges.

    For each class the column of predicted probabilities is sorted (stable, so
    ties keep sample order) and cut into ``R`` contiguous groups.

    Returns:
        ``(ace, ranges)`` where ``ranges[k]`` lists the ``R`` groups of class k.
    """
    n, k, r = preds.n, preds.k, cfg.num_ranges
    if n < r:
        raise ValidationError(f"ACE needs at least R={r} predictions, got {n}")
    bounds = np.concatenate([[0], np.cumsum(range_sizes(n, r))])
    total = 0.0
    per_class = []
    for c in range(k):
        col = preds.probs[:, c]
        order = np.argsort(col, kind="stable")
        p_sorted = col[order]
        hit = (preds.true_labels[order] == c).astype(np.float64)
        groups = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            acc = float(hit[lo:hi].mean())
            conf = float(p_sorted[lo:hi].mean())
            total += abs(acc - conf)
            groups.append(Bin(float(p_sorted[lo]), float(p_sorted[hi - 1]), int(hi - lo), acc, conf))
        per_class.append(groups)
    return total / (k * r), per_class


def reliability_table(preds: PredictionSet, cfg: CalibrationConfig = CalibrationConfig()) -> list[Bin]:
    return ece(preds, cfg)[1]


def ece_from_table(rows) -> float:
    n = sum(b.count for b in rows)
    return float(sum(b.count / n * abs(b.accuracy - b.confidence) for b in rows))


def write_reliability_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
        for b in rows:
            w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.accuracy), repr(b.confidence)])


def summary(preds: PredictionSet, cfg: CalibrationConfig = CalibrationConfig()) -> dict:
    return {
        "ece": ece(preds, cfg)[0],
        "ace": ace(preds, cfg)[0],
        "M": cfg.num_bins,
        "R": cfg.num_ranges,
        "N": preds.n,
        "K": preds.k,
    }


def write_predictions_csv(path, ids, preds: PredictionSet):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "true_label"] + [f"p{j}" for j in range(preds.k)])
        for i, y, row in zip(ids, preds.true_labels, preds.probs):
            w.writerow([i, int(y)] + [repr(float(v)) for v in row])


def read_predictions_csv(path) -> tuple[list[str], PredictionSet]:
    """Read ``id,true_label,p0..p{K-1}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["id", "true_label"] or len(header) < 4:
            raise ValidationError(f"{path}: header must be 'id,true_label,p0,...,p{{K-1}}'")
        if header[2:] != [f"p{j}" for j in range(len(header) - 2)]:
            raise ValidationError(f"{path}: probability columns must be named p0..p{len(header) - 3}")
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: unparsable value") from None
            ids.append(row[0])
    if not rows:
        raise ValidationError(f"{path}: no predictions")
    return ids, PredictionSet.from_probs(np.array(rows), np.array(labels))
