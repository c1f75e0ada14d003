"""Corpus ingestion, stratified splitting and end-to-end experiment runs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, calibration, features
from .errors import ValidationError
from .model import (
    EncodedSet,
    ModelDims,
    SmoothingConfig,
    TrainConfig,
    encode,
    predict_proba,
    save_params,
    train,
)

log = logging.getLogger(__name__)

FEATURE_SETS = ("lexicon", "dictionary", "goss", "dense", "none")
SPLIT_MODES = ("fixed-test", "holdout-80-20", "stratified-5-fold")
DEFAULT_BETA = 1e-4
DEFAULT_ALPHA = 1e-3


class CorpusError(ValidationError):
    pass


class MissingColumnError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class LabelParseError(CorpusError):
    pass


class DuplicateIdError(CorpusError):
    pass


class ClassTooSmallError(ValidationError):
    pass


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Corpus:
    ids: list
    texts: list
    labels: np.ndarray
    label_names: list            # label_names[k] is the raw label mapped to k
    source: str = ""
    splits: list | None = None   # optional per-record 'train'/'test' marks

    @property
    def k(self) -> int:
        return len(self.label_names)

    def __len__(self):
        return len(self.ids)


def _label_mapping(raw):
    """Integer-valued labels keep numeric order; anything else keeps first-appearance order."""
    try:
        numeric = {lab: int(lab) for lab in raw}
    except ValueError:
        numeric = None
    if numeric is not None:
        names = sorted(set(raw), key=lambda lab: numeric[lab])
    else:
        names = list(dict.fromkeys(raw))
    return names, {lab: i for i, lab in enumerate(names)}


def load_corpus(path) -> Corpus:
    """Read a CSV with ``text`` and ``label`` columns (``id`` and ``split`` optional)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyCorpusError(f"{path}: file is empty")
        missing = [c for c in ("text", "label") if c not in reader.fieldnames]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {', '.join(missing)}")
        has_id = "id" in reader.fieldnames
        has_split = "split" in reader.fieldnames
        ids, texts, raw, splits = [], [], [], []
        for rowno, row in enumerate(reader):
            lab = (row["label"] or "").strip()
            if not lab:
                raise LabelParseError(f"{path}: row {rowno}: empty or unparsable label")
            rid = row["id"].strip() if has_id else str(rowno)
            if not rid:
                raise CorpusError(f"{path}: row {rowno}: empty id")
            ids.append(rid)
            texts.append(row["text"] or "")
            raw.append(lab)
            if has_split:
                splits.append((row["split"] or "").strip().lower())
    if not ids:
        raise EmptyCorpusError(f"{path}: no records")
    seen = set()
    for rid in ids:
        if rid in seen:
            raise DuplicateIdError(f"{path}: duplicate id {rid!r}")
        seen.add(rid)
    names, mapping = _label_mapping(raw)
    if len(names) < 2:
        raise CorpusError(f"{path}: need at least 2 distinct labels, found {names}")
    labels = np.array([mapping[lab] for lab in raw], dtype=np.int64)
    return Corpus(ids, texts, labels, names, str(path), splits if has_split else None)


def write_corpus(path, ids, texts, labels, splits=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "text", "label"] + (["split"] if splits is not None else []))
        for i, row in enumerate(zip(ids, texts, labels)):
            w.writerow(list(row) + ([splits[i]] if splits is not None else []))


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    mode: str = "holdout-80-20"
    seed: int = 0
    n_folds: int = 5
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValidationError(f"unknown split mode {self.mode!r}; choose from {SPLIT_MODES}")
        if self.n_folds < 2:
            raise ValidationError("n_folds must be >= 2")


@dataclass(frozen=True)
class Partition:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_folds(labels, n_folds: int, seed: int) -> np.ndarray:
    """Fold number of every sample.

    Each class is shuffled with the seed and dealt round-robin; the dealing
    position carries over from one class to the next so fold sizes stay even.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=np.int64)
    pos = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < n_folds:
            raise ClassTooSmallError(
                f"class {c} has {members.size} samples, {n_folds}-fold split needs at least {n_folds}")
        members = rng.permutation(members)
        folds[members] = (pos + np.arange(members.size)) % n_folds
        pos = (pos + members.size) % n_folds
    return folds


def stratified_holdout(labels, idx, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Split ``idx`` into (kept, held-out) with ``round(fraction * n_c)`` per class held out."""
    labels = np.asarray(labels)
    idx = np.asarray(idx, dtype=np.int64)
    kept, held = [], []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        if members.size < 2:
            raise ClassTooSmallError(f"class {c} has {members.size} sample(s); cannot hold any out")
        n_held = int(np.clip(np.floor(fraction * members.size + 0.5), 1, members.size - 1))
        members = rng.permutation(members)
        held.append(members[:n_held])
        kept.append(members[n_held:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


def stratified_split(labels, plan: SplitPlan, splits=None) -> list[Partition]:
    """Train/validation/test partitions for the plan's mode (one per fold)."""
    labels = np.asarray(labels)
    n = labels.size
    rng = np.random.default_rng(plan.seed)
    if plan.mode == "stratified-5-fold":
        folds = stratified_folds(labels, plan.n_folds, plan.seed)
        parts = []
        for f in range(plan.n_folds):
            test = np.flatnonzero(folds == f)
            train_idx, val = stratified_holdout(labels, np.flatnonzero(folds != f), plan.val_fraction, rng)
            parts.append(Partition(train_idx, val, test))
        return parts
    if plan.mode == "holdout-80-20":
        rest, test = stratified_holdout(labels, np.arange(n), plan.test_fraction, rng)
    else:
        if splits is None:
            raise ValidationError("fixed-test mode needs a 'split' column in the corpus")
        marks = np.array(splits)
        test = np.flatnonzero(marks == "test")
        rest = np.flatnonzero(marks != "test")
        if test.size == 0 or rest.size == 0:
            raise ValidationError("fixed-test mode needs both test and non-test records")
    train_idx, val = stratified_holdout(labels, rest, plan.val_fraction, rng)
    return [Partition(train_idx, val, test)]


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    corpus: str
    feature_set: str = "none"
    features: str | None = None       # dense-vector or topic-matrix CSV
    dictionary: str | None = None     # category dictionary for lexicon/dictionary sets
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: calibration.CalibrationConfig = field(default_factory=calibration.CalibrationConfig)
    split: SplitPlan = field(default_factory=SplitPlan)
    vocab_size: int = 4096
    embed_dim: int = 32
    zero_features: bool = False       # ablation: feed zeros through the feature path
    out: str | None = None

    def __post_init__(self):
        if self.feature_set not in FEATURE_SETS:
            raise ValidationError(f"unknown feature_set {self.feature_set!r}; choose from {FEATURE_SETS}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if self.feature_set in ("goss", "dense") and not self.features:
            raise ValidationError(f"feature_set {self.feature_set!r} needs a 'features' file")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "corpus" not in d:
            raise ValidationError("config needs a 'corpus' path")
        if base_dir is not None:
            for key in ("corpus", "features", "dictionary", "out"):
                if d.get(key) and not Path(d[key]).is_absolute():
                    d[key] = str(Path(base_dir) / d[key])
        try:
            if isinstance(d.get("train"), dict):
                d["train"] = TrainConfig(**d["train"])
            if isinstance(d.get("calibration"), dict):
                d["calibration"] = calibration.CalibrationConfig(**d["calibration"])
            if isinstance(d.get("split"), dict):
                d["split"] = SplitPlan(**d["split"])
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)


def build_features(cfg: ExperimentConfig, corpus: Corpus) -> tuple[np.ndarray, list[str]]:
    """Raw per-text feature matrix for the configured feature set, plus column names."""
    if cfg.feature_set in ("lexicon", "dictionary"):
        dictionary = features.load_dictionary(cfg.dictionary) if cfg.dictionary else features.demo_dictionary()
        return features.lexicon_matrix(corpus.texts, dictionary), list(dictionary.categories)
    if cfg.feature_set == "goss":
        topics = features.load_topic_matrix(cfg.features, corpus.ids)
        return features.goss(topics), [f"goss{j}" for j in range(topics.shape[1])]
    if cfg.feature_set == "dense":
        dense = features.load_dense_features(cfg.features, corpus.ids)
        return dense, [f"f{j}" for j in range(dense.shape[1])]
    return np.zeros((len(corpus), 1)), ["none"]


def _mean_dict(dicts):
    keys = [k for k, v in dicts[0].items() if isinstance(v, float)]
    return {k: float(np.mean([d[k] for d in dicts])) for k in keys}


def run_partition(cfg: ExperimentConfig, corpus: Corpus, data: EncodedSet, part: Partition,
                  fold: int, out_dir: Path | None):
    k = corpus.k
    dims = ModelDims(vocab_size=cfg.vocab_size, embed_dim=cfg.embed_dim,
                     feature_dim=data.features.shape[1], num_classes=k)
    smoothing = SmoothingConfig(cfg.alpha, k)
    try:
        result = train(data.subset(part.train), data.subset(part.val), cfg.train, smoothing, dims, cfg.beta)
    except ValidationError as exc:
        raise type(exc)(f"fold {fold}: {exc}") from exc
    probs = predict_proba(result.params, data.subset(part.test))
    preds = calibration.PredictionSet.from_probs(probs, data.labels[part.test])
    metrics = analysis.classification_metrics(preds.true_labels, preds.predicted_labels, k)
    calib = calibration.summary(preds, cfg.calibration)
    if out_dir is not None:
        save_params(result.params, out_dir / f"model_fold{fold}.npz")
    entry = {
        "fold": fold,
        "n_train": int(part.train.size),
        "n_val": int(part.val.size),
        "n_test": int(part.test.size),
        "selected_epoch": result.selected_epoch,
        "history": result.history,
        "metrics": metrics.as_dict(),
        "calibration": calib,
    }
    return entry, [corpus.ids[i] for i in part.test], preds


def run_experiment(cfg: ExperimentConfig, timestamp: str | None = None) -> dict:
    """Train and evaluate per the split plan; returns the JSON-ready report.

    With ``cfg.out`` set the report, pooled test predictions, reliability table
    and model parameters are written there as well.
    """
    corpus = load_corpus(cfg.corpus)
    raw, _ = build_features(cfg, corpus)
    if cfg.zero_features:
        raw = np.zeros_like(raw)
    data = encode(corpus.texts, raw, corpus.labels, cfg.vocab_size)
    parts = stratified_split(corpus.labels, cfg.split, corpus.splits)
    out_dir = Path(cfg.out) if cfg.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    folds, pooled_ids, pooled_probs, pooled_labels = [], [], [], []
    for f, part in enumerate(parts):
        log.info("fold %d: train=%d val=%d test=%d", f, part.train.size, part.val.size, part.test.size)
        entry, ids, preds = run_partition(cfg, corpus, data, part, f, out_dir)
        folds.append(entry)
        pooled_ids += ids
        pooled_probs.append(preds.probs)
        pooled_labels.append(preds.true_labels)

    pooled = calibration.PredictionSet.from_probs(np.concatenate(pooled_probs), np.concatenate(pooled_labels))
    report = {
        "config": cfg.to_dict(),
        "seeds": {"split": cfg.split.seed, "train": cfg.train.seed},
        "num_classes": corpus.k,
        "label_names": corpus.label_names,
        "folds": folds,
        "mean": {
            "metrics": _mean_dict([f["metrics"] for f in folds]),
            "calibration": _mean_dict([f["calibration"] for f in folds]),
        },
        "pooled_calibration": calibration.summary(pooled, cfg.calibration),
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(),
    }
    if out_dir is not None:
        (out_dir / "report.json").write_text(dump_report(report), encoding="utf-8")
        calibration.write_predictions_csv(out_dir / "predictions.csv", pooled_ids, pooled)
        calibration.write_reliability_csv(out_dir / "reliability.csv",
                                          calibration.reliability_table(pooled, cfg.calibration))
    return report


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "seeds", "num_classes", "label_names", "folds", "mean",
                 "pooled_calibration", "timestamp"],
    "properties": {
        "config": {"type": "object", "required": ["corpus", "feature_set", "alpha", "beta", "train",
                                                   "calibration", "split"]},
        "seeds": {"type": "object", "required": ["split", "train"],
                  "properties": {"split": {"type": "integer"}, "train": {"type": "integer"}}},
        "num_classes": {"type": "integer", "minimum": 2},
        "label_names": {"type": "array", "items": {"type": "string"}},
        "folds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["fold", "n_train", "n_val", "n_test", "selected_epoch", "history",
                             "metrics", "calibration"],
                "properties": {
                    "fold": {"type": "integer"},
                    "selected_epoch": {"type": "integer", "minimum": 1},
                    "history": {
                        "type": "array",
                        "items": {"type": "object",
                                  "required": ["epoch", "lr", "train_loss", "val_loss"],
                                  "properties": {"epoch": {"type": "integer"},
                                                 "lr": {"type": "number"},
                                                 "train_loss": {"type": "number"},
                                                 "val_loss": {"type": "number"}}},
                    },
                    "metrics": {
                        "type": "object",
                        "required": ["accuracy", "weighted_precision", "weighted_recall", "weighted_f1",
                                     "precision", "recall", "f1"],
                        "properties": {
                            "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                            "weighted_f1": {"type": "number", "minimum": 0, "maximum": 1},
                            "precision": {"type": ["number", "null"]},
                            "recall": {"type": ["number", "null"]},
                            "f1": {"type": ["number", "null"]},
                        },
                    },
                    "calibration": {"$ref": "#/definitions/calibration"},
                },
            },
        },
        "mean": {"type": "object", "required": ["metrics", "calibration"]},
        "pooled_calibration": {"$ref": "#/definitions/calibration"},
        "timestamp": {"type": "string"},
    },
    "definitions": {
        "calibration": {
            "type": "object",
            "required": ["ece", "ace", "M", "R", "N", "K"],
            "properties": {
                "ece": {"type": "number", "minimum": 0, "maximum": 1},
                "ace": {"type": "number", "minimum": 0, "maximum": 1},
                "M": {"type": "integer"}, "R": {"type": "integer"},
                "N": {"type": "integer"}, "K": {"type": "integer"},
            },
        }
    },
}


# --------------------------------------------------------------------------
# linguistic analysis over a corpus
# --------------------------------------------------------------------------

def run_linguistic_analysis(corpus: Corpus, dictionary: features.LexiconDictionary,
                            q: float = 0.05, out_path=None) -> analysis.CorrelationReport:
    """Dictionary proportions -> per-post sum-to-one -> correlation with the label + BH."""
    if corpus.k != 2:
        raise ValidationError(f"linguistic analysis needs a binary corpus, got K={corpus.k}")
    x = features.normalize_sum_to_one(features.lexicon_matrix(corpus.texts, dictionary))
    report = analysis.linguistic_analysis(x, dictionary.categories, corpus.labels, q)
    if out_path is not None:
        analysis.write_correlation_csv(out_path, report)
    return report


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 1000
    feature_dim: int = 8
    label_noise: float = 0.05
    feature_noise: float = 0.25
    min_tokens: int = 5
    max_tokens: int = 20
    noise_vocab: int = 5000
    seed: int = 0


def synthetic_corpus(spec: SyntheticSpec):
    """Binary corpus of random noise-word texts whose feature vectors carry the class.

    Each text's feature vector is ``(2 * c - 1) * u + noise`` for a fixed unit
    direction ``u`` and its true class ``c``; the observed label is then flipped
    with probability ``label_noise``.

    Returns:
        ``(ids, texts, labels, features)``.
    """
    rng = np.random.default_rng(spec.seed)
    true = np.arange(spec.n) % 2
    rng.shuffle(true)
    u = rng.normal(size=spec.feature_dim)
    u /= np.linalg.norm(u)
    feats = (2.0 * true - 1.0)[:, None] * u + rng.normal(scale=spec.feature_noise,
                                                        size=(spec.n, spec.feature_dim))
    flip = rng.random(spec.n) < spec.label_noise
    labels = np.where(flip, 1 - true, true)
    texts = []
    for _ in range(spec.n):
        m = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        texts.append(" ".join(f"w{j}" for j in rng.integers(spec.noise_vocab, size=m)))
    ids = [f"s{i:05d}" for i in range(spec.n)]
    return ids, texts, labels, feats


def write_synthetic(out_dir, spec: SyntheticSpec):
    """Write ``corpus.csv`` and ``features.csv`` for ``spec`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids, texts, labels, feats = synthetic_corpus(spec)
    write_corpus(out_dir / "corpus.csv", ids, texts, labels)
    features.write_matrix_csv(out_dir / "features.csv", ids, feats, "f")
    return out_dir / "corpus.csv", out_dir / "features.csv"
