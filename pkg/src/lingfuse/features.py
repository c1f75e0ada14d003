"""Per-text feature vectors: lexicon proportions, topic GOSS scores, dense vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError
from .text import tokenize

TOPIC_ROW_TOL = 1e-6


@dataclass(frozen=True)
class LexiconDictionary:
    """Category -> (exact words, stem prefixes) mapping.

    A pattern ending in ``*`` matches every token starting with the text before
    the star; anything else must match a token exactly. Categories are not
    exclusive: a token counts toward every category it matches.
    """

    categories: tuple
    words: dict      # category -> frozenset of exact words
    stems: dict      # category -> frozenset of prefixes

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise ValidationError("duplicate category names in dictionary")
        for c in self.categories:
            if not self.words.get(c) and not self.stems.get(c):
                raise ValidationError(f"category {c!r} has no patterns")

    @classmethod
    def from_patterns(cls, mapping: dict) -> "LexiconDictionary":
        words, stems = {}, {}
        for cat, patterns in mapping.items():
            pats = [p.strip().lower() for p in patterns]
            words[cat] = frozenset(p for p in pats if p and not p.endswith("*"))
            stems[cat] = frozenset(p[:-1] for p in pats if p.endswith("*") and len(p) > 1)
        return cls(tuple(mapping), words, stems)

    @property
    def dim(self) -> int:
        return len(self.categories)

    def matches(self, token: str) -> list[bool]:
        prefixes = {token[:i] for i in range(1, len(token) + 1)}
        return [token in self.words[c] or not prefixes.isdisjoint(self.stems[c])
                for c in self.categories]


def load_dictionary(path) -> LexiconDictionary:
    """Read ``category<TAB>pattern`` lines; ``#`` starts a comment."""
    mapping: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ValidationError(f"{path}:{lineno}: expected 'category<TAB>pattern'")
            mapping.setdefault(parts[0].strip(), []).append(parts[1])
    if not mapping:
        raise ValidationError(f"{path}: dictionary is empty")
    return LexiconDictionary.from_patterns(mapping)


def demo_dictionary_path() -> Path:
    return Path(str(resources.files("lingfuse") / "data" / "demo_dictionary.tsv"))


def demo_dictionary() -> LexiconDictionary:
    return load_dictionary(demo_dictionary_path())


def lexicon_features(text: str, dictionary: LexiconDictionary) -> np.ndarray:
    """Fraction of the text's tokens matching each category (zeros for no tokens)."""
    tokens = tokenize(text)
    counts = np.zeros(dictionary.dim)
    if not tokens:
        return counts
    cache: dict[str, list[bool]] = {}
    for tok in tokens:
        if tok not in cache:
            cache[tok] = dictionary.matches(tok)
        counts += cache[tok]
    return counts / len(tokens)


def lexicon_matrix(texts, dictionary: LexiconDictionary) -> np.ndarray:
    return np.array([lexicon_features(t, dictionary) for t in texts]).reshape(len(texts), dictionary.dim)


def goss(topics) -> np.ndarray:
    """Global Outlier Standard Score of every entry of an (n, T) topic matrix.

    Each column is centred on its mean and divided by the L2 norm of the
    centred column. Constant columns map to zeros, including columns whose
    spread is only floating-point rounding (e.g. a single topic at 1 +- 1 ulp).
    """
    x = np.asarray(topics, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("topics", "(n, T) matrix", x.shape, "goss")
    if x.shape[0] < 2:
        raise ValidationError("GOSS needs at least two texts")
    dev = x - x.mean(axis=0)
    norm = np.sqrt((dev ** 2).sum(axis=0))
    out = np.zeros_like(dev)
    noise = np.sqrt(x.shape[0]) * 4 * np.finfo(np.float64).eps * np.abs(x).max(axis=0)
    nz = norm > noise
    out[:, nz] = dev[:, nz] / norm[nz]
    return out


def check_topic_matrix(topics) -> np.ndarray:
    x = np.asarray(topics, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("topics", "(n, T) matrix", x.shape)
    if np.any(x < 0) or np.any(x > 1):
        raise ValidationError("topic probabilities must lie in [0, 1]")
    bad = np.flatnonzero(np.abs(x.sum(axis=1) - 1.0) > TOPIC_ROW_TOL)
    if bad.size:
        raise ValidationError(f"topic rows must sum to 1; row {int(bad[0])} sums to {x[bad[0]].sum()}")
    return x


def normalize_sum_to_one(features) -> np.ndarray:
    """Scale each row to sum to 1; all-zero rows stay zero."""
    x = np.asarray(features, dtype=np.float64)
    if np.any(x < 0):
        raise ValidationError("sum-to-one normalization needs non-negative features")
    sums = x.sum(axis=1, keepdims=True)
    return np.divide(x, sums, out=x.copy(), where=sums > 0)


# --------------------------------------------------------------------------
# id-keyed CSV matrices (dense vectors, topic matrices, extracted features)
# --------------------------------------------------------------------------

def write_matrix_csv(path, ids, matrix, prefix="f"):
    """Write ``id,<prefix>0,<prefix>1,...``; floats use repr so they read back exactly."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"{prefix}{j}" for j in range(matrix.shape[1])])
        for i, row in zip(ids, matrix):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_matrix_csv(path, prefix="f") -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or len(header) < 2:
            raise ValidationError(f"{path}: header must be 'id,{prefix}0,...'")
        expected = [f"{prefix}{j}" for j in range(len(header) - 1)]
        if header[1:] != expected:
            raise ValidationError(f"{path}: columns must be named {prefix}0..{prefix}{len(expected) - 1}")
        ids, rows = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric value") from None
            ids.append(row[0])
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate ids")
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    if not np.all(np.isfinite(matrix)):
        raise ValidationError(f"{path}: non-finite values")
    return ids, matrix


def align_to_ids(file_ids, matrix, corpus_ids, source="") -> np.ndarray:
    index = {i: k for k, i in enumerate(file_ids)}
    missing = [i for i in corpus_ids if i not in index]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ValidationError(f"{source or 'feature file'}: missing ids: {shown}")
    return matrix[[index[i] for i in corpus_ids]]


def load_dense_features(path, corpus_ids=None) -> np.ndarray | tuple[list[str], np.ndarray]:
    """Externally computed vectors from ``id,f0,f1,...``.

    With ``corpus_ids`` the rows come back in corpus order (missing ids are an
    error); without, ``(ids, matrix)`` in file order.
    """
    ids, matrix = read_matrix_csv(path, "f")
    if corpus_ids is None:
        return ids, matrix
    return align_to_ids(ids, matrix, list(corpus_ids), str(path))


def load_topic_matrix(path, corpus_ids=None):
    ids, matrix = read_matrix_csv(path, "t")
    check_topic_matrix(matrix)
    if corpus_ids is None:
        return ids, matrix
    return align_to_ids(ids, matrix, list(corpus_ids), str(path))
