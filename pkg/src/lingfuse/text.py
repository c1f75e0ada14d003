"""Tokenization shared by the toy encoder and the lexicon features."""

import re
import zlib

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+")

NULL_TOKEN_ID = 0


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def hash_token(token: str, vocab_size: int) -> int:
    # bucket 0 is reserved for the null token of empty texts
    return 1 + zlib.crc32(token.encode("utf-8")) % (vocab_size - 1)


def token_ids(text_or_tokens, vocab_size: int) -> np.ndarray:
    """Hashed bucket ids; an empty text becomes the single null token."""
    tokens = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else list(text_or_tokens)
    if not tokens:
        return np.array([NULL_TOKEN_ID], dtype=np.int64)
    return np.array([hash_token(t, vocab_size) for t in tokens], dtype=np.int64)
