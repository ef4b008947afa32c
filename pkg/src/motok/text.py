"""Deterministic stand-in for a frozen language model.

Captions are lowercased, whitespace-tokenized, and each token is hashed
with blake2b (digest_size=8, little-endian) into a frozen 4096-row
embedding table drawn once from a seeded unit-variance Gaussian.
Sequences are truncated to 77 tokens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

TABLE_ROWS = 4096
TABLE_SEED = 90210
MAX_TOKENS = 77

_tables: dict[int, np.ndarray] = {}


def _table(d_text: int) -> np.ndarray:
    if d_text not in _tables:
        rng = np.random.default_rng(np.random.SeedSequence([TABLE_SEED, d_text]))
        _tables[d_text] = rng.normal(0.0, 1.0, size=(TABLE_ROWS, d_text)).astype(np.float32)
    return _tables[d_text]


def token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class TextContext:
    embeddings: np.ndarray  # [W, d_text] float32
    is_empty: bool

    @property
    def tokens(self) -> int:
        return self.embeddings.shape[0]


def empty_context(d_text: int = 32) -> TextContext:
    return TextContext(embeddings=np.zeros((0, d_text), dtype=np.float32), is_empty=True)


def embed_text(caption: str, d_text: int = 32, max_tokens: int = MAX_TOKENS) -> TextContext:
    words = caption.lower().split()
    if not words:
        return empty_context(d_text)
    words = words[:max_tokens]
    table = _table(d_text)
    rows = np.stack([table[token_hash(w) % TABLE_ROWS] for w in words])
    return TextContext(embeddings=rows.astype(np.float32), is_empty=False)
