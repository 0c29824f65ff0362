"""Byte-level corpus handling and a deterministic synthetic text generator.

The model vocabulary is the 256 raw byte values, so any UTF-8 file works as
a corpus.  The synthetic generator produces word-like text with Zipfian
word frequencies and first-order transitions, which gives byte-level
structure that a small model can learn quickly, reproducibly per seed.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

VOCAB_SIZE = 256

_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def encode_bytes(text: str | bytes) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def load_corpus(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise InputError(f"corpus file is empty: {path}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-text of roughly ``n_bytes`` bytes: a Zipfian
    vocabulary with first-order word transitions, sentence casing and
    punctuation."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
    n_words = 180
    # word lengths biased short, letters biased toward a common subset
    letter_p = rng.dirichlet(np.full(len(_ALPHABET), 0.35))
    words = []
    for _ in range(n_words):
        length = int(rng.integers(2, 9))
        idx = rng.choice(len(_ALPHABET), size=length, p=letter_p)
        words.append("".join(_ALPHABET[i] for i in idx))
    # Zipfian unigram weights and a sparse bigram preference
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    unigram = (1.0 / ranks) / (1.0 / ranks).sum()
    follow = rng.integers(0, n_words, size=n_words)

    out: list[str] = []
    total = 0
    sentence_len = 0
    prev = int(rng.choice(n_words, p=unigram))
    while total < n_bytes:
        if sentence_len > 0 and rng.random() < 0.12:
            end = ". " if rng.random() < 0.8 else ".\n"
            out.append(end)
            total += len(end)
            sentence_len = 0
            prev = int(rng.choice(n_words, p=unigram))
            continue
        if rng.random() < 0.55:
            word = words[int(follow[prev])]
            prev = int(follow[prev])
        else:
            prev = int(rng.choice(n_words, p=unigram))
            word = words[prev]
        if sentence_len == 0:
            word = word.capitalize()
        chunk = word + " "
        out.append(chunk)
        total += len(chunk)
        sentence_len += 1
    return "".join(out).encode("utf-8")[:n_bytes]


def sample_batch(tokens: np.ndarray, rng: np.random.Generator,
                 n_seqs: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Random contiguous windows: inputs (n_seqs, seq_len) and next-token targets."""
    if tokens.size < seq_len + 1:
        raise InputError("corpus shorter than one training window")
    starts = rng.integers(0, tokens.size - seq_len - 1, size=n_seqs)
    x = np.stack([tokens[s:s + seq_len] for s in starts])
    y = np.stack([tokens[s + 1:s + seq_len + 1] for s in starts])
    return x, y


def eval_windows(tokens: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping evaluation windows covering the corpus prefix."""
    n = (tokens.size - 1) // seq_len
    if n == 0:
        raise InputError("corpus shorter than one evaluation window")
    x = np.stack([tokens[i * seq_len:(i + 1) * seq_len] for i in range(n)])
    y = np.stack([tokens[i * seq_len + 1:(i + 1) * seq_len + 1] for i in range(n)])
    return x, y
