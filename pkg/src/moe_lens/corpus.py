"""Corpus I/O and the synthetic bilingual fixture.

Corpora are UTF-8 JSON-lines, one object per sample: {"text": ...}. The
synthetic generator produces two "languages" drawn from nearly disjoint
byte alphabets so language-specific structure exists by construction.
"""

from __future__ import annotations

import json
from typing import Iterator

import numpy as np

# Language A words come from a-m, language B from n-z; both share the space
# separator, keeping token-type overlap well under 10%.
_ALPHABET_A = "abcdefghijklm"
_ALPHABET_B = "nopqrstuvwxyz"


def read_corpus(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                text = doc["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus line: {exc}") from exc
            yield text


def write_corpus(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text in samples:
            fh.write(json.dumps({"text": text}) + "\n")


def _make_words(alphabet: str, n_words: int, rng: np.random.Generator) -> list[str]:
    words = []
    seen = set()
    while len(words) < n_words:
        length = int(rng.integers(2, 7))
        word = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _sample_texts(words: list[str], n_samples: int, rng: np.random.Generator,
                  words_per_sample: tuple[int, int] = (8, 24)) -> list[str]:
    # Zipf-ish usage so some words (hence some experts) dominate.
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    texts = []
    for _ in range(n_samples):
        n = int(rng.integers(*words_per_sample))
        idx = rng.choice(len(words), size=n, p=probs)
        texts.append(" ".join(words[i] for i in idx))
    return texts


def generate_bilingual_corpus(seed: int, n_samples: int = 400,
                              n_words: int = 120,
                              sample_seed: int | None = None) -> dict[str, list[str]]:
    """Two synthetic languages over disjoint alphabets, as {"a": texts,
    "b": texts}. The word lists depend only on ``seed``; pass a different
    ``sample_seed`` to draw fresh samples from the same languages (held-out
    shards for evaluation)."""
    word_rng = np.random.default_rng([seed, 0])
    words_a = _make_words(_ALPHABET_A, n_words, word_rng)
    words_b = _make_words(_ALPHABET_B, n_words, word_rng)
    sample_rng = np.random.default_rng(
        [seed if sample_seed is None else sample_seed, 1])
    return {
        "a": _sample_texts(words_a, n_samples, sample_rng),
        "b": _sample_texts(words_b, n_samples, sample_rng),
    }


def token_type_overlap(texts_a: list[str], texts_b: list[str]) -> float:
    """Jaccard overlap between the word-type sets of two corpora."""
    types_a = {w for t in texts_a for w in t.split()}
    types_b = {w for t in texts_b for w in t.split()}
    union = types_a | types_b
    if not union:
        return 0.0
    return len(types_a & types_b) / len(union)
