"""Per-token expert scoring, per-layer Z-score normalization, global top-K
selection across layers, and activation-frequency accumulation over a
corpus."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .model import ModelBundle, forward_taps
from .split import ExpertPartition
from .tokenizer import ByteTokenizer


@dataclass(frozen=True)
class ProfileConfig:
    top_k: int
    max_tokens_per_sample: int = 200
    max_samples: int = 10000
    language_tag: str = "und"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_tokens_per_sample < 1 or self.max_samples < 1:
            raise ValueError("limits must be >= 1")
        if not self.language_tag or any(c.isspace() for c in self.language_tag):
            raise ValueError("language_tag must be non-empty and whitespace-free")


def default_top_k(n_layers: int, n_experts: int) -> int:
    """Roughly the top 10% of all experts across layers."""
    return max(1, round(0.1 * n_layers * n_experts))


@dataclass
class FrequencyMatrix:
    n_layers: int
    n_experts: int
    counts: np.ndarray  # (n_layers, n_experts) int64
    total_tokens: int
    top_k: int
    language_tag: str
    model_id: str

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.n_layers, self.n_experts):
            raise ValueError("counts shape does not match declared dims")
        if (self.counts < 0).any():
            raise ValueError("negative activation count")

    @property
    def frequencies(self) -> np.ndarray:
        if self.total_tokens == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / float(self.total_tokens)

    def save(self, path) -> None:
        for tag in (self.language_tag, self.model_id):
            if any(c.isspace() for c in tag):
                raise ValueError(f"tag {tag!r} may not contain whitespace")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(
                f"MOEFREQ v1 layers={self.n_layers} experts={self.n_experts} "
                f"tokens={self.total_tokens} topk={self.top_k} "
                f"lang={self.language_tag} model={self.model_id}\n")
            for row in self.counts:
                fh.write(",".join(str(int(c)) for c in row) + "\n")

    @classmethod
    def load(cls, path) -> "FrequencyMatrix":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            parts = header.split(" ")
            if len(parts) != 8 or parts[0] != "MOEFREQ" or parts[1] != "v1":
                raise ValueError(f"{path}: bad MOEFREQ header: {header!r}")
            kv = {}
            for part in parts[2:]:
                key, _, value = part.partition("=")
                kv[key] = value
            try:
                n_layers = int(kv["layers"])
                n_experts = int(kv["experts"])
                tokens = int(kv["tokens"])
                top_k = int(kv["topk"])
                lang = kv["lang"]
                model_id = kv["model"]
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: bad MOEFREQ header fields: {exc}") from exc
            rows = []
            for li in range(n_layers):
                line = fh.readline().rstrip("\n")
                if not line:
                    raise ValueError(f"{path}: missing count row for layer {li}")
                rows.append([int(c) for c in line.split(",")])
        counts = np.asarray(rows, dtype=np.int64)
        return cls(n_layers=n_layers, n_experts=n_experts, counts=counts,
                   total_tokens=tokens, top_k=top_k, language_tag=lang,
                   model_id=model_id)


def score_experts(taps, partition: ExpertPartition) -> np.ndarray:
    """Signed per-expert activation sums for one token.

    ``taps`` is one d_ff vector per layer (list of ActivationTap or an
    (n_layers, d_ff) array). Returns an (n_layers, E) raw score matrix.
    """
    if isinstance(taps, np.ndarray):
        mat = taps
    else:
        by_layer = {}
        for tap in taps:
            by_layer[tap.layer] = tap.values
        missing = [li for li in range(partition.n_layers) if li not in by_layer]
        if missing:
            raise ValueError(f"missing tap for layer(s) {missing}")
        mat = np.stack([by_layer[li] for li in range(partition.n_layers)])
    if mat.shape != (partition.n_layers, partition.d_ff):
        raise ValueError(
            f"tap matrix shape {mat.shape} does not match "
            f"({partition.n_layers}, {partition.d_ff})")
    scores = np.zeros((partition.n_layers, partition.n_experts), dtype=np.float64)
    for li in range(partition.n_layers):
        np.add.at(scores[li], partition.assignment[li], mat[li].astype(np.float64))
    return scores


def zscore_per_layer(scores: np.ndarray) -> np.ndarray:
    """Per-row (s - mean)/std with population std; zero-variance rows map to
    all zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("scores must be 2-D with at least 2 experts per layer")
    mean = scores.mean(axis=1, keepdims=True)
    std = scores.std(axis=1, keepdims=True)  # population (ddof=0)
    centered = scores - mean
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(std > 0, centered / std, 0.0)
    return z


def select_top_k(z: np.ndarray, k: int) -> set[tuple[int, int]]:
    """Top-k cells of the whole z matrix; ties break by (layer asc, expert
    asc)."""
    z = np.asarray(z, dtype=np.float64)
    n_layers, n_experts = z.shape
    total = n_layers * n_experts
    if not 1 <= k <= total:
        raise ValueError(f"k={k} out of range [1, {total}]")
    order = np.argsort(-z.ravel(), kind="stable")  # stable: index asc on ties
    chosen = order[:k]
    return {(int(i) // n_experts, int(i) % n_experts) for i in chosen}


def _grouping_matrices(partition: ExpertPartition) -> list[np.ndarray]:
    mats = []
    for li in range(partition.n_layers):
        g = np.zeros((partition.d_ff, partition.n_experts), dtype=np.float32)
        g[np.arange(partition.d_ff), partition.assignment[li]] = 1.0
        mats.append(g)
    return mats


def profile_corpus(model: ModelBundle, partition: ExpertPartition,
                   corpus: Iterable[str], cfg: ProfileConfig,
                   tokenizer: Optional[ByteTokenizer] = None) -> FrequencyMatrix:
    """Count, over every processed token, which experts land in the global
    top-K after per-layer Z-scoring of the signed expert sums.

    Tokens counted are exactly the ids fed to the forward pass (BOS
    included); samples are truncated to max_tokens_per_sample.
    """
    tokenizer = tokenizer or ByteTokenizer()
    L, E = partition.n_layers, partition.n_experts
    if cfg.top_k > L * E:
        raise ValueError(f"top_k {cfg.top_k} exceeds n_layers*n_experts {L * E}")
    group = _grouping_matrices(partition)
    counts_flat = np.zeros(L * E, dtype=np.int64)
    total_tokens = 0
    n_samples = 0
    for text in corpus:
        if n_samples >= cfg.max_samples:
            break
        ids = tokenizer.encode(text)[: cfg.max_tokens_per_sample]
        if not ids:
            continue
        n_samples += 1
        _, taps = forward_taps(model, ids)  # (L, seq, d_ff)
        seq = taps.shape[1]
        # (seq, L, E) signed expert sums
        scores = np.stack(
            [taps[li].astype(np.float64) @ group[li].astype(np.float64)
             for li in range(L)], axis=1)
        for pos in range(seq):
            z = zscore_per_layer(scores[pos])
            order = np.argsort(-z.ravel(), kind="stable")
            np.add.at(counts_flat, order[: cfg.top_k], 1)
        total_tokens += seq
    if n_samples == 0:
        raise ValueError("empty corpus: no non-empty samples to profile")
    return FrequencyMatrix(
        n_layers=L, n_experts=E, counts=counts_flat.reshape(L, E),
        total_tokens=total_tokens, top_k=cfg.top_k,
        language_tag=cfg.language_tag, model_id=model.model_id)


def merge(a: FrequencyMatrix, b: FrequencyMatrix) -> FrequencyMatrix:
    """Combine shard results: counts and token totals add."""
    meta_a = (a.n_layers, a.n_experts, a.top_k, a.language_tag, a.model_id)
    meta_b = (b.n_layers, b.n_experts, b.top_k, b.language_tag, b.model_id)
    if meta_a != meta_b:
        raise ValueError(f"cannot merge frequency matrices: {meta_a} vs {meta_b}")
    return FrequencyMatrix(
        n_layers=a.n_layers, n_experts=a.n_experts,
        counts=a.counts + b.counts,
        total_tokens=a.total_tokens + b.total_tokens,
        top_k=a.top_k, language_tag=a.language_tag, model_id=a.model_id)
