"""Expert keep-masks from frequency matrices: inclusive-threshold pruning,
per-layer top-percent pruning, matched random baselines, and a FLOPs model
for the savings."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig
from .profiler import FrequencyMatrix


@dataclass
class PruneMask:
    keep: np.ndarray  # (n_layers, n_experts) bool
    provenance: dict  # {"kind": "threshold"|"top_percent"|"random", ...}
    source_id: str = ""

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 2:
            raise ValueError("keep matrix must be 2-D")

    @property
    def kept_proportion(self) -> float:
        return float(self.keep.sum()) / self.keep.size

    @property
    def per_layer_counts(self) -> np.ndarray:
        return self.keep.sum(axis=1)

    def save(self, path) -> None:
        n_layers, n_experts = self.keep.shape
        bits = "".join("1" if b else "0" for b in self.keep.ravel())
        # pad to a nibble boundary for hex encoding
        pad = (-len(bits)) % 4
        packed = int(bits + "0" * pad, 2) if bits else 0
        hexstr = format(packed, f"0{(len(bits) + pad) // 4}x")
        doc = {
            "version": 1,
            "n_layers": n_layers,
            "n_experts": n_experts,
            "provenance": self.provenance,
            "source_id": self.source_id,
            "keep": hexstr,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PruneMask":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != 1:
            raise ValueError(f"{path}: unsupported mask version {doc.get('version')}")
        n_layers, n_experts = doc["n_layers"], doc["n_experts"]
        n_bits = n_layers * n_experts
        hexstr = doc["keep"]
        bits = format(int(hexstr, 16), f"0{len(hexstr) * 4}b")[:n_bits]
        keep = np.array([c == "1" for c in bits], dtype=bool).reshape(n_layers, n_experts)
        return cls(keep=keep, provenance=doc["provenance"],
                   source_id=doc.get("source_id", ""))


def mask_by_threshold(freq: FrequencyMatrix, threshold: float) -> PruneMask:
    """Keep experts whose frequency is >= threshold (inclusive boundary)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    keep = freq.frequencies >= threshold
    return PruneMask(
        keep=keep,
        provenance={"kind": "threshold", "tau": threshold,
                    "lang": freq.language_tag},
        source_id=freq.model_id)


def mask_by_top_percent(freq: FrequencyMatrix, percent: float) -> PruneMask:
    """Keep, in every layer, the round(p*E/100) highest-frequency experts;
    frequency ties break to the lower expert index."""
    if not 0.0 < percent <= 100.0:
        raise ValueError(f"percent must lie in (0, 100], got {percent}")
    E = freq.n_experts
    n_keep = int(np.floor(percent * E / 100.0 + 0.5))  # round half-up
    n_keep = max(1, min(E, n_keep))
    keep = np.zeros((freq.n_layers, E), dtype=bool)
    f = freq.frequencies
    for li in range(freq.n_layers):
        order = np.argsort(-f[li], kind="stable")
        keep[li, order[:n_keep]] = True
    return PruneMask(
        keep=keep,
        provenance={"kind": "top_percent", "percent": percent,
                    "per_layer_keep": n_keep, "lang": freq.language_tag},
        source_id=freq.model_id)


def mask_random_like(reference: PruneMask, seed: int) -> PruneMask:
    """Random baseline keeping, per layer, exactly as many experts as the
    reference does in that layer."""
    rng = np.random.default_rng(seed)
    n_layers, E = reference.keep.shape
    keep = np.zeros((n_layers, E), dtype=bool)
    layer_counts = [int(c) for c in reference.per_layer_counts]
    for li, count in enumerate(layer_counts):
        chosen = rng.choice(E, size=count, replace=False)
        keep[li, chosen] = True
    return PruneMask(
        keep=keep,
        provenance={"kind": "random", "seed": seed,
                    "per_layer_counts": layer_counts},
        source_id=reference.source_id)


def full_mask(n_layers: int, n_experts: int) -> PruneMask:
    return PruneMask(keep=np.ones((n_layers, n_experts), dtype=bool),
                     provenance={"kind": "threshold", "tau": 0.0, "lang": ""})


@dataclass(frozen=True)
class FlopsEstimate:
    dense_flops_per_token: float
    pruned_flops_per_token: float
    ffn_param_reduction: float
    total_flops_reduction: float

    def __post_init__(self):
        for name in ("ffn_param_reduction", "total_flops_reduction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {v}")


def estimate_flops(config: ModelConfig, mask: PruneMask, seq_len: int = 200) -> FlopsEstimate:
    """Multiply-accumulate counting (x2), ignoring normalization, softmax and
    rotary costs. The FFN term scales per layer by its kept expert
    fraction."""
    if mask.keep.shape[0] != config.n_layers:
        raise ValueError(
            f"mask has {mask.keep.shape[0]} layers, config has {config.n_layers}")
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    attn = 8.0 * d * d + 4.0 * seq_len * d
    ffn = 6.0 * d * f
    head = 2.0 * d * v
    dense = config.n_layers * (attn + ffn) + head
    kept_frac = mask.keep.mean(axis=1)  # per layer
    pruned = config.n_layers * attn + float(ffn * kept_frac.sum()) + head
    return FlopsEstimate(
        dense_flops_per_token=dense,
        pruned_flops_per_token=pruned,
        ffn_param_reduction=1.0 - float(kept_frac.mean()),
        total_flops_reduction=(dense - pruned) / dense,
    )
