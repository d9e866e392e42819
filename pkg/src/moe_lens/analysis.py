"""Comparisons between frequency matrices: the three pairwise similarity
metrics (Euclidean, row-wise KL, row-wise Pearson), high-frequency shared
expert maps, and tuned-minus-base frequency diffs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .profiler import FrequencyMatrix

KL_EPS = 1e-10


def _check_dims(a: FrequencyMatrix, b: FrequencyMatrix) -> None:
    if (a.n_layers, a.n_experts) != (b.n_layers, b.n_experts):
        raise ValueError(
            f"dimension mismatch: {a.n_layers}x{a.n_experts} vs "
            f"{b.n_layers}x{b.n_experts}")


def euclidean_distance(a: FrequencyMatrix, b: FrequencyMatrix) -> float:
    """sqrt of the sum of squared entrywise frequency differences."""
    _check_dims(a, b)
    diff = a.frequencies - b.frequencies
    return float(np.sqrt(np.sum(diff * diff)))


def _smooth_rows(freq: np.ndarray) -> np.ndarray:
    """Rows to probability vectors: additive epsilon, then renormalize."""
    p = freq + KL_EPS
    return p / p.sum(axis=1, keepdims=True)


def kl_rowwise(a: FrequencyMatrix, b: FrequencyMatrix) -> float:
    """Sum over layers of KL(P_l || Q_l) on epsilon-smoothed, renormalized
    rows. Directional: reported as KL(a || b)."""
    _check_dims(a, b)
    p = _smooth_rows(a.frequencies)
    q = _smooth_rows(b.frequencies)
    return float(np.sum(p * np.log(p / q)))


def pearson_rowwise(a: FrequencyMatrix, b: FrequencyMatrix,
                    degenerate_rows: list | None = None) -> float:
    """Mean over layers of the per-row Pearson correlation. A row pair with
    a constant row contributes 0; its index is appended to degenerate_rows
    when a list is passed."""
    _check_dims(a, b)
    fa, fb = a.frequencies, b.frequencies
    vals = []
    for li in range(a.n_layers):
        if np.ptp(fa[li]) == 0 or np.ptp(fb[li]) == 0:
            if degenerate_rows is not None:
                degenerate_rows.append(li)
            vals.append(0.0)
        else:
            xa = fa[li] - fa[li].mean()
            xb = fb[li] - fb[li].mean()
            na, nb = np.sqrt(np.sum(xa * xa)), np.sqrt(np.sum(xb * xb))
            vals.append(float(np.sum(xa * xb) / (na * nb)))
    return float(np.mean(vals))


@dataclass
class SimilarityReport:
    language_tags: list[str]
    euclidean: np.ndarray  # (L, L)
    kl: np.ndarray         # (L, L), directional: kl[i][j] = KL(lang_i || lang_j)
    pearson: np.ndarray    # (L, L)
    degenerate_pearson_rows: dict[str, list[int]] = field(default_factory=dict)

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "language_tags": self.language_tags,
            "kl_direction": "row_conditioned_on_column",
            "euclidean": self.euclidean.tolist(),
            "kl": self.kl.tolist(),
            "pearson": self.pearson.tolist(),
            "degenerate_pearson_rows": self.degenerate_pearson_rows,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SimilarityReport":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(
            language_tags=doc["language_tags"],
            euclidean=np.asarray(doc["euclidean"], dtype=np.float64),
            kl=np.asarray(doc["kl"], dtype=np.float64),
            pearson=np.asarray(doc["pearson"], dtype=np.float64),
            degenerate_pearson_rows={k: list(v) for k, v in
                                     doc.get("degenerate_pearson_rows", {}).items()},
        )


def similarity_report(matrices: list[FrequencyMatrix]) -> SimilarityReport:
    """All-pairs grid of the three metrics. KL is directional (row language
    against column language); euclidean and pearson are symmetric."""
    if len(matrices) < 2:
        raise ValueError("need at least 2 frequency matrices")
    for m in matrices[1:]:
        _check_dims(matrices[0], m)
    n = len(matrices)
    tags = [m.language_tag for m in matrices]
    euc = np.zeros((n, n))
    kl = np.zeros((n, n))
    pear = np.zeros((n, n))
    degenerate: dict[str, list[int]] = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                pear[i, j] = pearson_rowwise(matrices[i], matrices[j])
                continue
            euc[i, j] = euclidean_distance(matrices[i], matrices[j])
            kl[i, j] = kl_rowwise(matrices[i], matrices[j])
            rows: list[int] = []
            pear[i, j] = pearson_rowwise(matrices[i], matrices[j], rows)
            if rows:
                degenerate[f"{tags[i]}|{tags[j]}"] = rows
    return SimilarityReport(language_tags=tags, euclidean=euc, kl=kl,
                            pearson=pear, degenerate_pearson_rows=degenerate)


@dataclass
class SharedExpertMap:
    """Per cell: in how many languages that expert is high-frequency."""

    counts: np.ndarray  # (n_layers, n_experts) int
    threshold: float
    n_languages: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (self.counts < 0).any() or (self.counts > self.n_languages).any():
            raise ValueError("shared-map entries must lie in [0, n_languages]")


def shared_expert_map(matrices: list[FrequencyMatrix], threshold: float = 0.05) -> SharedExpertMap:
    """Count, per expert, the languages whose frequency is >= threshold
    (inclusive, matching the high-frequency definition)."""
    if not matrices:
        raise ValueError("need at least 1 frequency matrix")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    for m in matrices[1:]:
        _check_dims(matrices[0], m)
    counts = np.zeros((matrices[0].n_layers, matrices[0].n_experts), dtype=np.int64)
    for m in matrices:
        counts += (m.frequencies >= threshold).astype(np.int64)
    return SharedExpertMap(counts=counts, threshold=threshold,
                           n_languages=len(matrices))


@dataclass
class DiffMatrix:
    """Entrywise tuned frequency minus base frequency, shared expert split."""

    values: np.ndarray  # (n_layers, n_experts), in [-1, 1]
    base_model_id: str
    tuned_model_id: str
    language_tag: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (np.abs(self.values) > 1.0).any():
            raise ValueError("diff entries must lie in [-1, 1]")


def diff_matrix(base: FrequencyMatrix, tuned: FrequencyMatrix) -> DiffMatrix:
    _check_dims(base, tuned)
    if base.language_tag != tuned.language_tag:
        raise ValueError(
            f"language mismatch: {base.language_tag!r} vs {tuned.language_tag!r}")
    return DiffMatrix(
        values=tuned.frequencies - base.frequencies,
        base_model_id=base.model_id,
        tuned_model_id=tuned.model_id,
        language_tag=base.language_tag,
    )


# ---------------------------------------------------------------------------
# Grid files: shared maps and diffs reuse the MOEFREQ framing with a kind
# field and (for diffs) real-valued cells.
# ---------------------------------------------------------------------------

def save_shared_grid(shared: SharedExpertMap, path) -> None:
    n_layers, n_experts = shared.counts.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            f"MOEFREQ v1 kind=shared layers={n_layers} experts={n_experts} "
            f"tau={shared.threshold!r} languages={shared.n_languages}\n")
        for row in shared.counts:
            fh.write(",".join(str(int(c)) for c in row) + "\n")


def load_shared_grid(path) -> SharedExpertMap:
    kv, rows = _load_grid(path, expected_kind="shared")
    return SharedExpertMap(
        counts=np.asarray(rows, dtype=np.int64),
        threshold=float(kv["tau"]),
        n_languages=int(kv["languages"]))


def save_diff_grid(diff: DiffMatrix, path) -> None:
    n_layers, n_experts = diff.values.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            f"MOEFREQ v1 kind=diff layers={n_layers} experts={n_experts} "
            f"lang={diff.language_tag} base={diff.base_model_id} "
            f"tuned={diff.tuned_model_id}\n")
        for row in diff.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_diff_grid(path) -> DiffMatrix:
    kv, rows = _load_grid(path, expected_kind="diff")
    return DiffMatrix(
        values=np.asarray(rows, dtype=np.float64),
        base_model_id=kv["base"],
        tuned_model_id=kv["tuned"],
        language_tag=kv["lang"])


def _load_grid(path, expected_kind: str) -> tuple[dict[str, str], list[list[float]]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split(" ")
        if parts[:2] != ["MOEFREQ", "v1"]:
            raise ValueError(f"{path}: bad grid header: {header!r}")
        kv = dict(p.partition("=")[::2] for p in parts[2:])
        if kv.get("kind") != expected_kind:
            raise ValueError(
                f"{path}: expected kind={expected_kind}, got kind={kv.get('kind')}")
        n_layers = int(kv["layers"])
        rows = []
        for li in range(n_layers):
            line = fh.readline().rstrip("\n")
            if not line:
                raise ValueError(f"{path}: missing grid row for layer {li}")
            rows.append([float(c) for c in line.split(",")])
    return kv, rows
