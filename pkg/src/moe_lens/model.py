"""Minimal Llama-style decoder: RMSNorm pre-norm, rotary positions, causal
multi-head attention, silu-gated FFN, no biases. Forward pass only, float32
throughout, batch size 1.

Weights live in the MLTB container: ASCII magic ``MLTB1\\n``, a uint32
little-endian length prefix, a UTF-8 JSON header (config + ordered tensor
index with byte offsets), then raw little-endian float32 payloads, row-major,
each 64-byte aligned from the start of the file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

MAGIC = b"MLTB1\n"
ALIGN = 64

CONFIG_FIELDS = (
    "n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len",
    "rope_theta", "norm_eps",
)

LAYER_TENSORS = (
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "up_proj", "gate_proj",
    "down_proj",
)


class ModelFormatError(ValueError):
    """Raised for any malformed, truncated, or invalid MLTB file."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    max_seq_len: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ValueError("rope_theta and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def tensor_shapes(self, tied_head: bool = False) -> dict[str, tuple[int, ...]]:
        """Ordered name -> shape map defining the MLTB tensor index."""
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        shapes: dict[str, tuple[int, ...]] = {"token_embedding": (v, d)}
        for i in range(self.n_layers):
            p = f"layer{i}."
            shapes[p + "attn_norm"] = (d,)
            shapes[p + "wq"] = (d, d)
            shapes[p + "wk"] = (d, d)
            shapes[p + "wv"] = (d, d)
            shapes[p + "wo"] = (d, d)
            shapes[p + "ffn_norm"] = (d,)
            shapes[p + "up_proj"] = (f, d)
            shapes[p + "gate_proj"] = (f, d)
            shapes[p + "down_proj"] = (d, f)
        shapes["final_norm"] = (d,)
        if not tied_head:
            shapes["output_head"] = (d, v)
        return shapes


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    up_proj: np.ndarray
    gate_proj: np.ndarray
    down_proj: np.ndarray


@dataclass
class ModelBundle:
    """Immutable after load; safe for concurrent read."""

    config: ModelConfig
    token_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    output_head: np.ndarray  # (d_model, vocab); may alias token_embedding.T
    tied_head: bool = False
    model_id: str = "unnamed"

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"token_embedding": self.token_embedding}
        for i, lw in enumerate(self.layers):
            for name in LAYER_TENSORS:
                out[f"layer{i}.{name}"] = getattr(lw, name)
        out["final_norm"] = self.final_norm
        if not self.tied_head:
            out["output_head"] = self.output_head
        return out


@dataclass
class ActivationTap:
    """Hidden FFN vector before the down-projection, one per (layer, token)."""

    layer: int
    token_position: int
    values: np.ndarray  # length d_ff

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ValueError("tap values must be a vector")


TapSink = Callable[[ActivationTap], None]


# ---------------------------------------------------------------------------
# MLTB container I/O
# ---------------------------------------------------------------------------

def _aligned(offset: int) -> int:
    return (offset + ALIGN - 1) // ALIGN * ALIGN


def save_model(bundle: ModelBundle, path) -> None:
    tensors = bundle.tensors()
    index = []
    # First pass with placeholder offsets to get a stable header length.
    header = {
        "config": {k: getattr(bundle.config, k) for k in CONFIG_FIELDS},
        "tied_head": bundle.tied_head,
        "model_id": bundle.model_id,
        "tensors": index,
    }
    for name, arr in tensors.items():
        index.append({"name": name, "dims": list(arr.shape), "offset": 0})

    def encode() -> bytes:
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    # Offsets depend on header length which depends on offset digits; iterate
    # until the layout is consistent (converges in a couple of rounds).
    for _ in range(8):
        blob = encode()
        pos = _aligned(len(MAGIC) + 4 + len(blob))
        changed = False
        for entry, arr in zip(index, tensors.values()):
            if entry["offset"] != pos:
                entry["offset"] = pos
                changed = True
            pos = _aligned(pos + arr.nbytes)
        if not changed:
            break
    else:
        raise RuntimeError("MLTB header layout failed to converge")

    blob = encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        pos = len(MAGIC) + 4 + len(blob)
        for entry, arr in zip(index, tensors.values()):
            fh.write(b"\0" * (entry["offset"] - pos))
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(data)
            pos = entry["offset"] + len(data)


def load_model(path) -> ModelBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not an MLTB file (bad magic)")
    if len(raw) < len(MAGIC) + 4:
        raise ModelFormatError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(raw) < hstart + hlen:
        raise ModelFormatError(f"{path}: truncated header (need {hlen} bytes)")
    try:
        header = json.loads(raw[hstart: hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed header: {exc}") from exc

    try:
        cfg = ModelConfig(**{k: header["config"][k] for k in CONFIG_FIELDS})
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: bad config in header: {exc}") from exc

    tied = bool(header.get("tied_head", False))
    expected = cfg.tensor_shapes(tied_head=tied)
    entries = header.get("tensors", [])
    names = [e.get("name") for e in entries]
    if names != list(expected):
        raise ModelFormatError(
            f"{path}: tensor index mismatch; expected {list(expected)}, got {names}")

    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["dims"])
        if shape != expected[name]:
            raise ModelFormatError(
                f"{path}: shape mismatch for {name}: header {shape}, "
                f"config implies {expected[name]}")
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape)) * 4
        if offset % ALIGN != 0:
            raise ModelFormatError(f"{path}: {name} offset {offset} not {ALIGN}-byte aligned")
        if offset + nbytes > len(raw):
            raise ModelFormatError(
                f"{path}: truncated file: {name} at offset {offset} needs "
                f"{nbytes} bytes, file has {len(raw) - offset}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
        arr = arr.reshape(shape).copy()
        if not np.isfinite(arr).all():
            raise ModelFormatError(f"{path}: non-finite values in {name} at offset {offset}")
        arrays[name] = arr

    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerWeights(**{n: arrays[f"layer{i}.{n}"] for n in LAYER_TENSORS}))
    emb = arrays["token_embedding"]
    head = emb.T if tied else arrays["output_head"]
    bundle = ModelBundle(
        config=cfg,
        token_embedding=emb,
        layers=layers,
        final_norm=arrays["final_norm"],
        output_head=head,
        tied_head=tied,
        model_id=str(header.get("model_id", "unnamed")),
    )
    for arr in bundle.tensors().values():
        arr.flags.writeable = False
    return bundle


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(eps))) * weight


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (x / (np.float32(1.0) + np.exp(-x))).astype(np.float32)


def _rope_cache(cfg: ModelConfig, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    hd = cfg.head_dim
    inv_freq = (cfg.rope_theta ** (-np.arange(0, hd, 2, dtype=np.float32) / hd)).astype(np.float32)
    angles = np.outer(np.arange(seq_len, dtype=np.float32), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (n_heads, seq, head_dim), rotate half-split pairs (Llama convention)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _attention(cfg: ModelConfig, lw: LayerWeights, x: np.ndarray,
               cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    seq = x.shape[0]
    nh, hd = cfg.n_heads, cfg.head_dim
    q = (x @ lw.wq.T).reshape(seq, nh, hd).transpose(1, 0, 2)
    k = (x @ lw.wk.T).reshape(seq, nh, hd).transpose(1, 0, 2)
    v = (x @ lw.wv.T).reshape(seq, nh, hd).transpose(1, 0, 2)
    q = _apply_rope(q, cos, sin)
    k = _apply_rope(k, cos, sin)
    scores = (q @ k.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(hd))
    mask = np.triu(np.full((seq, seq), -np.inf, dtype=np.float32), k=1)
    scores = scores + mask
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True, dtype=np.float32)
    out = (w @ v).transpose(1, 0, 2).reshape(seq, cfg.d_model)
    return out @ lw.wo.T


def _ffn_hidden(lw: LayerWeights, xn: np.ndarray) -> np.ndarray:
    """silu(gate x) * (up x): the tapped pre-down-projection representation."""
    return _silu(xn @ lw.gate_proj.T) * (xn @ lw.up_proj.T)


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if ids.size > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.size} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
        raise ValueError(f"token id {bad} out of range [0, {cfg.vocab_size})")
    return ids


def _forward(model: ModelBundle, tokens, neuron_keep: Optional[list] = None,
             tap: Optional[TapSink] = None) -> np.ndarray:
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    seq = ids.size
    cos, sin = _rope_cache(cfg, seq)
    x = model.token_embedding[ids].astype(np.float32)
    for li, lw in enumerate(model.layers):
        x = x + _attention(cfg, lw, _rmsnorm(x, lw.attn_norm, cfg.norm_eps), cos, sin)
        h = _ffn_hidden(lw, _rmsnorm(x, lw.ffn_norm, cfg.norm_eps))
        if neuron_keep is not None:
            h = h * neuron_keep[li]
        if tap is not None:
            for pos in range(seq):
                tap(ActivationTap(layer=li, token_position=pos, values=h[pos]))
        x = x + h @ lw.down_proj.T
    xn = _rmsnorm(x, model.final_norm, cfg.norm_eps)
    return xn @ model.output_head


def forward(model: ModelBundle, tokens, tap: Optional[TapSink] = None) -> np.ndarray:
    """Logits (seq_len, vocab) for a token sequence; pure and deterministic.

    When ``tap`` is given it receives one ActivationTap per (layer, position).
    """
    return _forward(model, tokens, neuron_keep=None, tap=tap)


def forward_taps(model: ModelBundle, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Bulk variant of forward(): returns (logits, taps) where taps has shape
    (n_layers, seq_len, d_ff). Avoids per-position sink overhead when
    profiling whole corpora."""
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    seq = ids.size
    cos, sin = _rope_cache(cfg, seq)
    x = model.token_embedding[ids].astype(np.float32)
    taps = np.empty((cfg.n_layers, seq, cfg.d_ff), dtype=np.float32)
    for li, lw in enumerate(model.layers):
        x = x + _attention(cfg, lw, _rmsnorm(x, lw.attn_norm, cfg.norm_eps), cos, sin)
        h = _ffn_hidden(lw, _rmsnorm(x, lw.ffn_norm, cfg.norm_eps))
        taps[li] = h
        x = x + h @ lw.down_proj.T
    xn = _rmsnorm(x, model.final_norm, cfg.norm_eps)
    return xn @ model.output_head, taps


def _neuron_keep_vectors(model: ModelBundle, partition, mask) -> list[np.ndarray]:
    cfg = model.config
    if partition.n_layers != cfg.n_layers or partition.d_ff != cfg.d_ff:
        raise ValueError(
            f"partition dims ({partition.n_layers}x{partition.d_ff}) do not "
            f"match model ({cfg.n_layers}x{cfg.d_ff})")
    keep = np.asarray(mask.keep, dtype=bool)
    if keep.shape != (cfg.n_layers, partition.n_experts):
        raise ValueError(
            f"mask shape {keep.shape} does not match "
            f"({cfg.n_layers}, {partition.n_experts})")
    vecs = []
    for li in range(cfg.n_layers):
        vecs.append(keep[li][partition.assignment[li]].astype(np.float32))
    return vecs


def forward_masked(model: ModelBundle, tokens, partition, mask,
                   tap: Optional[TapSink] = None) -> np.ndarray:
    """Forward with every neuron of a dropped expert contributing zero.

    With an all-keep mask the result is bitwise identical to forward().
    """
    vecs = _neuron_keep_vectors(model, partition, mask)
    return _forward(model, tokens, neuron_keep=vecs, tap=tap)


def forward_compacted(model: ModelBundle, tokens, partition, mask) -> np.ndarray:
    """Masked forward via physically shrunk FFN matrices (kept rows/columns
    only). Must agree with forward_masked to ~1e-5; this is the path whose
    FLOPs actually drop."""
    vecs = _neuron_keep_vectors(model, partition, mask)
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    seq = ids.size
    cos, sin = _rope_cache(cfg, seq)
    x = model.token_embedding[ids].astype(np.float32)
    for li, lw in enumerate(model.layers):
        x = x + _attention(cfg, lw, _rmsnorm(x, lw.attn_norm, cfg.norm_eps), cos, sin)
        kept = np.nonzero(vecs[li] > 0)[0]
        if kept.size:
            xn = _rmsnorm(x, lw.ffn_norm, cfg.norm_eps)
            h = _silu(xn @ lw.gate_proj[kept].T) * (xn @ lw.up_proj[kept].T)
            x = x + h @ lw.down_proj[:, kept].T
    xn = _rmsnorm(x, model.final_norm, cfg.norm_eps)
    return xn @ model.output_head


# ---------------------------------------------------------------------------
# Seeded toy models
# ---------------------------------------------------------------------------

def random_model(cfg: ModelConfig, seed: int, scale: float = 0.05,
                 model_id: str = "toy") -> ModelBundle:
    """Seeded-random bundle for desk-scale experiments; byte-deterministic."""
    rng = np.random.default_rng(seed)

    def mat(*shape):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(
            attn_norm=np.ones(cfg.d_model, dtype=np.float32),
            wq=mat(cfg.d_model, cfg.d_model),
            wk=mat(cfg.d_model, cfg.d_model),
            wv=mat(cfg.d_model, cfg.d_model),
            wo=mat(cfg.d_model, cfg.d_model),
            ffn_norm=np.ones(cfg.d_model, dtype=np.float32),
            up_proj=mat(cfg.d_ff, cfg.d_model),
            gate_proj=mat(cfg.d_ff, cfg.d_model),
            down_proj=mat(cfg.d_model, cfg.d_ff),
        ))
    return ModelBundle(
        config=cfg,
        token_embedding=mat(cfg.vocab_size, cfg.d_model),
        layers=layers,
        final_norm=np.ones(cfg.d_model, dtype=np.float32),
        output_head=mat(cfg.d_model, cfg.vocab_size),
        model_id=model_id,
    )


def perturb_model(bundle: ModelBundle, seed: int, scale: float = 0.01,
                  model_id: Optional[str] = None) -> ModelBundle:
    """Add small seeded noise to every non-norm weight; stands in for a
    tuning variant sharing the base model's expert split."""
    rng = np.random.default_rng(seed)

    def jitter(arr):
        return (arr + rng.standard_normal(arr.shape).astype(np.float32)
                * np.float32(scale)).astype(np.float32)

    layers = []
    for lw in bundle.layers:
        layers.append(LayerWeights(
            attn_norm=lw.attn_norm.copy(),
            wq=jitter(lw.wq), wk=jitter(lw.wk), wv=jitter(lw.wv), wo=jitter(lw.wo),
            ffn_norm=lw.ffn_norm.copy(),
            up_proj=jitter(lw.up_proj),
            gate_proj=jitter(lw.gate_proj),
            down_proj=jitter(lw.down_proj),
        ))
    return ModelBundle(
        config=bundle.config,
        token_embedding=jitter(bundle.token_embedding),
        layers=layers,
        final_norm=bundle.final_norm.copy(),
        output_head=jitter(bundle.output_head),
        model_id=model_id or (bundle.model_id + "-variant"),
    )
