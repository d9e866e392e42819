"""Toy-model trainer. Trains the same architecture as the numpy forward pass
(pre-norm RMSNorm, rotary positions, causal MHA, silu-gated FFN, no biases)
with torch on a small corpus, then exports the weights to a ModelBundle.
Only used to produce desk-scale fixtures; inference stays in numpy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import LayerWeights, ModelBundle, ModelConfig
from .tokenizer import ByteTokenizer


@dataclass(frozen=True)
class TrainConfig:
    seq_len: int = 64
    batch_size: int = 16
    steps: int = 600
    lr: float = 3e-3
    seed: int = 0


def _build_token_stream(texts: list[str], tokenizer: ByteTokenizer) -> np.ndarray:
    ids: list[int] = []
    for text in texts:
        ids.extend(tokenizer.encode(text, add_eos=True))
    return np.asarray(ids, dtype=np.int64)


def train_toy_model(cfg: ModelConfig, texts: list[str],
                    train_cfg: Optional[TrainConfig] = None,
                    tokenizer: Optional[ByteTokenizer] = None,
                    model_id: str = "toy-trained",
                    progress: bool = False) -> ModelBundle:
    """Next-token training on the given texts; deterministic given the seed
    (single-threaded torch)."""
    import torch
    import torch.nn.functional as F

    train_cfg = train_cfg or TrainConfig()
    tokenizer = tokenizer or ByteTokenizer()
    if tokenizer.vocab_size > cfg.vocab_size:
        raise ValueError(
            f"model vocab ({cfg.vocab_size}) smaller than tokenizer vocab "
            f"({tokenizer.vocab_size})")

    torch.manual_seed(train_cfg.seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    class Block(torch.nn.Module):
        def __init__(self):
            super().__init__()
            d, f = cfg.d_model, cfg.d_ff
            self.attn_norm = torch.nn.Parameter(torch.ones(d))
            self.wq = torch.nn.Linear(d, d, bias=False)
            self.wk = torch.nn.Linear(d, d, bias=False)
            self.wv = torch.nn.Linear(d, d, bias=False)
            self.wo = torch.nn.Linear(d, d, bias=False)
            self.ffn_norm = torch.nn.Parameter(torch.ones(d))
            self.up = torch.nn.Linear(d, f, bias=False)
            self.gate = torch.nn.Linear(d, f, bias=False)
            self.down = torch.nn.Linear(f, d, bias=False)

    def rmsnorm(x, w):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + cfg.norm_eps) * w

    hd = cfg.head_dim
    inv_freq = torch.tensor(
        cfg.rope_theta ** (-np.arange(0, hd, 2, dtype=np.float64) / hd),
        dtype=torch.float32)

    def rope(x, cos, sin):
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)

    class Net(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.emb = torch.nn.Embedding(cfg.vocab_size, cfg.d_model)
            self.blocks = torch.nn.ModuleList(Block() for _ in range(cfg.n_layers))
            self.final_norm = torch.nn.Parameter(torch.ones(cfg.d_model))
            self.head = torch.nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

        def forward(self, ids):
            b, s = ids.shape
            pos = torch.arange(s, dtype=torch.float32)
            angles = torch.outer(pos, inv_freq)
            cos, sin = torch.cos(angles), torch.sin(angles)
            x = self.emb(ids)
            attn_mask = torch.triu(torch.full((s, s), float("-inf")), diagonal=1)
            for blk in self.blocks:
                xn = rmsnorm(x, blk.attn_norm)
                q = blk.wq(xn).view(b, s, cfg.n_heads, hd).transpose(1, 2)
                k = blk.wk(xn).view(b, s, cfg.n_heads, hd).transpose(1, 2)
                v = blk.wv(xn).view(b, s, cfg.n_heads, hd).transpose(1, 2)
                q, k = rope(q, cos, sin), rope(k, cos, sin)
                scores = q @ k.transpose(-1, -2) / (hd ** 0.5) + attn_mask
                att = torch.softmax(scores, dim=-1) @ v
                x = x + blk.wo(att.transpose(1, 2).reshape(b, s, cfg.d_model))
                xn = rmsnorm(x, blk.ffn_norm)
                x = x + blk.down(F.silu(blk.gate(xn)) * blk.up(xn))
            return self.head(rmsnorm(x, self.final_norm))

    net = Net()
    opt = torch.optim.AdamW(net.parameters(), lr=train_cfg.lr)
    stream = _build_token_stream(texts, tokenizer)
    if stream.size < train_cfg.seq_len + 1:
        raise ValueError("corpus too small for the configured sequence length")
    rng = np.random.default_rng(train_cfg.seed)

    net.train()
    for step in range(train_cfg.steps):
        starts = rng.integers(0, stream.size - train_cfg.seq_len - 1,
                              size=train_cfg.batch_size)
        batch = np.stack([stream[s: s + train_cfg.seq_len + 1] for s in starts])
        ids = torch.from_numpy(batch[:, :-1])
        targets = torch.from_numpy(batch[:, 1:])
        logits = net(ids)
        loss = F.cross_entropy(logits.reshape(-1, cfg.vocab_size), targets.reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if progress and (step % 50 == 0 or step == train_cfg.steps - 1):
            print(f"step {step}: loss {loss.item():.4f}")

    def npy(t):
        return t.detach().cpu().numpy().astype(np.float32)

    layers = []
    for blk in net.blocks:
        layers.append(LayerWeights(
            attn_norm=npy(blk.attn_norm),
            wq=npy(blk.wq.weight), wk=npy(blk.wk.weight),
            wv=npy(blk.wv.weight), wo=npy(blk.wo.weight),
            ffn_norm=npy(blk.ffn_norm),
            up_proj=npy(blk.up.weight),
            gate_proj=npy(blk.gate.weight),
            down_proj=npy(blk.down.weight),
        ))
    return ModelBundle(
        config=cfg,
        token_embedding=npy(net.emb.weight),
        layers=layers,
        final_norm=npy(net.final_norm),
        output_head=npy(net.head.weight).T.copy(),
        model_id=model_id,
    )
