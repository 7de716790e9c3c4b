"""Desk-scale model bodies written only against :mod:`shardwise.ops`.

The same functions run on plain tensors (single device) and on sharded
values; nothing here knows about partitioning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shardwise import ops


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 32
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    max_len: int = 32
    tie_embeddings: bool = False

    def __post_init__(self):
        for k in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_len"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive, got {getattr(self, k)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


def init_transformer(cfg: TransformerConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Parameter tree with kernels laid out ``[out_features, in_features]``."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def normal(*shape, scale=0.02):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    p: dict[str, np.ndarray] = {
        "embed/embedding": normal(cfg.vocab_size, d, scale=0.1),
        "pos_embed/embedding": normal(cfg.max_len, d, scale=0.1),
    }
    for i in range(cfg.n_layers):
        b = f"block_{i}"
        p[f"{b}/ln1/scale"] = np.ones(d, dtype)
        p[f"{b}/ln1/bias"] = np.zeros(d, dtype)
        for name in ("q", "k", "v", "o"):
            p[f"{b}/attn/{name}/kernel"] = normal(d, d, scale=d ** -0.5)
            # a key bias shifts every score of a query equally, so softmax ignores it
            if name != "k":
                p[f"{b}/attn/{name}/bias"] = normal(d, scale=0.01)
        p[f"{b}/ln2/scale"] = np.ones(d, dtype)
        p[f"{b}/ln2/bias"] = np.zeros(d, dtype)
        p[f"{b}/mlp/fc1/kernel"] = normal(f, d, scale=d ** -0.5)
        p[f"{b}/mlp/fc1/bias"] = normal(f, scale=0.01)
        p[f"{b}/mlp/fc2/kernel"] = normal(d, f, scale=f ** -0.5)
        p[f"{b}/mlp/fc2/bias"] = normal(d, scale=0.01)
    p["ln_f/scale"] = np.ones(d, dtype)
    p["ln_f/bias"] = np.zeros(d, dtype)
    if not cfg.tie_embeddings:
        p["lm_head/kernel"] = normal(cfg.vocab_size, d, scale=d ** -0.5)
    return p


def attention(p, prefix: str, x, n_heads: int, causal: bool = True):
    b, t, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = ops.linear(x, p[f"{prefix}/{name}/kernel"], p.get(f"{prefix}/{name}/bias"))
        return ops.transpose(ops.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    out = ops.scaled_dot_product_attention(heads("q"), heads("k"), heads("v"), causal=causal)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return ops.linear(out, p[f"{prefix}/o/kernel"], p[f"{prefix}/o/bias"])


def mlp(p, prefix: str, x):
    h = ops.gelu(ops.linear(x, p[f"{prefix}/fc1/kernel"], p[f"{prefix}/fc1/bias"]))
    return ops.linear(h, p[f"{prefix}/fc2/kernel"], p[f"{prefix}/fc2/bias"])


def transformer_logits(p, input_ids, cfg: TransformerConfig, rng=None, dropout: float = 0.0):
    ids = np.asarray(input_ids.numpy() if hasattr(input_ids, "numpy") else input_ids)
    t = ids.shape[1]
    if t > cfg.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    x = ops.add(ops.embedding_lookup(p["embed/embedding"], ids),
                ops.embedding_lookup(p["pos_embed/embedding"], np.arange(t)))
    for i in range(cfg.n_layers):
        b = f"block_{i}"
        h = ops.layer_norm(x, p[f"{b}/ln1/scale"], p[f"{b}/ln1/bias"])
        x = ops.add(x, ops.dropout(attention(p, f"{b}/attn", h, cfg.n_heads), dropout, rng))
        h = ops.layer_norm(x, p[f"{b}/ln2/scale"], p[f"{b}/ln2/bias"])
        x = ops.add(x, ops.dropout(mlp(p, f"{b}/mlp", h), dropout, rng))
    x = ops.layer_norm(x, p["ln_f/scale"], p["ln_f/bias"])
    head = p["embed/embedding"] if cfg.tie_embeddings else p["lm_head/kernel"]
    return ops.linear(x, head)


def lm_loss(p, batch, cfg: TransformerConfig, rng=None, dropout: float = 0.0):
    """Token-weighted mean cross-entropy: sum(loss * w) / sum(w)."""
    logits = transformer_logits(p, batch["input_ids"], cfg, rng, dropout)
    losses = ops.softmax_cross_entropy(logits, batch["labels"])
    weights = batch.get("label_weights")
    if weights is None:
        weights = np.ones(np.shape(batch["labels"]))
    return ops.weighted_mean(losses, weights)


def init_mlp(sizes, seed: int = 0, dtype=np.float64, prefix: str = "mlp") -> dict[str, np.ndarray]:
    """Stack of dense layers ``{prefix}/fc{i}/kernel`` shaped ``[out, in]``."""
    rng = np.random.default_rng(seed)
    p = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (n_in + n_out))
        p[f"{prefix}/fc{i + 1}/kernel"] = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)
        p[f"{prefix}/fc{i + 1}/bias"] = np.zeros(n_out, dtype)
    return p


def mlp_forward(p, x, n_layers: int, activation=ops.relu, prefix: str = "mlp"):
    for i in range(1, n_layers + 1):
        x = ops.linear(x, p[f"{prefix}/fc{i}/kernel"], p[f"{prefix}/fc{i}/bias"])
        if i < n_layers:
            x = activation(x)
    return x
