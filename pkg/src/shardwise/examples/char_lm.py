"""Character-level language model: collate, loss and predict, nothing else."""
from __future__ import annotations

from functools import partial

import numpy as np

from shardwise import models
from shardwise.pipeline import PipelineSpec

CORPUS = (
    "the quick brown fox jumps over the lazy dog. "
    "a stitch in time saves nine. "
    "all that glitters is not gold. "
    "the early bird catches the worm. "
    "where there is a will there is a way. "
    "actions speak louder than words. "
)


class Vocab:
    def __init__(self, text: str):
        self.chars = sorted(set(text))
        self.index = {c: i for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars)

    def encode(self, s: str) -> list[int]:
        return [self.index[c] for c in s]

    def decode(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)


def make_examples(text: str, seq_len: int, stride: int = 1) -> list[str]:
    return [text[i:i + seq_len + 1] for i in range(0, len(text) - seq_len, stride)]


def collate_fn(examples, vocab: Vocab):
    ids = np.array([vocab.encode(s) for s in examples], dtype=np.int64)
    return {
        "input_ids": ids[:, :-1],
        "labels": ids[:, 1:],
        "label_weights": np.ones(ids[:, 1:].shape),
    }


def loss_fn(rng, batch, params, cfg: models.TransformerConfig, dropout: float = 0.0):
    return models.lm_loss(params, batch, cfg, rng, dropout)


def pred_fn(rng, batch, params, cfg: models.TransformerConfig, n_new: int = 16):
    """Greedy continuation of each row of ``input_ids``, sliding a prompt-sized window."""
    prompt = np.asarray(batch["input_ids"])
    b, p = prompt.shape
    seq = np.zeros((b, p + n_new), dtype=np.int64)
    seq[:, :p] = prompt
    for pos in range(p, p + n_new):
        logits = models.transformer_logits(params, seq[:, pos - p:pos], cfg)
        seq[:, pos] = np.asarray(logits.numpy())[:, -1].argmax(-1)
    return seq[:, p:]


def output_fn(batch_preds, vocab: Vocab):
    return [vocab.decode(row) for row in batch_preds]


def build(seq_len: int = 16, d_model: int = 32, n_layers: int = 2, n_heads: int = 4, d_ff: int = 64,
          dtype=np.float32, seed: int = 0, text: str = CORPUS):
    vocab = Vocab(text)
    cfg = models.TransformerConfig(vocab_size=len(vocab), n_layers=n_layers, d_model=d_model,
                                   n_heads=n_heads, d_ff=d_ff, max_len=max(seq_len, 32))
    spec = PipelineSpec(
        collate_fn=partial(collate_fn, vocab=vocab),
        loss_fn=partial(loss_fn, cfg=cfg),
        pred_fn=partial(pred_fn, cfg=cfg),
        output_fn=partial(output_fn, vocab=vocab),
    )
    examples = make_examples(text, seq_len)
    n_eval = max(len(examples) // 10, 1)
    return {
        "spec": spec,
        "params": models.init_transformer(cfg, seed=seed, dtype=dtype),
        "train": examples[:-n_eval] if len(examples) > n_eval else examples,
        "eval": examples[-n_eval:],
        "vocab": vocab,
        "config": cfg,
    }
