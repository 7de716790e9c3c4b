"""Sequence-to-sequence copy task as a prefix language model.

The model reads ``source | target`` and is scored only on target tokens via
per-token label weights, the same weighted-mean loss used for summarization
pipelines.
"""
from __future__ import annotations

from functools import partial

import numpy as np

from shardwise import models
from shardwise.pipeline import PipelineSpec

ALPHABET = "abcdefgh"
SEP = len(ALPHABET)
VOCAB = len(ALPHABET) + 1


def make_examples(n: int, length: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [{"src": "".join(rng.choice(list(ALPHABET), length)), } for _ in range(n)]


def _ids(s: str) -> list[int]:
    return [ALPHABET.index(c) for c in s]


def collate_fn(examples):
    rows = np.array([_ids(e["src"]) + [SEP] + _ids(e["src"]) for e in examples], dtype=np.int64)
    length = (rows.shape[1] - 1) // 2
    weights = np.zeros(rows[:, 1:].shape)
    weights[:, length:] = 1.0
    return {"input_ids": rows[:, :-1], "labels": rows[:, 1:], "label_weights": weights,
            "source": rows[:, :length + 1]}


def loss_fn(rng, batch, params, cfg):
    return models.lm_loss(params, batch, cfg, rng)


def pred_fn(rng, batch, params, cfg):
    src = np.asarray(batch["source"])
    b, p = src.shape
    n = p - 1
    seq = np.zeros((b, p + n), dtype=np.int64)
    seq[:, :p] = src
    for pos in range(p, p + n):
        logits = np.asarray(models.transformer_logits(params, seq[:, :pos], cfg).numpy())
        seq[:, pos] = logits[:, pos - 1, :SEP].argmax(-1)
    return seq[:, p:]


def output_fn(batch_preds):
    return ["".join(ALPHABET[int(i)] for i in row) for row in batch_preds]


def metric_fn(examples, preds):
    exact = np.mean([e["src"] == p for e, p in zip(examples, preds)])
    chars = np.mean([a == b for e, p in zip(examples, preds) for a, b in zip(e["src"], p)])
    return {"exact_match": float(exact), "char_acc": float(chars)}


def build(length: int = 5, n_train: int = 512, n_eval: int = 32, d_model: int = 32, n_layers: int = 2,
          n_heads: int = 4, d_ff: int = 64, dtype=np.float32, seed: int = 0):
    cfg = models.TransformerConfig(vocab_size=VOCAB, n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                                   d_ff=d_ff, max_len=2 * length + 1)
    spec = PipelineSpec(
        collate_fn=collate_fn,
        loss_fn=partial(loss_fn, cfg=cfg),
        pred_fn=partial(pred_fn, cfg=cfg),
        output_fn=output_fn,
        metric_fn=metric_fn,
    )
    return {
        "spec": spec,
        "params": models.init_transformer(cfg, seed=seed, dtype=dtype),
        "train": make_examples(n_train, length, seed + 1),
        "eval": make_examples(n_eval, length, seed + 2),
        "config": cfg,
    }
