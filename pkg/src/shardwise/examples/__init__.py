"""Shipped pipelines. Each defines only collate_fn, loss_fn and pred_fn (plus optional output/metric)."""
from shardwise.examples import char_lm, maml, seq2seq_copy

EXAMPLES = {"char-lm": char_lm, "seq2seq-copy": seq2seq_copy, "maml-sinusoid": maml}
