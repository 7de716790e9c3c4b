from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np

from shardwise.mesh import ShardedTensor
from shardwise.spmd import DistTensor, sharded_call, split_batch
from shardwise.tensor import Tensor


class PredictionError(ValueError):
    pass


def to_host(value) -> np.ndarray:
    if isinstance(value, (DistTensor, Tensor)):
        return np.asarray(value.numpy())
    return np.asarray(value)


def pad_examples(examples: Sequence[Any], batch_size: int) -> tuple[list, int]:
    """Repeat the last example so the count is a multiple of ``batch_size``."""
    examples = list(examples)
    n_pad = (-len(examples)) % batch_size
    return examples + [examples[-1]] * n_pad, n_pad


class Predictor:
    def __init__(self, deployer, collate_fn, pred_fn, output_fn=None):
        self.deployer = deployer
        self.collate_fn = collate_fn
        self.pred_fn = pred_fn
        self.output_fn = output_fn
        self.n_calls = 0

    def _run_batch(self, params: Mapping[str, ShardedTensor], batch, rng_index: int):
        mesh = self.deployer.mesh
        parts = split_batch(batch, mesh.dp_size)
        outs = []
        for r, part in enumerate(parts):
            rng = self.deployer.rng("predict", rng_index, r)
            n = len(next(iter(part.values())))
            res = sharded_call(lambda p: self.pred_fn(rng, part, p), params, mesh, r)
            if isinstance(res, Mapping):
                host = {k: to_host(v) for k, v in res.items()}
                bad = {k: v.shape for k, v in host.items() if v.ndim == 0 or v.shape[0] != n}
            else:
                host = to_host(res)
                bad = host.shape if host.ndim == 0 or host.shape[0] != n else None
            if bad:
                raise PredictionError(f"pred_fn output batch dim mismatch: expected {n}, got {bad}")
            outs.append(host)
        if isinstance(outs[0], dict):
            return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}
        return np.concatenate(outs)

    def predict(self, params: Mapping[str, ShardedTensor], examples: Sequence[Any],
                per_device_batch_size: int) -> list:
        """User values for ``examples`` in input order."""
        if not examples:
            return []
        gb = per_device_batch_size * self.deployer.dp_size
        padded, n_pad = pad_examples(examples, gb)
        results: list = []
        for start in range(0, len(padded), gb):
            chunk = padded[start:start + gb]
            preds = self._run_batch(params, self.collate_fn(chunk), self.n_calls)
            self.n_calls += 1
            keep = min(gb, len(examples) - start)
            if isinstance(preds, dict):
                preds = {k: v[:keep] for k, v in preds.items()}
                rows = [{k: v[i] for k, v in preds.items()} for i in range(keep)]
            else:
                preds = preds[:keep]
                rows = list(preds)
            results.extend(self.output_fn(preds) if self.output_fn else rows)
        return results
