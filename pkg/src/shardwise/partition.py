"""Partition labels shared by plans, sharded tensors and the executor."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Replicated:
    def __str__(self) -> str:
        return "replicated"


@dataclass(frozen=True)
class Split:
    dim: int

    def __str__(self) -> str:
        return f"split:{self.dim}"


Partition = Replicated | Split
REPLICATED = Replicated()


def parse_partition(text: str) -> Partition:
    text = text.strip()
    if text == "replicated":
        return REPLICATED
    if text.startswith("split:"):
        try:
            return Split(int(text[len("split:"):]))
        except ValueError:
            pass
    raise ValueError(f"unrecognized partition {text!r}")
