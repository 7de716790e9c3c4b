"""Line-oriented model description consumed by the command line.

::

    # comments and blank lines are ignored
    vocab_size = 32
    n_layers = 4
    d_model = 32
    n_heads = 4
    d_ff = 64
    max_len = 16
    tie_embeddings = false
    role block_0/mlp/* = Other

``role <pattern> = <Role>`` lines pin parameter roles by fnmatch pattern.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from shardwise.models import TransformerConfig
from shardwise.shardplan import ParamRole, PlanError


class SpecError(ValueError):
    pass


_INT_KEYS = ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_len")
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


@dataclass
class ModelSpec:
    config: TransformerConfig
    overrides: dict[str, ParamRole] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{f.name} = {str(getattr(self.config, f.name)).lower()}" for f in fields(self.config)]
        lines += [f"role {p} = {r}" for p, r in self.overrides.items()]
        return "\n".join(lines) + "\n"


def parse_model_spec(text: str) -> ModelSpec:
    values: dict[str, object] = {}
    overrides: dict[str, ParamRole] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.rsplit("=", 1))
        if key.startswith("role "):
            pattern = key[5:].strip()
            try:
                overrides[pattern] = ParamRole.parse(value)
            except PlanError as e:
                raise SpecError(f"line {lineno}: {e}") from None
            continue
        if key in values:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        if key in _INT_KEYS:
            try:
                values[key] = int(value)
            except ValueError:
                raise SpecError(f"line {lineno}: {key} must be an integer, got {value!r}") from None
        elif key == "tie_embeddings":
            if value.lower() not in _BOOL:
                raise SpecError(f"line {lineno}: tie_embeddings must be true/false, got {value!r}")
            values[key] = _BOOL[value.lower()]
        else:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
    missing = [k for k in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff") if k not in values]
    if missing:
        raise SpecError(f"missing keys: {', '.join(missing)}")
    try:
        cfg = TransformerConfig(**values)
    except ValueError as e:
        raise SpecError(str(e)) from None
    return ModelSpec(cfg, overrides)


def load_model_spec(path) -> ModelSpec:
    with open(path) as f:
        return parse_model_spec(f.read())
