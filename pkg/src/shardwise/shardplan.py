"""Parameter roles and the two tensor-parallel splitting rules.

Fully-connected kernels alternate Split(0), Split(1), ... in dataflow order
within their block; attention Q/K/V kernels are Split(0) and the attention
output projection is Split(1). Kernels are laid out ``[out_features,
in_features]``, so Split(0) is column-parallel and Split(1) row-parallel.
Everything else (embeddings, norms, biases, unrecognized tensors) is
replicated.
"""
from __future__ import annotations

import fnmatch
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from shardwise.partition import REPLICATED, Partition, Replicated, Split, parse_partition

log = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ParamRole:
    kind: str
    sequence_index: int | None = None

    KINDS = ("AttentionQKV", "AttentionOut", "FullyConnected", "Embedding", "Norm", "Bias", "Other")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise PlanError(f"unknown role kind {self.kind!r}")
        if self.kind == "FullyConnected" and self.sequence_index is None:
            raise PlanError("FullyConnected needs a sequence_index")

    def __str__(self) -> str:
        if self.kind == "FullyConnected":
            return f"FullyConnected({self.sequence_index})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "ParamRole":
        text = text.strip()
        m = re.fullmatch(r"FullyConnected\((\d+)\)", text)
        if m:
            return cls("FullyConnected", int(m.group(1)))
        return cls(text)


QKV = ParamRole("AttentionQKV")
ATTN_OUT = ParamRole("AttentionOut")
EMBEDDING = ParamRole("Embedding")
NORM = ParamRole("Norm")
BIAS = ParamRole("Bias")
OTHER = ParamRole("Other")


def FC(i: int) -> ParamRole:
    return ParamRole("FullyConnected", i)


_ATTN_SCOPE = re.compile(r"^(self_?attn|self_?attention|attn|attention|encdecattention|cross_?attn|mha)\d*$")
_QKV_NAMES = {"q", "k", "v", "query", "key", "value", "q_proj", "k_proj", "v_proj",
              "qkv", "qkv_proj", "wq", "wk", "wv", "wqkv", "c_attn", "in_proj"}
_OUT_NAMES = {"o", "out", "out_proj", "o_proj", "output", "wo", "c_proj", "dense"}
_FC_SCOPE = re.compile(r"^(mlp|ffn|fc|dense|feed_?forward|densereludense|intermediate)")
_EMBED = re.compile(r"(embed|^wte$|^wpe$|^lm_head$|^shared$)")
_NORM = re.compile(r"(^ln|norm|^scale$|layernorm)")
_BIAS_NAMES = {"bias", "b", "beta"}


def split_path(name: str) -> list[str]:
    return [s for s in re.split(r"[/.]", name) if s]


def _natural_key(path: str):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", path)]


def _specificity(pattern: str) -> int:
    return sum(1 for ch in pattern if ch not in "*?[]")


def _override_role(name: str, overrides: Mapping[str, ParamRole]) -> ParamRole | None:
    hits = [(p, r) for p, r in overrides.items() if fnmatch.fnmatchcase(name, p)]
    if not hits:
        return None
    best = max(_specificity(p) for p, _ in hits)
    top = [(p, r) for p, r in hits if _specificity(p) == best]
    roles = {r for _, r in top}
    if len(roles) > 1:
        raise PlanError(f"conflicting overrides for {name!r}: "
                        + ", ".join(f"{p!r}->{r}" for p, r in top))
    return top[0][1]


def _structural_role(name: str, shape: Sequence[int]) -> tuple[str, str | None]:
    """Role kind plus, for FC kernels, the block key used to order them."""
    segs = [s.lower() for s in split_path(name)]
    if len(shape) <= 1:
        if segs and segs[-1] in _BIAS_NAMES:
            return "Bias", None
        return "Norm", None
    if any(_NORM.search(s) for s in segs[:-1]) or (segs and _NORM.search(segs[-1]) and len(shape) < 2):
        return "Norm", None
    if any(_EMBED.search(s) for s in segs):
        return "Embedding", None
    attn = next((i for i, s in enumerate(segs) if _ATTN_SCOPE.match(s)), None)
    if attn is not None:
        tail = segs[attn + 1:]
        if any(s in _QKV_NAMES for s in tail):
            return "AttentionQKV", None
        if any(s in _OUT_NAMES for s in tail):
            return "AttentionOut", None
    elif any(s in _QKV_NAMES - {"in_proj"} for s in segs[:-1]):
        return "AttentionQKV", None
    if len(shape) == 2:
        block = _fc_block(name)
        if block is not None:
            return "FullyConnected", block
    return "Other", None


def _fc_block(name: str) -> str | None:
    segs = [s.lower() for s in split_path(name)]
    fc = next((i for i, s in enumerate(segs) if _FC_SCOPE.match(s)), None)
    return None if fc is None else "/".join(segs[:fc])


def infer_roles(shapes: Mapping[str, Sequence[int]],
                overrides: Mapping[str, ParamRole | str] | None = None) -> dict[str, ParamRole]:
    """Assign exactly one :class:`ParamRole` to every parameter.

    ``shapes`` maps hierarchical names (``/`` or ``.`` separated) to shapes;
    a ParamTree of tensors works too. ``overrides`` maps fnmatch patterns to
    roles and wins over the name heuristics.
    """
    shapes = {k: tuple(getattr(v, "shape", v)) for k, v in shapes.items()}
    ov = {p: (ParamRole.parse(r) if isinstance(r, str) else r) for p, r in (overrides or {}).items()}
    roles: dict[str, ParamRole] = {}
    blocks: dict[str, list[str]] = {}
    for name, shape in shapes.items():
        forced = _override_role(name, ov) if ov else None
        if forced is not None:
            roles[name] = forced
            continue
        kind, block = _structural_role(name, shape)
        if kind == "FullyConnected":
            blocks.setdefault(block, []).append(name)
            continue
        if kind == "Other" and len(shape) == 2:
            log.warning("no role matched 2-D parameter %s %s; replicating it", name, shape)
        roles[name] = ParamRole(kind)
    for members in blocks.values():
        for i, name in enumerate(sorted(members, key=_natural_key)):
            roles[name] = FC(i)
    return {name: roles[name] for name in shapes}


@dataclass
class ShardingPlan:
    entries: dict[str, Partition]
    n_shards: int
    roles: dict[str, ParamRole] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Partition:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def role_of(self, name: str, shape: Sequence[int] | None = None) -> ParamRole:
        if name in self.roles:
            return self.roles[name]
        return infer_roles({name: shape or (1, 1)})[name]

    def to_text(self) -> str:
        lines = [f"# n_shards={self.n_shards}"]
        lines += [f"{name}\t{part}" for name, part in self.entries.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, n_shards: int | None = None) -> "ShardingPlan":
        entries: dict[str, Partition] = {}
        found_n = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*n_shards\s*=\s*(\d+)", line)
                if m:
                    found_n = int(m.group(1))
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise PlanError(f"line {lineno}: expected 'name<TAB>partition', got {line!r}")
            try:
                entries[parts[0]] = parse_partition(parts[1])
            except ValueError as e:
                raise PlanError(f"line {lineno}: {e}") from None
        n = n_shards if n_shards is not None else found_n
        if n is None:
            raise PlanError("plan text has no '# n_shards=' header and none was given")
        return cls(entries, n)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path, n_shards: int | None = None) -> "ShardingPlan":
        with open(path) as f:
            return cls.from_text(f.read(), n_shards)


def intended_partition(role: ParamRole) -> Partition:
    if role.kind == "AttentionQKV":
        return Split(0)
    if role.kind == "AttentionOut":
        return Split(1)
    if role.kind == "FullyConnected":
        return Split(role.sequence_index % 2)
    return REPLICATED


def derive_plan(roles: Mapping[str, ParamRole], shapes: Mapping[str, Sequence[int]],
                n_shards: int) -> ShardingPlan:
    if not isinstance(n_shards, int) or n_shards <= 0:
        raise PlanError(f"n_shards must be a positive integer, got {n_shards!r}")
    shapes = {k: tuple(getattr(v, "shape", v)) for k, v in shapes.items()}
    entries: dict[str, Partition] = {}
    intended = 0
    fits = 0
    for name, shape in shapes.items():
        role = roles[name]
        want = intended_partition(role)
        if isinstance(want, Split) and len(shape) == 2:
            intended += 1
            size = shape[want.dim]
            if size >= n_shards:
                fits += 1
            if size % n_shards:
                log.warning("%s: dim %d of %s not divisible by %d shards; replicating",
                            name, want.dim, shape, n_shards)
                want = REPLICATED
        elif isinstance(want, Split):
            want = REPLICATED
        entries[name] = want
    if intended and not fits:
        raise PlanError(f"model cannot be split {n_shards} ways: every splittable kernel "
                        f"dimension is smaller than {n_shards}")
    return ShardingPlan(entries, n_shards, dict(roles))


def plan_for(params: Mapping[str, Sequence[int]], n_shards: int,
             overrides: Mapping[str, ParamRole | str] | None = None) -> ShardingPlan:
    """Roles plus rules in one call; accepts a ParamTree or a shape mapping."""
    shapes = {k: tuple(getattr(v, "shape", v)) for k, v in params.items()}
    return derive_plan(infer_roles(shapes, overrides), shapes, n_shards)


def same_dim_plan(params: Mapping[str, Sequence[int]], n_shards: int) -> ShardingPlan:
    """Baseline that splits every intended kernel along dim 0."""
    plan = plan_for(params, n_shards)
    shapes = {k: tuple(getattr(v, "shape", v)) for k, v in params.items()}
    for name, part in plan.entries.items():
        if isinstance(part, Split) and shapes[name][0] % n_shards == 0:
            plan.entries[name] = Split(0)
    return plan


def validate_plan(plan: ShardingPlan, shapes: Mapping[str, Sequence[int]]) -> list[str]:
    shapes = {k: tuple(getattr(v, "shape", v)) for k, v in shapes.items()}
    out: list[str] = []
    if plan.n_shards < 1:
        out.append(f"n_shards must be >= 1, got {plan.n_shards}")
    roles = dict(plan.roles) or infer_roles(shapes)
    for name in shapes:
        if name not in plan.entries:
            out.append(f"{name}: missing from plan")
    fc_by_block: dict[str, list[tuple[int, str]]] = {}
    for name, part in plan.entries.items():
        if name not in shapes:
            out.append(f"{name}: not a parameter")
            continue
        shape = shapes[name]
        role = roles.get(name) or infer_roles({name: shape})[name]
        if isinstance(part, Split):
            if not 0 <= part.dim < len(shape):
                out.append(f"{name}: dim out of range (split:{part.dim} on rank {len(shape)})")
                continue
            if plan.n_shards >= 1 and shape[part.dim] % plan.n_shards:
                out.append(f"{name}: dim {part.dim} of size {shape[part.dim]} "
                           f"not divisible by {plan.n_shards}")
        want = intended_partition(role)
        if role.kind in ("AttentionQKV", "AttentionOut") and isinstance(part, Split) and part != want:
            out.append(f"{name}: {role} must be {want}, got {part}")
        if role.kind == "FullyConnected":
            block = _fc_block(name) or ""
            fc_by_block.setdefault(block, []).append((role.sequence_index, name))
    for members in fc_by_block.values():
        members.sort()
        for (i, a), (j, b) in zip(members, members[1:]):
            pa, pb = plan.entries[a], plan.entries[b]
            if j == i + 1 and isinstance(pa, Split) and isinstance(pb, Split) and pa.dim == pb.dim:
                out.append(f"{a}, {b}: consecutive FC kernels share split dim {pa.dim}")
    return out


def element_counts(plan: ShardingPlan, shapes: Mapping[str, Sequence[int]]) -> tuple[int, int]:
    """(replicated elements, split elements) over the whole tree."""
    rep = split = 0
    for name, shape in shapes.items():
        shape = tuple(getattr(shape, "shape", shape))
        n = 1
        for s in shape:
            n *= s
        if isinstance(plan.entries[name], Split):
            split += n
        else:
            rep += n
    return rep, split
