"""The differentiable op set.

Every public function accepts :class:`~shardwise.tensor.Tensor` values, numpy
arrays or python scalars. Any argument whose type defines ``__tensor_op__``
takes over the call, which is how sharded values execute the same user code.
"""
from __future__ import annotations

import functools
import math
from typing import Any, Sequence

import numpy as np

from shardwise.tensor import (
    BackwardCtx,
    OpDef,
    ShapeError,
    Tensor,
    TensorError,
    apply_op,
    as_array,
    register_op,
)

GELU_C = math.sqrt(2.0 / math.pi)


def _iter_args(args):
    for a in args:
        if isinstance(a, (list, tuple)):
            yield from a
        else:
            yield a


def dispatchable(fn):
    name = fn.__name__

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        for a in _iter_args(args):
            hook = getattr(type(a), "__tensor_op__", None)
            if hook is not None:
                return hook(name, args, kwargs)
        return fn(*args, **kwargs)

    return wrapper


def _float_dtype(*xs) -> np.dtype:
    for x in xs:
        dt = getattr(x, "dtype", None)
        if dt is not None and np.dtype(dt).kind == "f":
            return np.dtype(dt)
    return np.dtype(np.float64)


def _operand(x: Any, dtype: np.dtype) -> Any:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def sum_to_shape(g: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Reduce a broadcast cotangent back to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# elementwise binary ------------------------------------------------------

def _add_fwd(xs, attrs):
    _broadcast("add", *xs)
    return [xs[0] + xs[1]], None


def _add_bwd(ctx: BackwardCtx, gs, needs):
    g = gs[0]
    return [sum_to_shape(g, ctx.inputs[0].shape) if needs[0] else None,
            sum_to_shape(g, ctx.inputs[1].shape) if needs[1] else None]


def _sub_fwd(xs, attrs):
    _broadcast("sub", *xs)
    return [xs[0] - xs[1]], None


def _sub_bwd(ctx, gs, needs):
    g = gs[0]
    return [sum_to_shape(g, ctx.inputs[0].shape) if needs[0] else None,
            sum_to_shape(-g, ctx.inputs[1].shape) if needs[1] else None]


def _mul_fwd(xs, attrs):
    _broadcast("multiply", *xs)
    return [xs[0] * xs[1]], None


def _mul_bwd(ctx, gs, needs):
    a, b = ctx.inputs
    g = gs[0]
    return [sum_to_shape(g * b, a.shape) if needs[0] else None,
            sum_to_shape(g * a, b.shape) if needs[1] else None]


register_op(OpDef("add", _add_fwd, _add_bwd))
register_op(OpDef("sub", _sub_fwd, _sub_bwd))
register_op(OpDef("multiply", _mul_fwd, _mul_bwd))


@dispatchable
def add(a, b):
    dt = _float_dtype(a, b)
    return apply_op("add", [_operand(a, dt), _operand(b, dt)])[0]


@dispatchable
def sub(a, b):
    dt = _float_dtype(a, b)
    return apply_op("sub", [_operand(a, dt), _operand(b, dt)])[0]


@dispatchable
def multiply(a, b):
    dt = _float_dtype(a, b)
    return apply_op("multiply", [_operand(a, dt), _operand(b, dt)])[0]


# matmul -----------------------------------------------------------------

def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ") from None
    return [np.matmul(a, b)], None


def _matmul_bwd(ctx, gs, needs):
    a, b = ctx.inputs
    g = gs[0]
    da = sum_to_shape(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
    db = sum_to_shape(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
    return [da, db]


register_op(OpDef("matmul", _matmul_fwd, _matmul_bwd))


@dispatchable
def matmul(a, b):
    """Batched ``a @ b``; both operands need at least two dims."""
    dt = _float_dtype(a, b)
    return apply_op("matmul", [_operand(a, dt), _operand(b, dt)])[0]


# activations ------------------------------------------------------------

def _gelu_fwd(xs, attrs):
    x = xs[0]
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    return [0.5 * x * (1.0 + t)], t


def _gelu_bwd(ctx, gs, needs):
    x, t = ctx.inputs[0], ctx.saved
    du = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return [gs[0] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)]


def _relu_fwd(xs, attrs):
    return [np.maximum(xs[0], 0)], None


def _relu_bwd(ctx, gs, needs):
    return [gs[0] * (ctx.inputs[0] > 0)]


register_op(OpDef("gelu", _gelu_fwd, _gelu_bwd))
register_op(OpDef("relu", _relu_fwd, _relu_bwd))


@dispatchable
def gelu(x):
    """GELU, tanh approximation."""
    return apply_op("gelu", [x])[0]


@dispatchable
def relu(x):
    return apply_op("relu", [x])[0]


# normalization ----------------------------------------------------------

def _norm_fwd(xs, attrs):
    x = xs[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + attrs["eps"])
    y = xc * inv
    return [y], inv


def _norm_bwd(ctx, gs, needs):
    g, y, inv = gs[0], ctx.outputs[0], ctx.saved
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - y * gy)]


register_op(OpDef("normalize", _norm_fwd, _norm_bwd))


@dispatchable
def normalize(x, eps: float = 1e-5):
    """Zero-mean, unit-variance normalization over the last dim (no affine)."""
    return apply_op("normalize", [x], {"eps": float(eps)})[0]


def layer_norm(x, scale=None, bias=None, eps: float = 1e-5):
    y = normalize(x, eps)
    if scale is not None:
        y = multiply(y, scale)
    if bias is not None:
        y = add(y, bias)
    return y


# embedding / softmax / cross-entropy -------------------------------------

def _embed_fwd(xs, attrs):
    table, ids = xs
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="table must be 2-D")
    if ids.dtype.kind not in "iu":
        raise TensorError("embedding_lookup: ids must be integer-valued")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return [table[ids]], None


def _embed_bwd(ctx, gs, needs):
    table, ids = ctx.inputs
    if not needs[0]:
        return [None, None]
    out = np.zeros_like(table)
    np.add.at(out, ids.reshape(-1), gs[0].reshape(-1, table.shape[1]))
    return [out, None]


def _softmax_fwd(xs, attrs):
    x, axis = xs[0], attrs["axis"]
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return [e / e.sum(axis=axis, keepdims=True)], None


def _softmax_bwd(ctx, gs, needs):
    y, g, axis = ctx.outputs[0], gs[0], ctx.attrs["axis"]
    return [y * (g - (g * y).sum(axis=axis, keepdims=True))]


def _xent_fwd(xs, attrs):
    logits, labels = xs
    if labels.dtype.kind not in "iu":
        raise TensorError("softmax_cross_entropy: labels must be integer-valued")
    if labels.shape != logits.shape[:-1]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise TensorError(f"softmax_cross_entropy: labels outside [0, {logits.shape[-1]})")
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    return [-picked], logp


def _xent_bwd(ctx, gs, needs):
    labels, logp = ctx.inputs[1], ctx.saved
    p = np.exp(logp)
    np.put_along_axis(p, labels[..., None],
                      np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
    return [p * gs[0][..., None], None]


register_op(OpDef("embedding_lookup", _embed_fwd, _embed_bwd))
register_op(OpDef("softmax", _softmax_fwd, _softmax_bwd))
register_op(OpDef("softmax_cross_entropy", _xent_fwd, _xent_bwd))


def _ids(x):
    if isinstance(x, Tensor):
        if not x.is_integer:
            raise TensorError("expected an integer-valued tensor")
        return x
    return as_array(x, np.int64)


@dispatchable
def embedding_lookup(table, ids):
    return apply_op("embedding_lookup", [table, _ids(ids)])[0]


@dispatchable
def softmax(x, axis: int = -1):
    return apply_op("softmax", [x], {"axis": int(axis)})[0]


@dispatchable
def softmax_cross_entropy(logits, labels):
    """Per-position cross-entropy with integer labels; shape ``labels.shape``."""
    return apply_op("softmax_cross_entropy", [logits, _ids(labels)])[0]


# structural ---------------------------------------------------------------

def _reshape_fwd(xs, attrs):
    x, shape = xs[0], attrs["shape"]
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape, detail="element counts differ")
    return [x.reshape(shape)], None


def _reshape_bwd(ctx, gs, needs):
    return [gs[0].reshape(ctx.inputs[0].shape)]


def _transpose_fwd(xs, attrs):
    x, axes = xs[0], attrs["axes"]
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="axes are not a permutation")
    return [np.ascontiguousarray(np.transpose(x, axes))], None


def _transpose_bwd(ctx, gs, needs):
    return [np.transpose(gs[0], np.argsort(ctx.attrs["axes"]))]


def _slice_fwd(xs, attrs):
    x, axis, start, stop = xs[0], attrs["axis"], attrs["start"], attrs["stop"]
    if not (0 <= axis < x.ndim) or not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError("slice_axis", x.shape, (axis, start, stop), detail="slice out of range")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return [np.ascontiguousarray(x[tuple(idx)])], None


def _slice_bwd(ctx, gs, needs):
    x, a = ctx.inputs[0], ctx.attrs
    out = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    idx[a["axis"]] = slice(a["start"], a["stop"])
    out[tuple(idx)] = gs[0]
    return [out]


def _concat_fwd(xs, attrs):
    axis = attrs["axis"]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError("concat", ref, x.shape)
    return [np.concatenate(xs, axis=axis)], None


def _concat_bwd(ctx, gs, needs):
    axis = ctx.attrs["axis"]
    cuts = np.cumsum([x.shape[axis] for x in ctx.inputs])[:-1]
    return [p if n else None for p, n in zip(np.split(gs[0], cuts, axis=axis), needs)]


def _reduce_fwd(xs, attrs):
    x = xs[0]
    fn = np.sum if attrs["kind"] == "sum" else np.mean
    return [np.asarray(fn(x, axis=attrs["axis"], keepdims=attrs["keepdims"]))], None


def _reduce_bwd(ctx, gs, needs):
    x, a = ctx.inputs[0], ctx.attrs
    g = gs[0]
    axis = a["axis"]
    axes = tuple(range(x.ndim)) if axis is None else axis
    if not a["keepdims"]:
        g = np.expand_dims(g, axes)
    g = np.broadcast_to(g, x.shape)
    if a["kind"] == "mean":
        g = g / (np.prod([x.shape[i] for i in axes]) if axes else 1)
    return [np.array(g)]


register_op(OpDef("reshape", _reshape_fwd, _reshape_bwd))
register_op(OpDef("transpose", _transpose_fwd, _transpose_bwd))
register_op(OpDef("slice_axis", _slice_fwd, _slice_bwd))
register_op(OpDef("concat", _concat_fwd, _concat_bwd))
register_op(OpDef("reduce", _reduce_fwd, _reduce_bwd))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


@dispatchable
def reshape(x, shape: Sequence[int]):
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    return apply_op("reshape", [x], {"shape": shape})[0]


@dispatchable
def transpose(x, axes: Sequence[int] | None = None):
    nd = len(x.shape)
    axes = tuple(reversed(range(nd))) if axes is None else tuple(a % nd for a in axes)
    return apply_op("transpose", [x], {"axes": axes})[0]


@dispatchable
def slice_axis(x, axis: int, start: int, stop: int):
    return apply_op("slice_axis", [x], {"axis": axis % len(x.shape), "start": int(start),
                                       "stop": int(stop)})[0]


@dispatchable
def concat(xs: Sequence[Any], axis: int = 0):
    return apply_op("concat", list(xs), {"axis": axis % len(xs[0].shape)})[0]


@dispatchable
def reduce_sum(x, axis=None, keepdims: bool = False):
    return apply_op("reduce", [x], {"kind": "sum", "axis": _norm_axis(axis, len(x.shape)),
                                   "keepdims": keepdims})[0]


@dispatchable
def reduce_mean(x, axis=None, keepdims: bool = False):
    return apply_op("reduce", [x], {"kind": "mean", "axis": _norm_axis(axis, len(x.shape)),
                                   "keepdims": keepdims})[0]


@dispatchable
def stop_gradient(x):
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


# composites -----------------------------------------------------------------

def linear(x, kernel, bias=None):
    """``x @ kernel.T + bias`` for a kernel laid out ``[out_features, in_features]``."""
    y = matmul(x, transpose(kernel))
    return y if bias is None else add(y, bias)


def causal_mask(t: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)


def scaled_dot_product_attention(q, k, v, causal: bool = False, mask=None):
    """softmax(q kᵀ / sqrt(d) + mask) v over inputs shaped ``[..., T, d]``."""
    d = q.shape[-1]
    nd = len(k.shape)
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = multiply(matmul(q, transpose(k, axes)), 1.0 / math.sqrt(d))
    dt = _float_dtype(q)
    if causal:
        scores = add(scores, causal_mask(q.shape[-2], dt))
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


def dropout(x, rate: float, rng: np.random.Generator | None):
    """Inverted dropout with a mask drawn at the global shape of ``x``."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(tuple(x.shape)) >= rate) / (1.0 - rate)
    return multiply(x, keep.astype(_float_dtype(x)))


def weighted_mean(values, weights):
    """``sum(values * weights) / sum(weights)`` with constant weights."""
    w = np.asarray(as_array(weights), dtype=_float_dtype(values))
    total = float(w.sum())
    if total <= 0:
        raise TensorError("weighted_mean: weights sum to zero")
    return multiply(reduce_sum(multiply(values, w)), 1.0 / total)


def mse(pred, target):
    diff = sub(pred, target)
    return reduce_mean(multiply(diff, diff))
