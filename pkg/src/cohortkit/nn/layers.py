"""Parameterized building blocks: linear, feedforward, layer norm, multi-head
attention, GRU cell, and a pre-norm transformer layer.

Parameter containers are plain dataclasses of Tensors; `collect_tensors`
flattens any nesting of dataclasses / lists / dicts into a named dict for
checkpointing and optimizers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, ParameterError
from . import tensor as T
from .tensor import Tensor


# -- init ---------------------------------------------------------------

def xavier_uniform(shape, rng: np.random.Generator, gain: float = 1.0, dtype=np.float32) -> Tensor:
    fan_in, fan_out = shape[-2] if len(shape) > 1 else shape[0], shape[-1]
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def normal_init(shape, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# -- parameter trees ----------------------------------------------------

def collect_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses/lists/dicts of Tensors into {name: Tensor}."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix or "param"] = obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}.{f.name}" if prefix else f.name
            out.update(collect_tensors(value, key))
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            out.update(collect_tensors(value, f"{prefix}.{i}"))
    elif isinstance(obj, dict):
        for k, value in obj.items():
            out.update(collect_tensors(value, f"{prefix}.{k}"))
    return out


def assign_tensors(obj, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Load flat arrays back into a parameter tree built with the same shape."""
    for name, param in collect_tensors(obj, prefix).items():
        if name not in arrays:
            raise DimensionError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(param.shape):
            raise DimensionError(f"tensor {name!r}: checkpoint shape {arr.shape} != expected {param.shape}")
        param.data = arr.astype(param.data.dtype, copy=True)


def params_digest(obj) -> str:
    """Stable content hash of a parameter tree (detects unintended mutation)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(collect_tensors(obj).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- linear / feedforward / layer norm ----------------------------------

@dataclass
class Linear:
    w: Tensor
    b: Tensor


def init_linear(d_in: int, d_out: int, rng, dtype=np.float32) -> Linear:
    return Linear(w=xavier_uniform((d_in, d_out), rng, dtype=dtype), b=zeros_param((d_out,), dtype=dtype))


def linear(x, layer: Linear):
    return T.add(T.matmul(x, layer.w), layer.b)


@dataclass
class FeedForward:
    lift: Linear
    drop: Linear


def init_feedforward(d: int, hidden: int, rng, dtype=np.float32) -> FeedForward:
    return FeedForward(init_linear(d, hidden, rng, dtype), init_linear(hidden, d, rng, dtype))


def feedforward(x, ff: FeedForward):
    return linear(T.tanh(linear(x, ff.lift)), ff.drop)


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor


def init_layernorm(d: int, dtype=np.float32) -> LayerNorm:
    return LayerNorm(gain=ones_param((d,), dtype=dtype), bias=zeros_param((d,), dtype=dtype))


def layernorm(x, ln: LayerNorm, eps: float = 1e-5):
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.tmean(T.square(centered), axis=-1, keepdims=True)
    return T.add(T.mul(T.div(centered, T.sqrt(T.add(var, eps))), ln.gain), ln.bias)


# -- attention -----------------------------------------------------------

@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def init_attention(d: int, rng, dtype=np.float32) -> AttentionParams:
    return AttentionParams(*(xavier_uniform((d, d), rng, dtype=dtype) for _ in range(4)))


def _split_heads(x, heads: int):
    # (..., t, d) -> (..., heads, t, d/heads)
    *lead, t, d = x.shape
    x = T.reshape(x, (*lead, t, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def _merge_heads(x):
    # (..., heads, t, dh) -> (..., t, heads*dh)
    *lead, h, t, dh = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.reshape(T.transpose(x, axes), (*lead, t, h * dh))


def attention(q, k, v, params: AttentionParams, heads: int, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    q: (..., tq, d), k/v: (..., tk, d). `mask`, when given, is an additive
    numpy array broadcastable to the score shape (large negative where a key
    must be ignored). Rows of each head's weight matrix sum to 1.
    """
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    d = q.shape[-1]
    if d % heads != 0:
        raise ParameterError(f"model dim {d} not divisible by heads {heads}")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError("q/k/v feature dimensions disagree")
    qh = _split_heads(T.matmul(q, params.wq), heads)
    kh = _split_heads(T.matmul(k, params.wk), heads)
    vh = _split_heads(T.matmul(v, params.wv), heads)
    scores = T.mul(T.matmul(qh, T.swap_last(kh)), 1.0 / np.sqrt(d // heads))
    if mask is not None:
        scores = T.add(scores, Tensor(mask.astype(scores.dtype)))
    weights = T.softmax(scores, axis=-1)
    ctx = _merge_heads(T.matmul(weights, vh))
    out = T.matmul(ctx, params.wo)
    if return_weights:
        return out, weights.data
    return out


# -- GRU -----------------------------------------------------------------

@dataclass
class GruParams:
    wz: Tensor
    wr: Tensor
    wh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor


def init_gru(d_in: int, d_hidden: int, rng, dtype=np.float32) -> GruParams:
    return GruParams(
        wz=xavier_uniform((d_in + d_hidden, d_hidden), rng, dtype=dtype),
        wr=xavier_uniform((d_in + d_hidden, d_hidden), rng, dtype=dtype),
        wh=xavier_uniform((d_in + d_hidden, d_hidden), rng, dtype=dtype),
        bz=zeros_param((d_hidden,), dtype=dtype),
        br=zeros_param((d_hidden,), dtype=dtype),
        bh=zeros_param((d_hidden,), dtype=dtype),
    )


def gru_step(x, h, params: GruParams):
    """h' = (1-z) * h + z * tanh(Wh [x, r*h] + bh); accepts 1-D or batched 2-D."""
    x, h = T._as_tensor(x), T._as_tensor(h)
    single = x.ndim == 1
    if single:
        x = T.reshape(x, (1, x.shape[0]))
        h = T.reshape(h, (1, h.shape[0]))
    if x.shape[0] != h.shape[0]:
        raise DimensionError(f"batch mismatch: x {x.shape} vs h {h.shape}")
    if x.shape[1] + h.shape[1] != params.wz.shape[0]:
        raise DimensionError(
            f"gru params expect input {params.wz.shape[0]}, got {x.shape[1]}+{h.shape[1]}")
    xh = T.concat([x, h], axis=1)
    z = T.sigmoid(T.add(T.matmul(xh, params.wz), params.bz))
    r = T.sigmoid(T.add(T.matmul(xh, params.wr), params.br))
    xrh = T.concat([x, T.mul(r, h)], axis=1)
    h_cand = T.tanh(T.add(T.matmul(xrh, params.wh), params.bh))
    out = T.add(T.mul(T.sub(1.0, z), h), T.mul(z, h_cand))
    if single:
        out = T.reshape(out, (out.shape[1],))
    return out


# -- transformer layer ----------------------------------------------------

@dataclass
class TransformerLayer:
    attn: AttentionParams
    ln1: LayerNorm
    ff: FeedForward
    ln2: LayerNorm


def init_transformer_layer(d: int, ff_hidden: int, rng, dtype=np.float32) -> TransformerLayer:
    return TransformerLayer(
        attn=init_attention(d, rng, dtype=dtype),
        ln1=init_layernorm(d, dtype=dtype),
        ff=init_feedforward(d, ff_hidden, rng, dtype=dtype),
        ln2=init_layernorm(d, dtype=dtype),
    )


def transformer_layer(x, layer: TransformerLayer, heads: int, mask: np.ndarray | None = None):
    """Pre-norm self-attention block with residuals."""
    normed = layernorm(x, layer.ln1)
    x = T.add(x, attention(normed, normed, normed, layer.attn, heads, mask=mask))
    return T.add(x, feedforward(layernorm(x, layer.ln2), layer.ff))
