"""Parameter initialisation and the building blocks shared by every model."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, layer_norm, matmul, relu, reshape, softmax, transpose

Params = dict  # name -> Tensor


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_linear(params: Params, name: str, fan_in: int, fan_out: int, rng, bias: bool = True):
    params[f"{name}.w"] = _uniform(rng, (fan_in, fan_out), fan_in)
    if bias:
        params[f"{name}.b"] = _uniform(rng, (fan_out,), fan_in)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    out = matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return out if b is None else out + b


def init_embedding(params: Params, name: str, n: int, dim: int, rng):
    # an embedding is a linear map from a one-hot input, so fan_in = 1
    params[name] = _uniform(rng, (n, dim), 1)


def init_norm(params: Params, name: str, dim: int):
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def norm(params: Params, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_attention(params: Params, name: str, dim: int, rng, kv_dim: int | None = None):
    kv_dim = dim if kv_dim is None else kv_dim
    init_linear(params, f"{name}.q", dim, dim, rng)
    init_linear(params, f"{name}.k", kv_dim, dim, rng)
    init_linear(params, f"{name}.v", kv_dim, dim, rng)
    init_linear(params, f"{name}.o", dim, dim, rng)


def additive_mask(allowed) -> np.ndarray:
    """0 where attention is allowed, -inf elsewhere."""
    allowed = np.asarray(allowed, dtype=bool)
    return np.where(allowed, 0.0, -np.inf)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def multi_head_attention(params: Params, name: str, q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    ``q`` is (B, Lq, D); ``k`` and ``v`` are (B, Lk, Dkv). ``mask`` is a
    boolean array broadcastable to (B, heads, Lq, Lk), True where a query
    may attend to a key.
    """
    B, Lq, D = q.shape
    Lk = k.shape[1]
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    if k.shape[:2] != v.shape[:2] or k.shape[0] != B:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = D // heads

    def split(t, L):
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    Q = split(linear(params, f"{name}.q", q), Lq)
    K = split(linear(params, f"{name}.k", k), Lk)
    V = split(linear(params, f"{name}.v", v), Lk)
    logits = matmul(Q, transpose(K, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        logits = logits + additive_mask(mask)
    attn = softmax(logits, axis=-1)
    out = transpose(matmul(attn, V), (0, 2, 1, 3))
    return linear(params, f"{name}.o", reshape(out, (B, Lq, D)))


def init_ffn(params: Params, name: str, dim: int, hidden: int, rng, out_dim: int | None = None):
    init_linear(params, f"{name}.fc1", dim, hidden, rng)
    init_linear(params, f"{name}.fc2", hidden, dim if out_dim is None else out_dim, rng)


def ffn(params: Params, name: str, x: Tensor) -> Tensor:
    return linear(params, f"{name}.fc2", relu(linear(params, f"{name}.fc1", x)))
