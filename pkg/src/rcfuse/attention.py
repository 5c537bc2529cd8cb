"""Multi-head (cross-)attention with an optional per-head additive logit bias."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (DimensionError, LinearParams, OpCounter, linear, linear_backward,
                       softmax, softmax_backward)


@dataclass
class AttnParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    heads: int = 1

    @property
    def head_dim(self) -> int:
        return self.q.out_dim // self.heads

    @classmethod
    def init(cls, rng, d_query: int, d_kv: int, d_model: int, d_out: int, heads: int):
        if d_model % heads:
            raise DimensionError(f"model width {d_model} not divisible by {heads} heads")
        return cls(LinearParams.init(rng, d_query, d_model), LinearParams.init(rng, d_kv, d_model),
                   LinearParams.init(rng, d_kv, d_model), LinearParams.init(rng, d_model, d_out), heads)


def _split(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def attention(xq: np.ndarray, xkv: np.ndarray, p: AttnParams, logit_bias: np.ndarray | None = None,
              counter: OpCounter | None = None):
    """``softmax(Q K^T / sqrt(d) + bias) V`` per head, heads concatenated then output-projected.

    ``logit_bias`` broadcasts against ``(heads, Nq, Nk)``. Returns ``(y, cache)``.
    """
    H = p.heads
    q = _split(linear(xq, p.q, counter), H)
    k = _split(linear(xkv, p.k, counter), H)
    v = _split(linear(xkv, p.v, counter), H)
    d = q.shape[-1]
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    if counter is not None:
        counter.add(H * q.shape[1] * k.shape[1] * d * 2)
    if logit_bias is not None:
        logits = logits + logit_bias
    a = softmax(logits, axis=-1)
    heads_out = a @ v
    merged = _merge(heads_out)
    y = linear(merged, p.o, counter)
    return y, (xq, xkv, q, k, v, a, merged)


def attention_backward(dy, cache, p: AttnParams):
    """Returns ``(dxq, dxkv, grads, dlogit_bias)``; ``dlogit_bias`` has shape ``(heads, Nq, Nk)``."""
    xq, xkv, q, k, v, a, merged = cache
    H = p.heads
    d = q.shape[-1]
    dmerged, go = linear_backward(dy, merged, p.o)
    dheads = _split(dmerged, H)
    da = dheads @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ dheads
    dlogits = softmax_backward(da, a, axis=-1)
    dq = dlogits @ k / np.sqrt(d)
    dk = dlogits.transpose(0, 2, 1) @ q / np.sqrt(d)
    dxq, gq = linear_backward(_merge(dq), xq, p.q)
    dxk, gk = linear_backward(_merge(dk), xkv, p.k)
    dxv, gv = linear_backward(_merge(dv), xkv, p.v)
    return dxq, dxk + dxv, AttnParams(gq, gk, gv, go, H), dlogits


def attention_weights(xq, xkv, p: AttnParams, logit_bias=None) -> np.ndarray:
    """The ``(heads, Nq, Nk)`` row-stochastic attention matrices."""
    return attention(xq, xkv, p, logit_bias)[1][5]
