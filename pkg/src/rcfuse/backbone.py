"""Dual-stream radar backbone: PointNet-style blocks, distance-modulated transformer blocks,
and the injection/extraction exchange between the two streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnParams, attention, attention_backward
from .numerics import (DimensionError, LinearParams, layer_norm, layer_norm_backward, linear,
                       linear_backward, mlp, mlp_backward, tree_add_, tree_zeros)


@dataclass
class LNParams:
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def init(cls, n):
        return cls(np.ones(n), np.zeros(n))


def _ln(x, p: LNParams):
    return layer_norm(x, p.scale, p.shift)


def _ln_back(dy, cache, p: LNParams):
    dx, ds, db = layer_norm_backward(dy, cache, p.scale)
    return dx, LNParams(ds, db)


@dataclass
class DMSAParams:
    attn: AttnParams
    beta_raw: np.ndarray  # per head; the penalty coefficient is beta_raw ** 2

    @property
    def beta(self) -> np.ndarray:
        return self.beta_raw ** 2

    @property
    def heads(self) -> int:
        return self.attn.heads

    @classmethod
    def init(cls, rng, width: int, heads: int, beta: float = 1.0):
        return cls(AttnParams.init(rng, width, width, width, width, heads), np.full(heads, np.sqrt(beta)))


@dataclass
class TransformerBlockParams:
    ln1: LNParams
    dmsa: DMSAParams
    ln2: LNParams
    ffn: list[LinearParams]

    @classmethod
    def init(cls, rng, width, heads, hidden, beta=1.0):
        return cls(LNParams.init(width), DMSAParams.init(rng, width, heads, beta), LNParams.init(width),
                   [LinearParams.init(rng, width, hidden), LinearParams.init(rng, hidden, width)])


@dataclass
class InjectExtractParams:
    gamma: np.ndarray  # shape (1,)
    inj_ln_p: LNParams
    inj_ln_t: LNParams
    inj_attn: AttnParams
    ext_ln_t: LNParams
    ext_ln_p: LNParams
    ext_attn: AttnParams
    ffn: list[LinearParams]

    @classmethod
    def init(cls, rng, c_p, c_t, heads, hidden, gamma=0.1):
        return cls(np.array([gamma]), LNParams.init(c_p), LNParams.init(c_t),
                   AttnParams.init(rng, c_p, c_t, c_t, c_p, heads), LNParams.init(c_t), LNParams.init(c_p),
                   AttnParams.init(rng, c_t, c_p, c_t, c_t, heads),
                   [LinearParams.init(rng, c_t, hidden), LinearParams.init(rng, hidden, c_t)])


@dataclass
class StageParams:
    point: list[LinearParams]
    transformer: TransformerBlockParams
    exchange: InjectExtractParams


@dataclass
class BackboneParams:
    embed: LinearParams
    stages: list[StageParams]

    @property
    def out_dim(self) -> int:
        return 2 * self.stages[-1].point[-1].out_dim + self.embed.out_dim

    @classmethod
    def init(cls, rng, in_dim: int = 7, point_widths=(32, 64, 128), width: int = 128, heads: int = 4,
             cross_heads: int = 4, ffn_hidden: int | None = None, beta: float = 1.0, gamma: float = 0.1):
        hidden = ffn_hidden or 2 * width
        stages = []
        c_in = in_dim
        for w in point_widths:
            point = [LinearParams.init(rng, c_in, w), LinearParams.init(rng, w, w)]
            stages.append(StageParams(point, TransformerBlockParams.init(rng, width, heads, hidden, beta),
                                      InjectExtractParams.init(rng, 2 * w, width, cross_heads, hidden, gamma)))
            c_in = 2 * w
        return cls(LinearParams.init(rng, in_dim, width), stages)


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


# --- point stream -----------------------------------------------------------


def point_block(f: np.ndarray, layers: list[LinearParams]):
    """``concat[MLP(f), maxpool_over_points(MLP(f))]``. Returns ``(out, cache)``."""
    width = layers[-1].out_dim
    if len(f) == 0:
        return np.zeros((0, 2 * width)), None
    h, mcache = mlp(f, layers)
    arg = np.argmax(h, axis=0)
    pooled = h[arg, np.arange(width)]
    out = np.concatenate([h, np.broadcast_to(pooled, h.shape)], axis=1)
    return out, (mcache, arg, width)


def point_block_backward(dout, cache, layers):
    mcache, arg, width = cache
    dh = dout[:, :width].copy()
    np.add.at(dh, (arg, np.arange(width)), dout[:, width:].sum(axis=0))
    return mlp_backward(dh, mcache, layers)


# --- transformer stream -----------------------------------------------------


def dmsa(f_t: np.ndarray, D: np.ndarray, p: DMSAParams, counter=None):
    """Multi-head self-attention with logits penalised by ``beta_h * D^2``. Returns ``(y, cache)``."""
    n = f_t.shape[0]
    if D.shape != (n, n):
        raise DimensionError(f"distance matrix {D.shape} does not match {n} points")
    D2 = D * D
    bias = -p.beta[:, None, None] * D2[None]
    y, acache = attention(f_t, f_t, p.attn, bias, counter)
    return y, (acache, D2)


def dmsa_backward(dy, cache, p: DMSAParams):
    acache, D2 = cache
    dxq, dxkv, gattn, dbias = attention_backward(dy, acache, p.attn)
    dbeta = -(dbias * D2[None]).sum(axis=(1, 2))
    return dxq + dxkv, DMSAParams(gattn, 2.0 * p.beta_raw * dbeta)


def dmsa_attention_matrices(f_t, D, p: DMSAParams) -> np.ndarray:
    return dmsa(f_t, D, p)[1][0][5]


def transformer_block(f_t, D, p: TransformerBlockParams):
    a, c1 = _ln(f_t, p.ln1)
    u, c2 = dmsa(a, D, p.dmsa)
    x1 = f_t + u
    b, c3 = _ln(x1, p.ln2)
    v, c4 = mlp(b, p.ffn)
    return x1 + v, (c1, c2, c3, c4)


def transformer_block_backward(dy, cache, p: TransformerBlockParams):
    c1, c2, c3, c4 = cache
    db, gffn = mlp_backward(dy, c4, p.ffn)
    dx1, gln2 = _ln_back(db, c3, p.ln2)
    dx1 = dx1 + dy
    da, gdmsa = dmsa_backward(dx1, c2, p.dmsa)
    dft, gln1 = _ln_back(da, c1, p.ln1)
    return dft + dx1, TransformerBlockParams(gln1, gdmsa, gln2, gffn)


# --- exchange ---------------------------------------------------------------


def injection(f_p, f_t, p: InjectExtractParams):
    """``f_p + gamma * CrossAttention(LN(f_p), LN(f_t))``. Returns ``(f_p', cache)``."""
    if len(f_p) != len(f_t):
        raise DimensionError("point and transformer streams must have equal row counts")
    lp, c1 = _ln(f_p, p.inj_ln_p)
    lt, c2 = _ln(f_t, p.inj_ln_t)
    ca, c3 = attention(lp, lt, p.inj_attn)
    return f_p + p.gamma[0] * ca, (c1, c2, c3, ca)


def injection_backward(dy, cache, p: InjectExtractParams):
    """Returns ``(df_p, df_t, grads)``; grads only populate the injection-side fields."""
    c1, c2, c3, ca = cache
    dgamma = np.array([(dy * ca).sum()])
    dlp, dlt, gattn, _ = attention_backward(p.gamma[0] * dy, c3, p.inj_attn)
    dfp, glp = _ln_back(dlp, c1, p.inj_ln_p)
    dft, glt = _ln_back(dlt, c2, p.inj_ln_t)
    g = _zero_exchange(p)
    g.gamma, g.inj_ln_p, g.inj_ln_t, g.inj_attn = dgamma, glp, glt, gattn
    return dfp + dy, dft, g


def extraction(f_t, f_p, p: InjectExtractParams):
    """``FFN(f_t + CrossAttention(LN(f_t), LN(f_p)))``. Returns ``(f_t', cache)``."""
    if len(f_p) != len(f_t):
        raise DimensionError("point and transformer streams must have equal row counts")
    lt, c1 = _ln(f_t, p.ext_ln_t)
    lp, c2 = _ln(f_p, p.ext_ln_p)
    ca, c3 = attention(lt, lp, p.ext_attn)
    y, c4 = mlp(f_t + ca, p.ffn)
    return y, (c1, c2, c3, c4)


def extraction_backward(dy, cache, p: InjectExtractParams):
    """Returns ``(df_t, df_p, grads)``; grads only populate the extraction-side fields."""
    c1, c2, c3, c4 = cache
    du, gffn = mlp_backward(dy, c4, p.ffn)
    dlt, dlp, gattn, _ = attention_backward(du, c3, p.ext_attn)
    dft, glt = _ln_back(dlt, c1, p.ext_ln_t)
    dfp, glp = _ln_back(dlp, c2, p.ext_ln_p)
    g = _zero_exchange(p)
    g.ext_ln_t, g.ext_ln_p, g.ext_attn, g.ffn = glt, glp, gattn, gffn
    return dft + du, dfp, g


def _zero_exchange(p: InjectExtractParams) -> InjectExtractParams:
    return tree_zeros(p)


def _sum_exchange(a: InjectExtractParams, b: InjectExtractParams) -> InjectExtractParams:
    tree_add_(a, b)
    return a


# --- full backbone ----------------------------------------------------------


def dual_stream_forward(features: np.ndarray, coords: np.ndarray, params: BackboneParams):
    """Per-point features ``N x (C_p + C_t)`` from the S-stage dual-stream backbone."""
    n = len(features)
    if n == 0:
        return np.zeros((0, params.out_dim)), None
    D = pairwise_distances(coords)
    f_p = features
    f_t = linear(features, params.embed)
    caches = []
    for st in params.stages:
        f_p, cp = point_block(f_p, st.point)
        f_t, ct = transformer_block(f_t, D, st.transformer)
        f_p, ci = injection(f_p, f_t, st.exchange)
        f_t, ce = extraction(f_t, f_p, st.exchange)
        caches.append((cp, ct, ci, ce))
    c_p = f_p.shape[1]
    return np.concatenate([f_p, f_t], axis=1), (features, caches, c_p)


def dual_stream_backward(dout, cache, params: BackboneParams):
    """Returns ``(dfeatures, grads)``."""
    features, caches, c_p = cache
    dfp = dout[:, :c_p]
    dft = dout[:, c_p:]
    stage_grads = [None] * len(params.stages)
    for s in range(len(params.stages) - 1, -1, -1):
        st = params.stages[s]
        cp, ct, ci, ce = caches[s]
        dft, dfp_e, ge = extraction_backward(dft, ce, st.exchange)
        dfp = dfp + dfp_e
        dfp, dft_i, gi = injection_backward(dfp, ci, st.exchange)
        dft = dft + dft_i
        dft, gt = transformer_block_backward(dft, ct, st.transformer)
        dfp, gp = point_block_backward(dfp, cp, st.point)
        stage_grads[s] = StageParams(gp, gt, _sum_exchange(ge, gi))
    dfeat_t, gembed = linear_backward(dft, features, params.embed)
    return dfp + dfeat_t, BackboneParams(gembed, stage_grads)
