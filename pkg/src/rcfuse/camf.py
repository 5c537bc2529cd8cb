"""Dense cross-attention multi-layer fusion of camera and radar BEV rasters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttnParams, attention
from .numerics import (CBRParams, DimensionError, LinearParams, OpCounter, bilinear_sample,
                       bilinear_sample_backward, cbr, cbr_backward, linear, linear_backward,
                       softmax, softmax_backward)


@dataclass
class DeformAttnParams:
    value: LinearParams  # C_v -> heads * head_dim, applied per pixel of the sampled raster
    output: LinearParams  # heads * head_dim -> C_out
    offset: LinearParams  # C_q -> heads * points * 2 (pixels)
    weight: LinearParams  # C_q -> heads * points logits
    heads: int = 4
    points: int = 4

    @property
    def head_dim(self) -> int:
        return self.value.out_dim // self.heads

    @classmethod
    def init(cls, rng, c_query: int, c_value: int, c_out: int, heads: int = 4, points: int = 4,
             head_dim: int | None = None, out_scale: float | None = None):
        d = head_dim or max(1, c_value // heads)
        offset = LinearParams.zeros(c_query, heads * points * 2)
        offset.bias[:] = ring_offsets(heads, points).ravel()
        return cls(LinearParams.init(rng, c_value, heads * d),
                   LinearParams.init(rng, heads * d, c_out, out_scale),
                   offset, LinearParams.zeros(c_query, heads * points), heads, points)


def ring_offsets(heads: int, points: int) -> np.ndarray:
    """``(heads, points, 2)`` initial offsets: point k sits k pixels out along the head's direction.

    Point 0 of every head samples the reference pixel itself; the others must
    start apart or they receive identical gradients forever.
    """
    ang = 2.0 * np.pi * np.arange(heads) / heads
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return dirs[:, None, :] * np.arange(points, dtype=np.float64)[None, :, None]


def pixel_refs(h: int, w: int) -> np.ndarray:
    """``(H*W, 2)`` pixel-centre reference points ``(px, py)`` in row-major order."""
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([jj.ravel(), ii.ravel()], axis=1)


def deform_cross_attn(zq: np.ndarray, ref: np.ndarray, F: np.ndarray, p: DeformAttnParams,
                      counter: OpCounter | None = None):
    """Deformable cross-attention of ``Nq`` queries over raster ``F`` (``C_v x H x W``).

    Each head samples ``points`` bilinear locations ``ref + offset(z_q)``,
    weights them by a softmax over the points, and the concatenated heads go
    through the output projection. Returns ``(Nq x C_out, cache)``.
    """
    if F.ndim != 3 or F.shape[0] != p.value.in_dim:
        raise DimensionError(f"value raster {F.shape} does not match {p.value.in_dim} channels")
    if zq.shape[-1] != p.offset.in_dim or len(zq) != len(ref):
        raise DimensionError("query features / reference points mismatch")
    H, K, d = p.heads, p.points, p.head_dim
    cv, hh, ww = F.shape
    nq = len(zq)
    Fflat = F.reshape(cv, -1).T
    vmap = linear(Fflat, p.value, counter).T.reshape(H, d, hh, ww)
    off = linear(zq, p.offset, counter).reshape(nq, H, K, 2)
    A = softmax(linear(zq, p.weight, counter).reshape(nq, H, K), axis=-1)
    loc = ref[:, None, None, :] + off
    samples = np.empty((H, nq, K, d))
    for h in range(H):
        samples[h] = bilinear_sample(vmap[h], loc[:, h].reshape(-1, 2)).reshape(nq, K, d)
    if counter is not None:
        counter.add(H * nq * K * d * 5)  # 4 bilinear taps + attention weighting
    heads_out = np.einsum("qhk,hqkd->qhd", A, samples)
    merged = heads_out.reshape(nq, H * d)
    y = linear(merged, p.output, counter)
    return y, (zq, Fflat, vmap, A, loc, samples, merged, (cv, hh, ww))


def deform_cross_attn_backward(dy, cache, p: DeformAttnParams):
    """Returns ``(dzq, dref, dF, grads)``."""
    zq, Fflat, vmap, A, loc, samples, merged, (cv, hh, ww) = cache
    H, K, d = p.heads, p.points, p.head_dim
    nq = len(zq)
    dmerged, gout = linear_backward(dy, merged, p.output)
    dheads = dmerged.reshape(nq, H, d)
    dA = np.einsum("qhd,hqkd->qhk", dheads, samples)
    dvmap = np.zeros_like(vmap)
    dloc = np.zeros_like(loc)
    for h in range(H):
        ds = A[:, h, :, None] * dheads[:, h, None, :]
        dv, dl = bilinear_sample_backward(ds.reshape(-1, d), vmap[h], loc[:, h].reshape(-1, 2))
        dvmap[h] = dv
        dloc[:, h] = dl.reshape(nq, K, 2)
    dlogits = softmax_backward(dA, A, axis=-1).reshape(nq, H * K)
    dzq_w, gw = linear_backward(dlogits, zq, p.weight)
    dzq_o, goff = linear_backward(dloc.reshape(nq, -1), zq, p.offset)
    dref = dloc.sum(axis=(1, 2))
    dFflat, gval = linear_backward(dvmap.reshape(H * d, -1).T, Fflat, p.value)
    dF = dFflat.T.reshape(cv, hh, ww)
    return dzq_w + dzq_o, dref, dF, DeformAttnParams(gval, gout, goff, gw, p.heads, p.points)


def dense_cross_attn(zq: np.ndarray, F: np.ndarray, p: AttnParams, counter: OpCounter | None = None):
    """Vanilla cross-attention of every query over every pixel of ``F`` (the quadratic baseline)."""
    return attention(zq, F.reshape(F.shape[0], -1).T, p, counter=counter)[0]


# --- bidirectional alignment ------------------------------------------------


@dataclass
class AlignLayerParams:
    pos_c: np.ndarray  # C_c x H x W learnable positional embedding
    pos_r: np.ndarray  # C_r x H x W
    to_c: DeformAttnParams  # radar queries sample the camera raster
    to_r: DeformAttnParams  # camera queries sample the radar raster

    @classmethod
    def init(cls, rng, c_c, c_r, h, w, heads=4, points=4, head_dim=None, pos_scale=0.02):
        return cls(rng.normal(0, pos_scale, (c_c, h, w)), rng.normal(0, pos_scale, (c_r, h, w)),
                   DeformAttnParams.init(rng, c_r, c_c, c_c, heads, points, head_dim),
                   DeformAttnParams.init(rng, c_c, c_r, c_r, heads, points, head_dim))


def camf_align(F_c: np.ndarray, F_r: np.ndarray, layers: list[AlignLayerParams], counter=None):
    """Residual bidirectional deformable alignment; both directions read the same inputs."""
    if F_c.shape[1:] != F_r.shape[1:]:
        raise DimensionError(f"spatial mismatch {F_c.shape} vs {F_r.shape}")
    caches = []
    for lp in layers:
        c_c, h, w = F_c.shape
        c_r = F_r.shape[0]
        refs = pixel_refs(h, w)
        fc_p = F_c + lp.pos_c
        fr_p = F_r + lp.pos_r
        zr = fr_p.reshape(c_r, -1).T
        zc = fc_p.reshape(c_c, -1).T
        uc, cc = deform_cross_attn(zr, refs, fc_p, lp.to_c, counter)
        ur, cr = deform_cross_attn(zc, refs, fr_p, lp.to_r, counter)
        F_c = F_c + uc.T.reshape(c_c, h, w)
        F_r = F_r + ur.T.reshape(c_r, h, w)
        caches.append((cc, cr, c_c, c_r, h, w))
    return F_c, F_r, caches


def camf_align_backward(dFc, dFr, caches, layers: list[AlignLayerParams]):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        lp = layers[i]
        cc, cr, c_c, c_r, h, w = caches[i]
        dzr, _, dfc_p, gc = deform_cross_attn_backward(dFc.reshape(c_c, -1).T, cc, lp.to_c)
        dzc, _, dfr_p, gr = deform_cross_attn_backward(dFr.reshape(c_r, -1).T, cr, lp.to_r)
        dfc_p = dfc_p + dzc.T.reshape(c_c, h, w)
        dfr_p = dfr_p + dzr.T.reshape(c_r, h, w)
        grads[i] = AlignLayerParams(dfc_p, dfr_p, gc, gr)
        dFc = dFc + dfc_p
        dFr = dFr + dfr_p
    return dFc, dFr, grads


# --- channel and spatial fusion --------------------------------------------


@dataclass
class FuseParams:
    first: CBRParams  # C -> C, wrapped in a residual
    rest: list[CBRParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, n_rest: int = 3):
        rest = [CBRParams.init(rng, c_in, c_out)] + [CBRParams.init(rng, c_out, c_out) for _ in range(n_rest - 1)]
        return cls(CBRParams.init(rng, c_in, c_in), rest)


def channel_spatial_fuse(F_c: np.ndarray, F_r: np.ndarray, p: FuseParams, counter=None):
    """``concat -> CBR + residual -> CBR x3``. Returns ``(C_f x H x W, cache)``."""
    if F_c.shape[1:] != F_r.shape[1:]:
        raise DimensionError(f"spatial mismatch {F_c.shape} vs {F_r.shape}")
    x = np.concatenate([F_c, F_r], axis=0)
    y, c0 = cbr(x, p.first, counter)
    x = x + y
    caches = []
    for b in p.rest:
        x, cc = cbr(x, b, counter)
        caches.append(cc)
    return x, (c0, caches, F_c.shape[0])


def channel_spatial_fuse_backward(dy, cache, p: FuseParams):
    c0, caches, c_c = cache
    grads = [None] * len(p.rest)
    d = dy
    for i in range(len(p.rest) - 1, -1, -1):
        d, grads[i] = cbr_backward(d, caches[i], p.rest[i])
    dx0, g0 = cbr_backward(d, c0, p.first)
    d = d + dx0
    return d[:c_c], d[c_c:], FuseParams(g0, grads)
