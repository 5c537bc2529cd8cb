"""Sparse query fusion: camera object queries meet radar BEV features sampled at their positions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttnParams, attention, attention_backward
from .camf import DeformAttnParams, deform_cross_attn, deform_cross_attn_backward
from .numerics import (DimensionError, LinearParams, bilinear_sample, bilinear_sample_backward,
                       linear, linear_backward, mlp, mlp_backward)
from .rcs_bev import BEVGrid, world_to_pixel

N_OCTAVES = 10
PE_EXTENT = 64.0  # meters; lowest frequency spans one period over this length


@dataclass
class SparseQuerySet:
    features: np.ndarray  # M x C_q
    positions: np.ndarray  # M x 3, meters

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.features) < 1 or len(self.features) != len(self.positions):
            raise DimensionError("need at least one query with one position each")
        if not np.isfinite(self.positions).all():
            raise ValueError("query positions must be finite")

    def __len__(self):
        return len(self.features)

    def to_jsonl(self, path: str | Path | None = None) -> str:
        text = "".join(json.dumps({"pos": p.tolist(), "feat": f.tolist()}) + "\n"
                       for p, f in zip(self.positions, self.features))
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_jsonl(cls, source: str | Path) -> "SparseQuerySet":
        text = Path(source).read_text() if isinstance(source, Path) else source
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(np.array([r["feat"] for r in rows]), np.array([r["pos"] for r in rows]))


# --- sampling and splatting -------------------------------------------------


def project_and_sample(positions: np.ndarray, F_r: BEVGrid) -> np.ndarray:
    """Bilinear radar feature at each query's BEV location (``M x C_r``); zero outside the grid."""
    return bilinear_sample(F_r.data, world_to_pixel(positions, F_r))


def project_and_sample_backward(dout: np.ndarray, positions: np.ndarray, F_r: BEVGrid) -> np.ndarray:
    return bilinear_sample_backward(dout, F_r.data, world_to_pixel(positions, F_r))[0]


def splat_to_bev(features: np.ndarray, positions: np.ndarray, grid: BEVGrid) -> np.ndarray:
    """Bilinear splatting of per-query features into a ``C x H x W`` raster (adjoint of sampling)."""
    zeros = np.zeros((features.shape[1],) + grid.shape)
    return bilinear_sample_backward(features, zeros, world_to_pixel(positions, grid))[0]


def splat_to_bev_backward(dF: np.ndarray, positions: np.ndarray, grid: BEVGrid) -> np.ndarray:
    return bilinear_sample(dF, world_to_pixel(positions, grid))


# --- positional encoding ----------------------------------------------------


def sine_encoding(positions: np.ndarray, octaves: int = N_OCTAVES, extent: float = PE_EXTENT) -> np.ndarray:
    """``M x (3 * octaves * 2)``: per axis and octave ``k``, ``sin`` then ``cos`` of ``pi 2^k x / extent``."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    freqs = np.pi * 2.0 ** np.arange(octaves) / extent
    ang = pos[:, :, None] * freqs[None, None, :]  # M, 3, octaves
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(pos), -1)


def positional_embed(positions: np.ndarray, layers: list[LinearParams]):
    """Sine encoding followed by an MLP. Returns ``(M x C, cache)``."""
    return mlp(sine_encoding(positions), layers)


# --- alignment and fusion ---------------------------------------------------


@dataclass
class SparseAlignParams:
    deform: DeformAttnParams  # camera queries over the dense radar raster
    cross: AttnParams  # sparse radar features over the camera queries

    @classmethod
    def init(cls, rng, c_q: int, c_r: int, heads: int = 4, points: int = 4, head_dim: int | None = None):
        d_model = heads * (head_dim or max(1, c_r // heads))
        return cls(DeformAttnParams.init(rng, c_q, c_r, c_q, heads, points, head_dim),
                   AttnParams.init(rng, c_r, c_q, d_model, c_r, heads))


def sparse_align(q: np.ndarray, ref: np.ndarray, r: np.ndarray, F_r: np.ndarray, p: SparseAlignParams):
    """``q + DeformAttn(q, ref, F_r)`` and ``r + CrossAttn(r, q)``, both from the unaligned inputs.

    ``ref`` holds the queries' continuous pixel coordinates. Returns ``(q', r', cache)``.
    """
    if len(q) != len(r) or len(q) != len(ref):
        raise DimensionError("query, reference and radar rows must match")
    uq, cd = deform_cross_attn(q, ref, F_r, p.deform)
    ur, ca = attention(r, q, p.cross)
    return q + uq, r + ur, (cd, ca)


def sparse_align_backward(dq_out, dr_out, cache, p: SparseAlignParams):
    """Returns ``(dq, dr, dF_r, grads)``."""
    cd, ca = cache
    dq_d, _, dF, gd = deform_cross_attn_backward(dq_out, cd, p.deform)
    dr_a, dq_a, gc, _ = attention_backward(dr_out, ca, p.cross)
    return dq_out + dq_d + dq_a, dr_out + dr_a, dF, SparseAlignParams(gd, gc)


def linear_fuse(q: np.ndarray, r: np.ndarray, p: LinearParams) -> np.ndarray:
    """One linear layer over the per-row concatenation ``[q, r]``; no activation."""
    if len(q) != len(r):
        raise DimensionError("row counts differ")
    return linear(np.concatenate([q, r], axis=1), p)


def linear_fuse_backward(dy, q, r, p: LinearParams):
    dx, g = linear_backward(dy, np.concatenate([q, r], axis=1), p)
    return dx[:, :q.shape[1]], dx[:, q.shape[1]:], g


# --- one fusion layer and the decoder stack ---------------------------------


@dataclass
class SparseFusionLayerParams:
    pe_q: list[LinearParams]
    pe_r: list[LinearParams]
    align: SparseAlignParams
    fuse: LinearParams

    @classmethod
    def init(cls, rng, c_q: int, c_r: int, heads: int = 4, points: int = 4, pe_hidden: int | None = None):
        enc = 3 * N_OCTAVES * 2
        hid = pe_hidden or c_q

        def pe(c):
            return [LinearParams.init(rng, enc, hid), LinearParams.init(rng, hid, c)]

        return cls(pe(c_q), pe(c_r), SparseAlignParams.init(rng, c_q, c_r, heads, points),
                   LinearParams.init(rng, c_q + c_r, c_q))


def sparse_fusion_layer(q: np.ndarray, positions: np.ndarray, F_r: BEVGrid, p: SparseFusionLayerParams):
    """Sample, positionally embed, align and fuse. Returns ``(fused M x C_q, cache)``."""
    r = project_and_sample(positions, F_r)
    eq, cq = positional_embed(positions, p.pe_q)
    er, cr = positional_embed(positions, p.pe_r)
    ref = world_to_pixel(positions, F_r)
    qa, ra, calign = sparse_align(q + eq, ref, r + er, F_r.data, p.align)
    return linear_fuse(qa, ra, p.fuse), (positions, F_r, cq, cr, calign, qa, ra)


def sparse_fusion_layer_backward(dy, cache, p: SparseFusionLayerParams):
    """Returns ``(dq, dF_r, grads)``."""
    positions, F_r, cq, cr, calign, qa, ra = cache
    dqa, dra, gfuse = linear_fuse_backward(dy, qa, ra, p.fuse)
    dq, dr, dF, galign = sparse_align_backward(dqa, dra, calign, p.align)
    _, gq = mlp_backward(dq, cq, p.pe_q)
    _, gr = mlp_backward(dr, cr, p.pe_r)
    dF = dF + project_and_sample_backward(dr, positions, F_r)
    return dq, dF, SparseFusionLayerParams(gq, gr, galign, gfuse)


def sparse_decoder(queries: SparseQuerySet, F_r: BEVGrid, layers: list[SparseFusionLayerParams]):
    """Stack of fusion layers; returns ``(M x C_q, caches)``."""
    q = queries.features
    caches = []
    for lp in layers:
        q, c = sparse_fusion_layer(q, queries.positions, F_r, lp)
        caches.append(c)
    return q, caches


def sparse_decoder_backward(dy, caches, layers: list[SparseFusionLayerParams]):
    """Returns ``(dquery_features, dF_r, grads)``."""
    grads = [None] * len(layers)
    dF = None
    for i in range(len(layers) - 1, -1, -1):
        dy, dFi, grads[i] = sparse_fusion_layer_backward(dy, caches[i], layers[i])
        dF = dFi if dF is None else dF + dFi
    return dy, dF, grads
