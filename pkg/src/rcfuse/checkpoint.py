"""Binary checkpoints of toy-model parameter trees.

Layout (little-endian)::

    magic      6 bytes  b"RBNV1\\n"
    header_len uint32
    header     JSON: {"mode", "dims", "config_hash", "leaves": [{"name", "shape"}...]}
    payload    float64 values of every leaf, in header order
    digest     32 bytes SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelDims, ToyParams, init_params, mode_of
from .numerics import tree_items
from .rcs_bev import BEVGrid

MAGIC = b"RBNV1\n"


class CheckpointError(ValueError):
    pass


def dumps(params: ToyParams, dims: ModelDims, grid: BEVGrid, config_hash: str = "") -> bytes:
    leaves = list(tree_items(params))
    header = {"mode": mode_of(params), "dims": asdict(dims), "config_hash": config_hash,
              "grid": [grid.height, grid.width, grid.resolution, list(grid.origin)],
              "leaves": [{"name": n, "shape": list(a.shape)} for n, a in leaves]}
    hb = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in leaves)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[ToyParams, ModelDims, BEVGrid, dict]:
    if len(data) < len(MAGIC) + 4 + 32 or not data.startswith(MAGIC):
        raise CheckpointError("not an RBNV1 checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (file corrupted)")
    (hlen,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    off = len(MAGIC) + 4
    header = json.loads(body[off:off + hlen])
    off += hlen
    d = header["dims"]
    d["point_widths"] = tuple(d["point_widths"])
    dims = ModelDims(**d)
    h, w, res, origin = header["grid"]
    grid = BEVGrid(h, w, res, tuple(origin))
    params = init_params(np.random.default_rng(0), dims, header["mode"], grid)
    leaves = list(tree_items(params))
    if [n for n, _ in leaves] != [l["name"] for l in header["leaves"]]:
        raise CheckpointError("checkpoint layout does not match the model structure")
    for (name, arr), meta in zip(leaves, header["leaves"]):
        if list(arr.shape) != meta["shape"]:
            raise CheckpointError(f"shape mismatch for {name}")
        n = arr.size * 8
        arr[...] = np.frombuffer(body[off:off + n], dtype="<f8").reshape(arr.shape)
        off += n
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return params, dims, grid, header


def save(path: str | Path, params: ToyParams, dims: ModelDims, grid: BEVGrid, config_hash: str = "") -> None:
    Path(path).write_bytes(dumps(params, dims, grid, config_hash))


def load(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"missing checkpoint {p}")
    return loads(p.read_bytes())
