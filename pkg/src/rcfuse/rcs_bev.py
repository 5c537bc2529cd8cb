"""RCS-aware scattering of per-point radar features into a BEV raster."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (CBRParams, DimensionError, LinearParams, cbr, cbr_backward, mlp,
                       mlp_backward)
from .radar import RadarPoint, RadarPointCloud


@dataclass
class BEVGrid:
    """Metric raster; pixel (row i, col j) is centred at ``origin + (j, i) * resolution``."""
    height: int = 128
    width: int = 128
    resolution: float = 0.8
    origin: tuple[float, float] = (-50.8, -50.8)
    data: np.ndarray | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionError("grid needs at least one pixel per side")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if self.data is not None:
            self.data = np.asarray(self.data, dtype=np.float64)
            if self.data.ndim != 3 or self.data.shape[1:] != (self.height, self.width):
                raise DimensionError(f"data {self.data.shape} does not fit {self.height}x{self.width}")

    @classmethod
    def centered(cls, size: int, extent: float, data=None) -> "BEVGrid":
        """Square grid covering ``[-extent, extent]`` on both axes."""
        res = 2.0 * extent / size
        o = -extent + res / 2.0
        return cls(size, size, res, (o, o), data)

    @property
    def channels(self) -> int:
        return 0 if self.data is None else self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def geometry(self) -> "BEVGrid":
        return BEVGrid(self.height, self.width, self.resolution, self.origin)

    def with_data(self, data) -> "BEVGrid":
        return BEVGrid(self.height, self.width, self.resolution, self.origin, data)

    def pixel_centers(self) -> np.ndarray:
        """``H x W x 2`` world xy of every pixel centre."""
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([self.origin[0] + j * self.resolution, self.origin[1] + i * self.resolution], -1)


def world_to_pixel(c, grid: BEVGrid) -> np.ndarray:
    """World xy (meters) to continuous ``(px, py)``: column from x, row from y."""
    c = np.asarray(c, dtype=np.float64)
    return (c[..., :2] - np.asarray(grid.origin)) / grid.resolution


def pixel_to_world(p, grid: BEVGrid) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p * grid.resolution + np.asarray(grid.origin)


@dataclass(frozen=True)
class ScatterSettings:
    # default puts a 50 m point with V_RCS = 1 at a 3 px radius
    k_norm: float = 3.0 / 2500.0
    r_max: float = 8.0


@dataclass
class ScatterFootprint:
    index: int
    pixels: np.ndarray  # (K, 2) int rows/cols, row-major order
    weights: np.ndarray  # (K,) Gaussian weight-map values

    def __len__(self):
        return len(self.pixels)


def scatter_radius(x: float, y: float, rcs: float, settings: ScatterSettings = ScatterSettings()) -> float:
    """Pixel radius ``clamp((x^2 + y^2) * max(rcs, 0) * k_norm, 0, r_max)``."""
    return float(min(max((x * x + y * y) * max(rcs, 0.0) * settings.k_norm, 0.0), settings.r_max))


def gaussian_weight(d2, x: float, y: float, rcs: float, settings: ScatterSettings = ScatterSettings()):
    """Weight at squared pixel distance ``d2`` from the point's own pixel.

    ``exp(-d2 / (r / 3))`` with ``r`` the scatter radius; a zero radius (point
    at the ego origin or non-positive RCS) gives a delta: 1 at ``d2 == 0``.
    """
    r = scatter_radius(x, y, rcs, settings)
    d2 = np.asarray(d2, dtype=np.float64)
    if r <= 0.0:
        return (d2 == 0).astype(np.float64)
    return np.exp(-d2 / (r / 3.0))


def own_pixel(point: RadarPoint, grid: BEVGrid) -> tuple[int, int]:
    px, py = world_to_pixel([point.x, point.y], grid)
    return int(np.floor(py + 0.5)), int(np.floor(px + 0.5))


def rcs_footprint(point: RadarPoint, grid: BEVGrid, settings: ScatterSettings = ScatterSettings(),
                  index: int = 0) -> ScatterFootprint:
    """Pixels within Euclidean pixel distance ``< r`` of the point's own pixel, clipped to the grid."""
    r = scatter_radius(point.x, point.y, point.rcs, settings)
    ri, rj = own_pixel(point, grid)
    ext = int(np.ceil(r))
    pix, d2s = [], []
    for i in range(ri - ext, ri + ext + 1):
        for j in range(rj - ext, rj + ext + 1):
            if not (0 <= i < grid.height and 0 <= j < grid.width):
                continue
            d2 = (i - ri) ** 2 + (j - rj) ** 2
            if d2 == 0 or d2 < r * r:
                pix.append((i, j))
                d2s.append(d2)
    w = gaussian_weight(np.array(d2s, dtype=np.float64), point.x, point.y, point.rcs, settings)
    return ScatterFootprint(index, np.array(pix, dtype=np.int64).reshape(-1, 2), w)


@dataclass
class FootprintTable:
    """All footprints of a cloud flattened, ordered by point then row-major pixel."""
    point: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    n_points: int

    def counts(self) -> np.ndarray:
        return np.bincount(self.point, minlength=self.n_points)


def footprint_table(pc: RadarPointCloud, grid: BEVGrid, settings: ScatterSettings = ScatterSettings()) -> FootprintTable:
    """Vectorised footprints for a whole cloud via a shared offset stencil."""
    n = len(pc)
    if n == 0:
        e = np.zeros(0, dtype=np.int64)
        return FootprintTable(e, e, e, np.zeros(0), 0)
    x, y = pc.xyz[:, 0], pc.xyz[:, 1]
    r = np.clip((x * x + y * y) * np.maximum(pc.rcs, 0.0) * settings.k_norm, 0.0, settings.r_max)
    p = world_to_pixel(pc.xyz[:, :2], grid)
    ri = np.floor(p[:, 1] + 0.5).astype(np.int64)
    rj = np.floor(p[:, 0] + 0.5).astype(np.int64)
    ext = int(np.ceil(r.max()))
    di, dj = np.meshgrid(np.arange(-ext, ext + 1), np.arange(-ext, ext + 1), indexing="ij")
    di, dj = di.ravel(), dj.ravel()
    d2 = (di * di + dj * dj).astype(np.float64)
    rows = ri[:, None] + di[None, :]
    cols = rj[:, None] + dj[None, :]
    keep = ((d2[None, :] == 0) | (d2[None, :] < (r * r)[:, None]))
    keep &= (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
    pt = np.broadcast_to(np.arange(n)[:, None], keep.shape)[keep]
    dd = np.broadcast_to(d2[None, :], keep.shape)[keep]
    rr = np.broadcast_to(r[:, None], keep.shape)[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(rr > 0, np.exp(-dd / np.where(rr > 0, rr / 3.0, 1.0)), (dd == 0).astype(np.float64))
    return FootprintTable(pt, rows[keep], cols[keep], w, n)


def footprints_to_table(footprints: list[ScatterFootprint], n_points: int) -> FootprintTable:
    pt = np.concatenate([np.full(len(f), f.index, dtype=np.int64) for f in footprints] or [np.zeros(0, np.int64)])
    pix = np.concatenate([f.pixels for f in footprints] or [np.zeros((0, 2), np.int64)])
    w = np.concatenate([f.weights for f in footprints] or [np.zeros(0)])
    return FootprintTable(pt, pix[:, 0], pix[:, 1], w, n_points)


def gaussian_bev_map(point: RadarPoint, grid: BEVGrid, settings: ScatterSettings = ScatterSettings()) -> np.ndarray:
    """Per-point ``H x W`` Gaussian weight map, zero outside the footprint."""
    fp = rcs_footprint(point, grid, settings)
    g = np.zeros(grid.shape)
    g[fp.pixels[:, 0], fp.pixels[:, 1]] = fp.weights
    return g


def scatter_sum(features: np.ndarray, table: FootprintTable, shape: tuple[int, int]) -> np.ndarray:
    """Copy each point's feature to every pixel of its footprint, summing collisions."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != table.n_points:
        raise DimensionError(f"{features.shape[0]} feature rows for {table.n_points} footprints")
    out = np.zeros((features.shape[1],) + tuple(shape))
    if len(table.point):
        np.add.at(out, (slice(None), table.rows, table.cols), features[table.point].T)
    return out


def scatter_sum_backward(dout: np.ndarray, table: FootprintTable) -> np.ndarray:
    df = np.zeros((table.n_points, dout.shape[0]))
    if len(table.point):
        np.add.at(df, table.point, dout[:, table.rows, table.cols].T)
    return df


def scatter_sum_naive(features: np.ndarray, footprints: list[ScatterFootprint], shape: tuple[int, int]) -> np.ndarray:
    """Reference per-point, per-pixel loop."""
    out = np.zeros((features.shape[1],) + tuple(shape))
    for fp in footprints:
        for (i, j) in fp.pixels:
            for c in range(features.shape[1]):
                out[c, i, j] += features[fp.index, c]
    return out


def merge_gaussian_maps(maps: list[np.ndarray], shape: tuple[int, int] | None = None) -> np.ndarray:
    if not maps:
        return np.zeros(shape if shape is not None else (0, 0))
    return np.max(np.stack(maps), axis=0)


def gaussian_max_map(table: FootprintTable, shape: tuple[int, int]) -> np.ndarray:
    """Pixelwise maximum of all per-point Gaussian maps, straight from the footprint table."""
    g = np.zeros(shape)
    if len(table.point):
        np.maximum.at(g, (table.rows, table.cols), table.weights)
    return g


def fuse_rcs(f_rcs: np.ndarray, g_rcs: np.ndarray, layers: list[LinearParams]):
    """Per-pixel MLP over ``concat(f_RCS, G_RCS)``. Returns ``(C' x H x W, cache)``."""
    c, h, w = f_rcs.shape
    x = np.concatenate([f_rcs, g_rcs[None]], axis=0).reshape(c + 1, h * w).T
    y, cache = mlp(x, layers)
    return y.T.reshape(-1, h, w), (cache, c, h, w)


def fuse_rcs_backward(dy, cache, layers):
    mcache, c, h, w = cache
    dx, grads = mlp_backward(dy.reshape(dy.shape[0], h * w).T, mcache, layers)
    return dx.T.reshape(c + 1, h, w)[:c], grads


def bev_encode(f_rcs_fused: np.ndarray, base_bev: np.ndarray, blocks: list[CBRParams], counter=None):
    """Concatenate with the plain scattered BEV and run a stride-1 CBR stack."""
    if f_rcs_fused.shape[1:] != base_bev.shape[1:]:
        raise DimensionError(f"spatial mismatch {f_rcs_fused.shape} vs {base_bev.shape}")
    x = np.concatenate([f_rcs_fused, base_bev], axis=0)
    caches = []
    for b in blocks:
        x, cc = cbr(x, b, counter)
        caches.append(cc)
    return x, (caches, f_rcs_fused.shape[0])


def bev_encode_backward(dy, cache, blocks):
    caches, c1 = cache
    grads = [None] * len(blocks)
    d = dy
    for i in range(len(blocks) - 1, -1, -1):
        d, grads[i] = cbr_backward(d, caches[i], blocks[i])
    return d[:c1], d[c1:], grads


@dataclass
class RCSEncoderParams:
    fuse: list[LinearParams]
    encoder: list[CBRParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng, c_point: int, c_fused: int, c_out: int, n_blocks: int = 2, hidden: int | None = None):
        hidden = hidden or c_fused
        fuse = [LinearParams.init(rng, c_point + 1, hidden), LinearParams.init(rng, hidden, c_fused)]
        enc = [CBRParams.init(rng, c_fused + c_point, c_out)]
        enc += [CBRParams.init(rng, c_out, c_out) for _ in range(n_blocks - 1)]
        return cls(fuse, enc)


def rcs_bev_forward(features: np.ndarray, pc: RadarPointCloud, grid: BEVGrid, params: RCSEncoderParams,
                    settings: ScatterSettings = ScatterSettings()):
    """Per-point features to radar BEV ``F_r``. Returns ``(F_r, cache)``."""
    shape = grid.shape
    table = footprint_table(pc, grid, settings)
    own = footprint_table(pc, grid, ScatterSettings(k_norm=0.0, r_max=0.0))
    f_rcs = scatter_sum(features, table, shape)
    g_rcs = gaussian_max_map(table, shape)
    fused, fcache = fuse_rcs(f_rcs, g_rcs, params.fuse)
    base = scatter_sum(features, own, shape)
    out, ecache = bev_encode(fused, base, params.encoder)
    return out, (table, own, fcache, ecache, g_rcs)


def rcs_bev_backward(dy, cache, params: RCSEncoderParams):
    table, own, fcache, ecache, _ = cache
    dfused, dbase, genc = bev_encode_backward(dy, ecache, params.encoder)
    df_rcs, gfuse = fuse_rcs_backward(dfused, fcache, params.fuse)
    dfeat = scatter_sum_backward(df_rcs, table) + scatter_sum_backward(dbase, own)
    return dfeat, RCSEncoderParams(gfuse, genc)
