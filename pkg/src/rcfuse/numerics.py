"""Small float64 tensor toolkit with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every layer is a
pair of functions: a forward that returns its output (and, where the backward
needs intermediates, a cache), and a ``*_backward`` that maps an upstream
gradient to input and parameter gradients.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

import numpy as np

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class OpCounter:
    """Accumulates scalar multiply counts of instrumented ops."""

    def __init__(self):
        self.mults = 0

    def add(self, n: int):
        self.mults += int(n)


def _count(counter: OpCounter | None, n: int):
    if counter is not None:
        counter.add(n)


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"inconsistent linear params: weight {self.weight.shape}, bias {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, scale: float | None = None):
        s = np.sqrt(2.0 / (n_in + n_out)) if scale is None else scale
        return cls(rng.normal(0.0, s, (n_out, n_in)), np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int, n_out: int):
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))

    @classmethod
    def identity(cls, n: int):
        return cls(np.eye(n), np.zeros(n))


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter_errors: list = field(default_factory=list)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


# ---------------------------------------------------------------------------
# parameter trees: dataclasses / dicts / lists whose leaves are ndarrays


def tree_items(tree: Any, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every ndarray leaf in a fixed order."""
    if isinstance(tree, np.ndarray):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            yield from tree_items(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield from tree_items(tree[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            yield from tree_items(v, f"{prefix}.{i}" if prefix else str(i))


def tree_map(fn: Callable[[np.ndarray], np.ndarray], tree: Any) -> Any:
    if isinstance(tree, np.ndarray):
        return fn(tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        return dataclasses.replace(
            tree, **{f.name: tree_map(fn, getattr(tree, f.name)) for f in dataclasses.fields(tree)})
    if isinstance(tree, dict):
        return {k: tree_map(fn, v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [tree_map(fn, v) for v in tree]
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, v) for v in tree)
    return tree


def tree_zeros(tree: Any) -> Any:
    return tree_map(np.zeros_like, tree)


def tree_add_(acc: Any, other: Any) -> None:
    """In-place ``acc += other`` over matching trees."""
    for (na, a), (nb, b) in zip(tree_items(acc), tree_items(other)):
        if na != nb:
            raise DimensionError(f"tree mismatch: {na} vs {nb}")
        a += b


def tree_copy(tree: Any) -> Any:
    return tree_map(np.copy, tree)


# ---------------------------------------------------------------------------
# dense layers


def linear(x: np.ndarray, p: LinearParams, counter: OpCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"linear expects last dim {p.in_dim}, got {x.shape[-1]}")
    _count(counter, x.size * p.out_dim)
    return x @ p.weight.T + p.bias


def linear_backward(dy: np.ndarray, x: np.ndarray, p: LinearParams):
    x2 = x.reshape(-1, p.in_dim)
    dy2 = dy.reshape(-1, p.out_dim)
    dx = (dy2 @ p.weight).reshape(x.shape)
    return dx, LinearParams(dy2.T @ x2, dy2.sum(axis=0))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlp(x: np.ndarray, layers: list[LinearParams]):
    """Linear layers with ReLU in between (none after the last). Returns ``(y, cache)``."""
    if not layers:
        raise ConfigurationError("mlp needs at least one layer")
    inputs, pre = [], []
    h = x
    for i, p in enumerate(layers):
        inputs.append(h)
        z = linear(h, p)
        pre.append(z)
        h = relu(z) if i < len(layers) - 1 else z
    return h, (inputs, pre)


def mlp_backward(dy, cache, layers: list[LinearParams]):
    inputs, pre = cache
    grads = [None] * len(layers)
    d = dy
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1:
            d = relu_backward(d, pre[i])
        d, grads[i] = linear_backward(d, inputs[i], layers[i])
    return d, grads


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = LN_EPS):
    """Normalize over the last axis with population variance. Returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def layer_norm_backward(dy, cache, scale):
    xhat, inv = cache
    n = xhat.shape[-1]
    dxhat = dy * scale
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


# ---------------------------------------------------------------------------
# convolution on C x H x W rasters


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, 3, 3)
    bias: np.ndarray  # (C_out,)

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, scale: float | None = None):
        s = np.sqrt(2.0 / (9 * c_in)) if scale is None else scale
        return cls(rng.normal(0.0, s, (c_out, c_in, 3, 3)), np.zeros(c_out))

    @classmethod
    def identity(cls, c: int):
        w = np.zeros((c, c, 3, 3))
        w[np.arange(c), np.arange(c), 1, 1] = 1.0
        return cls(w, np.zeros(c))


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(C*9, H*W)`` patch matrix, rows ordered (channel, kernel row, kernel col)."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(c * 9, h * w)


def conv3x3(x: np.ndarray, p: ConvParams, counter: OpCounter | None = None) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation, as in deep-learning frameworks)."""
    if x.ndim != 3 or x.shape[0] != p.weight.shape[1]:
        raise DimensionError(f"conv3x3 expects {p.weight.shape[1]} input channels, got {x.shape}")
    c, h, w = x.shape
    co = p.weight.shape[0]
    cols = _im2col(x)
    _count(counter, cols.size * co)
    y = p.weight.reshape(co, -1) @ cols + p.bias[:, None]
    return y.reshape(co, h, w)


def conv3x3_backward(dy: np.ndarray, x: np.ndarray, p: ConvParams):
    c, h, w = x.shape
    co = p.weight.shape[0]
    dy2 = dy.reshape(co, h * w)
    cols = _im2col(x)
    dw = (dy2 @ cols.T).reshape(p.weight.shape)
    db = dy2.sum(axis=1)
    dcols = (p.weight.reshape(co, -1).T @ dy2).reshape(c, 3, 3, h, w)
    dxp = np.zeros((c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w] += dcols[:, i, j]
    return dxp[:, 1:-1, 1:-1], ConvParams(dw, db)


@dataclass
class CBRParams:
    """Conv3x3 -> per-channel affine normalization -> ReLU."""
    conv: ConvParams
    norm_scale: np.ndarray
    norm_shift: np.ndarray

    @classmethod
    def init(cls, rng, c_in, c_out):
        return cls(ConvParams.init(rng, c_in, c_out), np.ones(c_out), np.zeros(c_out))

    @classmethod
    def identity(cls, c):
        return cls(ConvParams.identity(c), np.ones(c), np.zeros(c))


def cbr(x, p: CBRParams, counter: OpCounter | None = None):
    z = conv3x3(x, p.conv, counter)
    a = z * p.norm_scale[:, None, None] + p.norm_shift[:, None, None]
    return relu(a), (x, z, a)


def cbr_backward(dy, cache, p: CBRParams):
    x, z, a = cache
    da = relu_backward(dy, a)
    dscale = (da * z).sum(axis=(1, 2))
    dshift = da.sum(axis=(1, 2))
    dx, dconv = conv3x3_backward(da * p.norm_scale[:, None, None], x, p.conv)
    return dx, CBRParams(dconv, dscale, dshift)


# ---------------------------------------------------------------------------
# bilinear sampling with zero padding


def _bilinear_corners(pts: np.ndarray, h: int, w: int):
    x0 = np.floor(pts[:, 0])
    y0 = np.floor(pts[:, 1])
    fx = pts[:, 0] - x0
    fy = pts[:, 1] - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx_, y0 + dy_
        wx = fx if dx_ else 1.0 - fx
        wy = fy if dy_ else 1.0 - fy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        corners.append((xi, yi, wx, wy, valid, dx_, dy_))
    return corners


def bilinear_sample(F: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a ``C x H x W`` raster at continuous pixel locations.

    ``pts`` is ``(M, 2)`` (or a single ``(2,)``) holding ``(px, py)`` with ``px`` the
    column and ``py`` the row coordinate; integer values hit pixel centers.
    Neighbours outside the raster contribute zero.
    """
    single = np.ndim(pts) == 1
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    c, h, w = F.shape
    out = np.zeros((pts.shape[0], c))
    for xi, yi, wx, wy, valid, _, _ in _bilinear_corners(pts, h, w):
        if valid.any():
            out[valid] += (wx * wy)[valid, None] * F[:, yi[valid], xi[valid]].T
    return out[0] if single else out


def bilinear_sample_backward(dout: np.ndarray, F: np.ndarray, pts: np.ndarray):
    """Gradients of :func:`bilinear_sample` w.r.t. the raster and the sample locations."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    dout = np.atleast_2d(dout)
    c, h, w = F.shape
    dF = np.zeros_like(F)
    dpts = np.zeros_like(pts)
    for xi, yi, wx, wy, valid, dx_, dy_ in _bilinear_corners(pts, h, w):
        if not valid.any():
            continue
        vals = F[:, yi[valid], xi[valid]].T  # M', C
        g = dout[valid]
        flat_idx = yi[valid] * w + xi[valid]
        contrib = g * (wx * wy)[valid, None]
        for ch in range(c):
            dF[ch] += np.bincount(flat_idx, contrib[:, ch], minlength=h * w).reshape(h, w)
        gv = (g * vals).sum(axis=1)
        sx = 1.0 if dx_ else -1.0
        sy = 1.0 if dy_ else -1.0
        dpts[valid, 0] += gv * sx * wy[valid]
        dpts[valid, 1] += gv * sy * wx[valid]
    return dF, dpts


# ---------------------------------------------------------------------------
# verification


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; ``x`` is restored afterwards."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Normwise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps round-off in near-zero gradients (dead ReLUs, unused
    parameters) from reading as a large relative error.
    """
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def grad_check(loss_fn: Callable[[], float], params: Any, grads: Any, eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn`` closes over ``params`` and is re-evaluated after each in-place
    perturbation. With ``max_entries`` only a random subset of entries per leaf
    is probed.
    """
    errors = []
    named_grads = dict(tree_items(grads))
    for name, arr in tree_items(params):
        g = named_grads[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            idx.sort()
        num = np.zeros(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn())
            flat[i] = orig - eps
            fm = float(loss_fn())
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * eps)
        errors.append((name, relative_error(g.reshape(-1)[idx], num)))
    return GradCheckReport(max((e for _, e in errors), default=0.0), errors)
