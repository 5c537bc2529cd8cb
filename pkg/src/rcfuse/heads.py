"""Toy perception heads: center-style detection, multi-task BEV segmentation, greedy tracking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (CBRParams, ConvParams, LinearParams, cbr, cbr_backward, conv3x3,
                       conv3x3_backward, linear, linear_backward, sigmoid)
from .rcs_bev import BEVGrid

N_CLASSES = 3
# output channel layout of the dense head
OBJ = slice(0, N_CLASSES)
OFF = slice(3, 5)  # sub-pixel centre offset, pixels (x, y)
LOGSIZE = slice(5, 7)  # log w, log l
YAW = slice(7, 9)  # sin, cos
VEL = slice(9, 11)  # velocity / VEL_SCALE
N_OUT = 11
VEL_SCALE = 5.0
PRIOR_LOGIT = -math.log((1 - 0.01) / 0.01)

SEG_WEIGHTS = (400.0, 80.0, 200.0)  # vehicle, drivable area, lane


@dataclass
class Detection:
    center: tuple[float, float]
    size: tuple[float, float]  # w, l
    yaw: float
    velocity: tuple[float, float]
    cls: int
    score: float

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("size must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")

    @property
    def attribute(self) -> int:
        return int(math.hypot(*self.velocity) > 0.5)


# --- dense center head ------------------------------------------------------


@dataclass
class CenterHeadParams:
    trunk: CBRParams
    out: ConvParams

    @classmethod
    def init(cls, rng, c_in: int, hidden: int):
        out = ConvParams.init(rng, hidden, N_OUT, scale=0.01)
        out.bias[OBJ] = PRIOR_LOGIT
        return cls(CBRParams.init(rng, c_in, hidden), out)


def center_head(F: np.ndarray, p: CenterHeadParams):
    """Raw ``N_OUT x H x W`` prediction maps (objectness as logits). Returns ``(maps, cache)``."""
    h, c1 = cbr(F, p.trunk)
    return conv3x3(h, p.out), (c1, h)


def center_head_backward(dy, cache, p: CenterHeadParams):
    c1, h = cache
    dh, gout = conv3x3_backward(dy, h, p.out)
    dF, gtrunk = cbr_backward(dh, c1, p.trunk)
    return dF, CenterHeadParams(gtrunk, gout)


def objectness(maps: np.ndarray) -> np.ndarray:
    return sigmoid(maps[OBJ])


def local_peaks(score: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels not exceeded by any 8-neighbour."""
    h, w = score.shape
    pad = np.pad(score, 1, constant_values=-np.inf)
    peak = np.ones((h, w), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                peak &= score >= pad[1 + di:1 + di + h, 1 + dj:1 + dj + w]
    return peak


def decode_detections(maps: np.ndarray, grid: BEVGrid, score_thresh: float = 0.3,
                      radius: float = 1.0) -> list[Detection]:
    """Peak-pick each class map, suppress lower peaks within ``radius`` meters, read regressions."""
    probs = objectness(maps)
    dets = []
    for c in range(probs.shape[0]):
        score = probs[c]
        ii, jj = np.nonzero(local_peaks(score) & (score >= score_thresh))
        order = sorted(range(len(ii)), key=lambda k: (-score[ii[k], jj[k]], ii[k], jj[k]))
        kept: list[np.ndarray] = []
        for k in order:
            i, j = ii[k], jj[k]
            ctr = np.array([grid.origin[0] + (j + maps[OFF][0, i, j]) * grid.resolution,
                            grid.origin[1] + (i + maps[OFF][1, i, j]) * grid.resolution])
            if any(np.hypot(*(ctr - q)) < radius for q in kept):
                continue
            kept.append(ctr)
            w, l = np.exp(np.clip(maps[LOGSIZE][:, i, j], -5, 5))
            yaw = math.atan2(maps[YAW][0, i, j], maps[YAW][1, i, j])
            v = maps[VEL][:, i, j] * VEL_SCALE
            dets.append(Detection((float(ctr[0]), float(ctr[1])), (float(w), float(l)), yaw,
                                  (float(v[0]), float(v[1])), c, float(score[i, j])))
    return dets


# --- losses -----------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_loss(logits, targets, alpha: float | None = 0.25, gamma: float = 2.0, reduction: str = "mean"):
    """Sigmoid focal loss ``-alpha_t (1 - p_t)^gamma log p_t`` averaged (or summed) over elements.

    ``alpha=None`` drops the class weighting, so ``gamma=0`` recovers plain BCE.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = sigmoid(x)
    log_p = -_softplus(-x)
    log_1mp = -_softplus(x)
    a_pos, a_neg = (1.0, 1.0) if alpha is None else (alpha, 1.0 - alpha)
    loss = -(t * a_pos * (1 - p) ** gamma * log_p + (1 - t) * a_neg * p ** gamma * log_1mp)
    return float(loss.mean() if reduction == "mean" else loss.sum())


def focal_loss_grad(logits, targets, alpha: float | None = 0.25, gamma: float = 2.0, reduction: str = "mean"):
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = sigmoid(x)
    log_p = -_softplus(-x)
    log_1mp = -_softplus(x)
    a_pos, a_neg = (1.0, 1.0) if alpha is None else (alpha, 1.0 - alpha)
    g_pos = a_pos * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
    g_neg = a_neg * p ** gamma * (p - gamma * (1 - p) * log_1mp)
    g = t * g_pos + (1 - t) * g_neg
    return g / x.size if reduction == "mean" else g


# --- segmentation -----------------------------------------------------------


@dataclass
class SegParams:
    trunk: CBRParams
    heads: list[LinearParams]  # one 1x1 head per task
    upsample: int = 2

    @classmethod
    def init(cls, rng, c_in: int, hidden: int, n_tasks: int = 3, upsample: int = 2):
        heads = [LinearParams.init(rng, hidden, 1, scale=0.01) for _ in range(n_tasks)]
        for hd in heads:
            hd.bias[:] = PRIOR_LOGIT
        return cls(CBRParams.init(rng, c_in, hidden), heads, upsample)


def upsample_nearest(x: np.ndarray, f: int) -> np.ndarray:
    return x.repeat(f, axis=1).repeat(f, axis=2) if f > 1 else x


def upsample_nearest_backward(dy: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return dy
    c, h, w = dy.shape
    return dy.reshape(c, h // f, f, w // f, f).sum(axis=(2, 4))


def seg_decode(F: np.ndarray, p: SegParams):
    """Upsample, shared CBR trunk, per-task 1x1 heads. Returns ``(logits T x H' x W', cache)``."""
    up = upsample_nearest(F, p.upsample)
    h, c1 = cbr(up, p.trunk)
    c, hh, ww = h.shape
    flat = h.reshape(c, -1).T
    logits = np.stack([linear(flat, hd)[:, 0].reshape(hh, ww) for hd in p.heads])
    return logits, (c1, flat, (c, hh, ww))


def seg_decode_backward(dlogits, cache, p: SegParams):
    c1, flat, (c, hh, ww) = cache
    dflat = np.zeros_like(flat)
    grads = []
    for t, hd in enumerate(p.heads):
        d, g = linear_backward(dlogits[t].reshape(-1, 1), flat, hd)
        dflat += d
        grads.append(g)
    dup, gtrunk = cbr_backward(dflat.T.reshape(c, hh, ww), c1, p.trunk)
    return upsample_nearest_backward(dup, p.upsample), SegParams(gtrunk, grads, p.upsample)


def seg_masks(logits: np.ndarray) -> np.ndarray:
    return sigmoid(logits)


def seg_loss(logits, targets, weights=SEG_WEIGHTS, alpha=0.25, gamma=2.0):
    """Task-weighted focal loss; returns ``(loss, dlogits)``."""
    loss = 0.0
    grad = np.zeros_like(logits)
    for t, w in enumerate(weights):
        loss += w * focal_loss(logits[t], targets[t], alpha, gamma)
        grad[t] = w * focal_loss_grad(logits[t], targets[t], alpha, gamma)
    return loss, grad


# --- tracking ---------------------------------------------------------------


@dataclass
class Track:
    id: int
    detection: Detection
    center: np.ndarray  # current (predicted or observed) centre
    age: int = 1
    misses: int = 0
    history: list[Detection] = field(default_factory=list)


class GreedyTracker:
    """Velocity-compensated greedy centre-distance tracker.

    One instance per sequence; :meth:`step` mutates the track set.
    """

    def __init__(self, gate: float = 2.0, max_misses: int = 3):
        self.gate = gate
        self.max_misses = max_misses
        self.tracks: list[Track] = []
        self._next_id = 0

    def step(self, detections: list[Detection], dt: float) -> list[tuple[int, Detection]]:
        """Associate one frame; returns ``(track_id, detection)`` for every detection."""
        self.tracks, assigned, self._next_id = greedy_track(
            self.tracks, detections, dt, self.gate, self.max_misses, self._next_id)
        return assigned


def greedy_track(prev_tracks: list[Track], detections: list[Detection], dt: float, gate: float = 2.0,
                 max_misses: int = 3, next_id: int | None = None):
    """Returns ``(tracks, [(track_id, detection)], next_id)``.

    Track centres advance by their velocity times ``dt``; all same-class
    (track, detection) pairs are visited in ascending distance (ties by track
    id, then detection index) and accepted when both are free and the
    distance is below ``gate``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if next_id is None:
        next_id = max((t.id for t in prev_tracks), default=-1) + 1
    predicted = [t.center + np.asarray(t.detection.velocity) * dt for t in prev_tracks]
    pairs = []
    for ti, (t, pc) in enumerate(zip(prev_tracks, predicted)):
        for di, d in enumerate(detections):
            if d.cls != t.detection.cls:
                continue
            dist = float(np.hypot(*(np.asarray(d.center) - pc)))
            if dist < gate:
                pairs.append((dist, t.id, di, ti))
    pairs.sort()
    used_t, used_d = set(), set()
    match = {}
    for dist, _, di, ti in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        match[di] = ti
    tracks = []
    out = []
    for ti, t in enumerate(prev_tracks):
        if ti in used_t:
            continue
        misses = t.misses + 1
        if misses < max_misses:
            tracks.append(Track(t.id, t.detection, predicted[ti], t.age + 1, misses, t.history))
    for di, d in enumerate(detections):
        if di in match:
            t = prev_tracks[match[di]]
            tr = Track(t.id, d, np.asarray(d.center, dtype=np.float64), t.age + 1, 0, t.history + [d])
        else:
            tr = Track(next_id, d, np.asarray(d.center, dtype=np.float64), 1, 0, [d])
            next_id += 1
        tracks.append(tr)
        out.append((tr.id, d))
    tracks.sort(key=lambda t: t.id)
    return tracks, out, next_id
