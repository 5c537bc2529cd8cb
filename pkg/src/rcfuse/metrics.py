"""Detection, tracking and segmentation metrics in the nuScenes style."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
N_RECALL = 40
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
TP_NAMES = ("mate", "mase", "maoe", "mave", "maae")


def _xy(obj) -> np.ndarray:
    return np.asarray(obj.center, dtype=np.float64)[:2]


# --- detection --------------------------------------------------------------


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]]  # (pred index, gt index, distance)
    fp: list[int]
    fn: list[int]


def match_by_distance(preds, gts, threshold: float) -> MatchResult:
    """Greedy centre-distance matching: predictions by descending score, each to its nearest free GT."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    gxy = np.array([_xy(g) for g in gts]).reshape(-1, 2)
    free = np.ones(len(gts), dtype=bool)
    matches, fp = [], []
    for i in order:
        if free.any():
            d = np.hypot(*(gxy - _xy(preds[i])).T)
            d[~free] = np.inf
            j = int(np.argmin(d))
            if d[j] < threshold:
                free[j] = False
                matches.append((i, j, float(d[j])))
                continue
        fp.append(i)
    return MatchResult(matches, fp, [j for j in range(len(gts)) if free[j]])


def _match_frames(preds_per_frame, gts_per_frame, threshold):
    """Global score-ordered matching across frames. Returns ``(is_tp sorted by score, n_gt, pairs)``."""
    flat = [(-p.score, f, i) for f, ps in enumerate(preds_per_frame) for i, p in enumerate(ps)]
    flat.sort()
    free = [np.ones(len(g), dtype=bool) for g in gts_per_frame]
    gxy = [np.array([_xy(g) for g in gs]).reshape(-1, 2) for gs in gts_per_frame]
    tp = np.zeros(len(flat), dtype=bool)
    pairs = []
    for k, (_, f, i) in enumerate(flat):
        p = preds_per_frame[f][i]
        if not free[f].any():
            continue
        d = np.hypot(*(gxy[f] - _xy(p)).T)
        d[~free[f]] = np.inf
        j = int(np.argmin(d))
        if d[j] < threshold:
            free[f][j] = False
            tp[k] = True
            pairs.append((p, gts_per_frame[f][j]))
    return tp, sum(len(g) for g in gts_per_frame), pairs


def ap_from_tp(tp: np.ndarray, n_gt: int, n_recall: int = N_RECALL, min_recall: float = MIN_RECALL,
               min_precision: float = MIN_PRECISION) -> float:
    """Interpolated AP from a score-sorted TP flag sequence.

    Precision is interpolated as the best precision at recall at least ``r`` for
    ``r = k / n_recall``; only ``r > min_recall`` count, and precision is
    shifted by ``min_precision`` and renormalised.
    """
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    grid = np.arange(1, n_recall + 1) / n_recall
    grid = grid[grid > min_recall + 1e-12]
    interp = np.array([prec[rec >= r - 1e-12].max() if (rec >= r - 1e-12).any() else 0.0 for r in grid])
    return float(np.clip(interp - min_precision, 0.0, None).mean() / (1.0 - min_precision))


def average_precision(preds_per_frame, gts_per_frame, threshold: float, **kw) -> float:
    tp, n_gt, _ = _match_frames(preds_per_frame, gts_per_frame, threshold)
    return ap_from_tp(tp, n_gt, **kw)


def yaw_diff(a: float, b: float, period: float = 2 * math.pi) -> float:
    d = (a - b) % period
    return min(d, period - d)


def aligned_iou(size_a, size_b) -> float:
    """IoU of two footprints sharing centre and heading."""
    wa, la = size_a[:2]
    wb, lb = size_b[:2]
    inter = min(wa, wb) * min(la, lb)
    return inter / (wa * la + wb * lb - inter)


def tp_errors(pairs, velocity: bool = True) -> tuple[float, float, float, float, float]:
    """Mean ``(ATE, ASE, AOE, AVE, AAE)`` over matched ``(prediction, gt)`` pairs; 1 each when empty."""
    if not pairs:
        return (1.0,) * 5
    ate = np.mean([np.hypot(*(_xy(p) - _xy(g))) for p, g in pairs])
    ase = np.mean([1.0 - aligned_iou(p.size, g.size) for p, g in pairs])
    aoe = np.mean([yaw_diff(p.yaw, g.yaw) for p, g in pairs])
    if velocity:
        ave = np.mean([np.hypot(*(np.asarray(p.velocity) - np.asarray(g.velocity))) for p, g in pairs])
        aae = np.mean([float(p.attribute != g.attribute) for p, g in pairs])
    else:
        ave = aae = float("nan")
    return float(ate), float(ase), float(aoe), float(ave), float(aae)


def nds(map_: float, errors) -> float:
    """``(5 mAP + sum(1 - min(1, e))) / 10`` over the five TP errors."""
    if len(errors) != 5:
        raise ValueError("need exactly five TP errors")
    return float((5.0 * map_ + sum(1.0 - min(1.0, e) for e in errors)) / 10.0)


@dataclass
class DetectionReport:
    map: float
    mate: float
    mase: float
    maoe: float
    mave: float
    maae: float
    nds: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("map", "mate", "mase", "maoe", "mave", "maae", "nds", "per_class")}


def evaluate_detection(preds_per_frame, gts_per_frame, class_names, static_classes=(2,),
                       thresholds=DIST_THRESHOLDS) -> DetectionReport:
    """mAP over classes and thresholds, class-mean TP errors, NDS.

    Classes without ground truth are skipped. Velocity and attribute errors
    are undefined for ``static_classes``.
    """
    per_class = {}
    aps, errs = [], []
    for c, name in enumerate(class_names):
        p = [[d for d in ps if d.cls == c] for ps in preds_per_frame]
        g = [[o for o in gs if o.cls == c] for gs in gts_per_frame]
        if not any(g):
            continue
        c_aps = [average_precision(p, g, t) for t in thresholds]
        _, _, pairs = _match_frames(p, g, TP_THRESHOLD)
        e = tp_errors(pairs, velocity=c not in static_classes)
        per_class[name] = {"ap": float(np.mean(c_aps)), "ap_by_threshold": dict(zip(map(str, thresholds), c_aps)),
                           **dict(zip(TP_NAMES, e))}
        aps.append(np.mean(c_aps))
        errs.append(e)
    if not aps:
        return DetectionReport(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, per_class)
    errs = np.array(errs)
    m = [float(np.nanmean(col)) if not np.isnan(col).all() else 1.0 for col in errs.T]
    map_ = float(np.mean(aps))
    return DetectionReport(map_, *m, nds(map_, m), per_class)


# --- tracking ---------------------------------------------------------------


@dataclass
class TrackBox:
    id: int
    center: tuple[float, float]
    cls: int = 0
    score: float = 1.0


@dataclass
class TrackEvalInput:
    gt: list[list[TrackBox]]  # per frame
    hyp: list[list[TrackBox]]  # per frame
    n: int = N_RECALL
    threshold: float = TP_THRESHOLD

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two recall samples")
        if len(self.gt) != len(self.hyp):
            raise ValueError("gt and hypothesis frame counts differ")


@dataclass
class ClearCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    dist: float = 0.0

    @property
    def p(self) -> int:
        return self.tp + self.fn


def motar(ids: int, fp: int, fn: int, r: float, P: int) -> float:
    """``max(0, 1 - (IDS + FP + FN - (1 - r) P) / (r P))``."""
    return max(0.0, 1.0 - (ids + fp + fn - (1.0 - r) * P) / (r * P))


def clear_counts(gt, hyp, threshold: float = TP_THRESHOLD) -> ClearCounts:
    """Frame-by-frame CLEAR-MOT accounting.

    Correspondences from the previous frame are kept while still within the
    threshold; the remaining pairs are assigned by minimum total distance.
    An identity switch is counted when a GT is matched to a hypothesis other
    than the one it was last matched to.
    """
    out = ClearCounts()
    last: dict[int, int] = {}
    for gts, hyps in zip(gt, hyp):
        gxy = np.array([g.center for g in gts], dtype=np.float64).reshape(-1, 2)
        hxy = np.array([h.center for h in hyps], dtype=np.float64).reshape(-1, 2)
        D = np.hypot(gxy[:, None, 0] - hxy[None, :, 0], gxy[:, None, 1] - hxy[None, :, 1])
        pairs = {}
        hid = {h.id: k for k, h in enumerate(hyps)}
        for gi, g in enumerate(gts):
            k = hid.get(last.get(g.id, -1))
            if k is not None and D[gi, k] < threshold and k not in pairs.values():
                pairs[gi] = k
        rg = [i for i in range(len(gts)) if i not in pairs]
        rh = [k for k in range(len(hyps)) if k not in pairs.values()]
        if rg and rh:
            sub = D[np.ix_(rg, rh)]
            cost = np.where(sub < threshold, sub, 1e6)
            for a, b in zip(*linear_sum_assignment(cost)):
                if sub[a, b] < threshold:
                    pairs[rg[a]] = rh[b]
        for gi, k in pairs.items():
            gid = gts[gi].id
            if gid in last and last[gid] != hyps[k].id:
                out.ids += 1
            last[gid] = hyps[k].id
            out.dist += float(D[gi, k])
        out.tp += len(pairs)
        out.fn += len(gts) - len(pairs)
        out.fp += len(hyps) - len(pairs)
    return out


def _recall_sweep(inp: TrackEvalInput):
    """Counts at every score threshold, most permissive last."""
    scores = sorted({h.score for frame in inp.hyp for h in frame}, reverse=True)
    sweep = []
    for s in scores:
        hyp = [[h for h in frame if h.score >= s] for frame in inp.hyp]
        sweep.append(clear_counts(inp.gt, hyp, inp.threshold))
    return sweep


def _per_recall(inp: TrackEvalInput):
    """For each ``r = k/(n-1)``: the counts at the smallest achieved recall ``>= r`` (None if unreachable)."""
    P = sum(len(f) for f in inp.gt)
    sweep = _recall_sweep(inp)
    out = []
    for k in range(1, inp.n):
        r = k / (inp.n - 1)
        best = None
        for c in sweep:
            if c.tp / P >= r - 1e-12 and (best is None or c.tp < best.tp):
                best = c
        out.append((r, best))
    return P, out


def _classes(inp: TrackEvalInput):
    return sorted({g.cls for f in inp.gt for g in f})


def _split_class(inp: TrackEvalInput, c: int) -> TrackEvalInput:
    return TrackEvalInput([[g for g in f if g.cls == c] for f in inp.gt],
                          [[h for h in f if h.cls == c] for f in inp.hyp], inp.n, inp.threshold)


def amota(inp: TrackEvalInput) -> float:
    """Class-mean of recall-averaged MOTAR, each MOTAR taken at the achieved recall; unreachable recall scores 0."""
    vals = []
    for c in _classes(inp):
        P, per = _per_recall(_split_class(inp, c))
        m = [motar(b.ids, b.fp, b.fn, b.tp / P, P) if b is not None else 0.0 for _, b in per]
        vals.append(np.mean(m))
    return float(np.mean(vals)) if vals else float("nan")


def amotp(inp: TrackEvalInput) -> float:
    """Class-mean of recall-averaged ``sum d / sum TP``; unreachable or zero-TP samples are skipped."""
    vals = []
    for c in _classes(inp):
        _, per = _per_recall(_split_class(inp, c))
        m = [b.dist / b.tp for _, b in per if b is not None and b.tp > 0]
        vals.append(np.mean(m) if m else inp.threshold)
    return float(np.mean(vals)) if vals else float("nan")


# --- segmentation -----------------------------------------------------------


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    a = np.asarray(pred) >= threshold
    b = np.asarray(gt) >= threshold
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def miou(pred_masks: np.ndarray, gt_masks: np.ndarray, threshold: float = 0.5):
    """Per-task IoU list and their mean over ``T x H x W`` stacks."""
    if np.shape(pred_masks) != np.shape(gt_masks):
        raise ValueError("mask shapes differ")
    per = [iou(p, g, threshold) for p, g in zip(pred_masks, gt_masks)]
    return per, float(np.mean(per))


# --- report -----------------------------------------------------------------


def metrics_report(det: DetectionReport | None = None, amota_: float | None = None, amotp_: float | None = None,
                   miou_: float | None = None, extra: dict | None = None) -> dict:
    rep = {k: None for k in ("map", "mate", "mase", "maoe", "mave", "maae", "nds", "amota", "amotp", "miou")}
    rep["per_class"] = {}
    if det is not None:
        rep.update(det.to_dict())
    rep["amota"], rep["amotp"], rep["miou"] = amota_, amotp_, miou_
    if extra:
        rep.update(extra)
    return rep


REPORT_KEYS = ("map", "mate", "mase", "maoe", "mave", "maae", "nds", "amota", "amotp", "miou", "per_class")


def validate_report(rep: dict) -> None:
    missing = [k for k in REPORT_KEYS if k not in rep]
    if missing:
        raise ValueError(f"metrics report lacks {missing}")
    for k in REPORT_KEYS[:-1]:
        v = rep[k]
        if v is not None and not isinstance(v, (int, float)):
            raise ValueError(f"{k} must be numeric or null")
    if not isinstance(rep["per_class"], dict):
        raise ValueError("per_class must be an object")


def write_report(rep: dict, path: str | Path) -> None:
    from .io import write_json

    validate_report(rep)
    write_json(path, rep)
