import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcfuse.heads import Detection
from rcfuse.metrics import (REPORT_KEYS, TrackBox, TrackEvalInput, aligned_iou, amota, amotp, ap_from_tp,
                            average_precision, clear_counts, evaluate_detection, iou, match_by_distance,
                            metrics_report, miou, motar, nds, tp_errors, validate_report, write_report, yaw_diff)
from rcfuse.world import CLASS_NAMES, SceneObject


def det(x, y, score=0.9, cls=0, size=(2.0, 4.0), yaw=0.0, vel=(0.0, 0.0)):
    return Detection((x, y), size, yaw, vel, cls, score)


def gt(x, y, cls=0, size=(2.0, 4.0, 1.5), yaw=0.0, vel=(0.0, 0.0)):
    return SceneObject((x, y, size[2] / 2), size, yaw, vel, cls, int(math.hypot(*vel) > 0.5))


def greedy_oracle(preds, gts, thr):
    """Plain-loop restatement of greedy matching."""
    taken = set()
    out = []
    for i in sorted(range(len(preds)), key=lambda i: (-preds[i].score, i)):
        best, bd = None, math.inf
        for j, g in enumerate(gts):
            if j in taken:
                continue
            d = math.dist(preds[i].center[:2], g.center[:2])
            if d < bd:
                best, bd = j, d
        if best is not None and bd < thr:
            taken.add(best)
            out.append((i, best))
    return out


xy = st.tuples(st.floats(-10, 10), st.floats(-10, 10))


@given(st.lists(st.tuples(xy, st.floats(0, 1)), max_size=8), st.lists(xy, max_size=8),
       st.sampled_from([0.5, 1.0, 2.0, 4.0]))
@settings(max_examples=150, deadline=None)
def test_greedy_matching_matches_oracle(ps, gs, thr):
    preds = [det(x, y, s) for (x, y), s in ps]
    gts = [gt(x, y) for x, y in gs]
    res = match_by_distance(preds, gts, thr)
    assert [(i, j) for i, j, _ in res.matches] == greedy_oracle(preds, gts, thr)
    assert len(res.matches) + len(res.fp) == len(preds)
    assert len(res.matches) + len(res.fn) == len(gts)


def test_higher_score_claims_the_gt_first():
    res = match_by_distance([det(0.1, 0, 0.2), det(0.9, 0, 0.8)], [gt(0, 0)], 2.0)
    assert res.matches[0][:2] == (1, 0) and res.fp == [0]


def test_ap_staircase_by_hand():
    # TP, FP, TP against two GTs: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    tp = np.array([True, False, True])
    grid = np.arange(1, 41) / 40
    grid = grid[grid > 0.1]
    interp = np.where(grid <= 0.5, 1.0, 2 / 3)
    expected = np.mean(np.clip(interp - 0.1, 0, None)) / 0.9
    assert ap_from_tp(tp, 2) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx((16 * 0.9 + 20 * (2 / 3 - 0.1)) / 36 / 0.9)


def test_ap_edge_cases():
    assert ap_from_tp(np.ones(5, bool), 5) == pytest.approx(1.0)
    assert ap_from_tp(np.zeros(0, bool), 3) == 0.0
    assert math.isnan(ap_from_tp(np.ones(2, bool), 0))
    # precision below the floor contributes nothing
    assert ap_from_tp(np.array([False] * 20 + [True]), 1) == 0.0
    # half recall reached perfectly: samples above 0.5 score zero
    assert ap_from_tp(np.ones(1, bool), 2) == pytest.approx(16 / 36)


def test_ap_uses_frames_independently():
    preds = [[det(0, 0)], [det(0, 0)]]
    gts = [[gt(0, 0)], []]
    tp_only = average_precision(preds[:1], gts[:1], 1.0)
    assert tp_only == pytest.approx(1.0)
    # the second-frame prediction has nothing to match
    assert average_precision(preds, gts, 1.0) < 1.0


def test_yaw_and_iou_helpers():
    assert yaw_diff(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
    assert yaw_diff(math.pi, 0.0) == pytest.approx(math.pi)
    assert yaw_diff(0.3, 0.3 + math.pi, period=math.pi) == pytest.approx(0.0)
    assert aligned_iou((2, 4), (2, 4)) == pytest.approx(1.0)
    assert aligned_iou((1, 4), (2, 4)) == pytest.approx(0.5)
    assert aligned_iou((1, 2), (2, 4)) == pytest.approx(0.25)


def test_tp_errors_by_hand():
    pairs = [(det(1.0, 0.0, yaw=0.5, vel=(3.0, 0.0), size=(1.0, 4.0)), gt(0.0, 0.0, vel=(0.0, 4.0))),
             (det(0.0, 3.0), gt(0.0, 0.0))]
    ate, ase, aoe, ave, aae = tp_errors(pairs)
    assert ate == pytest.approx(2.0)
    assert ase == pytest.approx(0.25)
    assert aoe == pytest.approx(0.25)
    assert ave == pytest.approx(2.5)
    assert aae == pytest.approx(0.0)  # both moving, then both stationary
    assert tp_errors([]) == (1.0,) * 5
    assert all(math.isnan(v) for v in tp_errors(pairs, velocity=False)[3:])


@given(st.floats(0, 1), st.lists(st.floats(0, 5), min_size=5, max_size=5))
def test_nds_range_and_clipping(m, errs):
    v = nds(m, errs)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx((5 * m + sum(1 - min(1, e) for e in errs)) / 10)
    assert nds(m, [min(e, 1.0) for e in errs]) == pytest.approx(v)


def test_nds_extremes_and_arity():
    assert nds(1.0, [0.0] * 5) == 1.0
    assert nds(0.0, [1.0] * 5) == 0.0
    assert nds(0.5, [2.0] * 5) == 0.25
    with pytest.raises(ValueError):
        nds(0.5, [0.1] * 4)


def test_perfect_detection_scores_one():
    frames = [[gt(10, 0, 0, vel=(2.0, 1.0)), gt(-5, 5, 1, (0.7, 0.7, 1.7)), gt(0, -8, 2, (0.5, 2.0, 1.0))]
              for _ in range(3)]
    preds = [[det(o.center[0], o.center[1], 0.9, o.cls, o.size[:2], o.yaw, o.velocity) for o in f] for f in frames]
    rep = evaluate_detection(preds, frames, CLASS_NAMES)
    assert rep.map == pytest.approx(1.0) and rep.nds == pytest.approx(1.0)
    assert rep.mate == pytest.approx(0.0) and rep.mave == pytest.approx(0.0)
    # velocity is not scored for the static class
    assert math.isnan(rep.per_class["barrier"]["mave"])
    assert set(rep.per_class) == set(CLASS_NAMES)


def test_empty_detection_and_missing_classes():
    frames = [[gt(10, 0)]]
    rep = evaluate_detection([[]], frames, CLASS_NAMES)
    assert rep.map == 0.0 and rep.nds == 0.0 and rep.mate == 1.0
    assert list(rep.per_class) == ["vehicle"]
    assert evaluate_detection([[]], [[]], CLASS_NAMES).nds == 0.0


def test_translation_error_lowers_nds_smoothly():
    frames = [[gt(10, 0)]]
    scores = [evaluate_detection([[det(10 + d, 0)]], frames, CLASS_NAMES).nds for d in (0.0, 0.3, 0.6, 0.9)]
    assert scores == sorted(scores, reverse=True)


# --- tracking ---------------------------------------------------------------


def test_motar_crafted_case():
    assert motar(ids=0, fp=1, fn=5, r=0.5, P=10) == pytest.approx(0.8)
    assert motar(0, 0, 0, 1.0, 10) == 1.0
    assert motar(10, 10, 10, 0.5, 10) == 0.0


def straight_tracks(n_obj=3, n_frames=6, offset=0.0, score=1.0):
    g = [[TrackBox(k, (5.0 * k, 0.5 * t)) for k in range(n_obj)] for t in range(n_frames)]
    h = [[TrackBox(100 + k, (5.0 * k + offset, 0.5 * t), 0, score) for k in range(n_obj)] for t in range(n_frames)]
    return g, h


def test_perfect_tracking():
    g, h = straight_tracks()
    inp = TrackEvalInput(g, h)
    assert amota(inp) == pytest.approx(1.0)
    assert amotp(inp) == pytest.approx(0.0)
    c = clear_counts(g, h)
    assert (c.tp, c.fp, c.fn, c.ids) == (18, 0, 0, 0)


def test_amotp_is_mean_match_distance():
    g, h = straight_tracks(offset=0.7)
    assert amotp(TrackEvalInput(g, h)) == pytest.approx(0.7)
    assert amota(TrackEvalInput(g, h)) == pytest.approx(1.0)


def test_identity_switch_is_counted_once():
    g = [[TrackBox(0, (0.0, float(t)))] for t in range(4)]
    h = [[TrackBox(7 if t < 2 else 8, (0.0, float(t)))] for t in range(4)]
    c = clear_counts(g, h)
    assert c.ids == 1 and c.tp == 4


def test_kept_correspondence_beats_closer_newcomer():
    # the old track stays within the gate, so no switch even though another hypothesis is closer
    g = [[TrackBox(0, (0.0, 0.0))], [TrackBox(0, (0.0, 1.0))]]
    h = [[TrackBox(1, (0.0, 0.0))], [TrackBox(1, (0.0, 2.5 - 0.6)), TrackBox(2, (0.0, 1.0))]]
    c = clear_counts(g, h)
    assert c.ids == 0 and c.fp == 1


def test_missed_half_gives_partial_amota():
    # every GT half the time: recall tops out at 0.5 so the upper half of the curve scores zero
    g, _ = straight_tracks(2, 4)
    h = [[TrackBox(100 + k, b.center) for k, b in enumerate(f) if k == 0] for f in g]
    inp = TrackEvalInput(g, h, n=11)
    r = np.arange(1, 11) / 10
    expected = np.mean([motar(0, 0, 4, 0.5, 8) if x <= 0.5 else 0.0 for x in r])
    assert amota(inp) == pytest.approx(expected)


def test_track_input_validation():
    with pytest.raises(ValueError):
        TrackEvalInput([[]], [[], []])
    with pytest.raises(ValueError):
        TrackEvalInput([[]], [[]], n=1)


# --- segmentation -------------------------------------------------------------


def test_iou_trivial_cases():
    z = np.zeros((4, 4))
    o = np.ones((4, 4))
    assert iou(z, z) == 1.0
    assert iou(o, o) == 1.0
    assert iou(o, z) == 0.0
    half = np.zeros((4, 4))
    half[:2] = 1
    assert iou(half, o) == 0.5


def test_miou_is_mean_of_tasks():
    gtm = np.zeros((3, 8, 8))
    gtm[0, :4] = 1
    gtm[1] = 1
    pred = gtm.copy()
    pred[1, :2] = 0.2  # below threshold
    per, m = miou(pred, gtm)
    assert per == [1.0, 0.75, 1.0]
    assert m == pytest.approx(2.75 / 3)
    with pytest.raises(ValueError):
        miou(pred[:2], gtm)


@given(st.integers(0, 1000))
@settings(max_examples=20)
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 6, 6))
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


# --- report -----------------------------------------------------------------


def test_report_schema_and_json(tmp_path):
    frames = [[gt(10, 0)]]
    rep = metrics_report(evaluate_detection([[det(10, 0)]], frames, CLASS_NAMES), 1.0, 0.0, 0.5)
    assert set(rep) == set(REPORT_KEYS)
    write_report(rep, tmp_path / "m.json")
    back = json.loads((tmp_path / "m.json").read_text())
    assert back["nds"] == pytest.approx(rep["nds"])
    empty = metrics_report()
    validate_report(empty)
    assert empty["nds"] is None and empty["per_class"] == {}


def test_report_rejects_malformed():
    rep = metrics_report()
    del rep["amota"]
    with pytest.raises(ValueError):
        validate_report(rep)
    rep = metrics_report()
    rep["nds"] = "high"
    with pytest.raises(ValueError):
        validate_report(rep)


def test_nan_is_written_as_null(tmp_path):
    rep = metrics_report(miou_=float("nan"))
    write_report(rep, tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["miou"] is None
