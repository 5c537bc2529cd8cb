"""Registry of quick oracle and invariant checks run by ``rcfuse selftest``."""
from __future__ import annotations

import math
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone as bb
from . import camf, heads, metrics, radar, rcs_bev, sparse, world
from .attention import attention
from .config import ExperimentConfig, parse, serialize
from .numerics import (ConvParams, DimensionError, LinearParams, bilinear_sample, conv3x3, finite_diff_gradient,
                       linear, mlp, relative_error, softmax)


@dataclass
class Check:
    suite: str
    name: str
    fn: Callable[[], None]


REGISTRY: list[Check] = []


def check(suite: str):
    def deco(fn):
        REGISTRY.append(Check(suite, fn.__name__, fn))
        return fn
    return deco


def _close(a, b, tol=1e-12):
    assert np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))) <= tol, (a, b)


# --- numerics ---------------------------------------------------------------


@check("numerics")
def linear_identity():
    _close(linear(np.array([1.0, 0.0]), LinearParams.identity(2)), [1, 0])


@check("numerics")
def linear_hand():
    p = LinearParams(np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([0.5, 0.0]))
    _close(linear(np.array([1.0, 2.0]), p), [3.5, 2.0])


@check("numerics")
def linear_shape_error():
    try:
        linear(np.ones(3), LinearParams.identity(2))
    except DimensionError:
        return
    raise AssertionError("expected a dimension error")


@check("numerics")
def mlp_relu_kill():
    l1 = LinearParams(-np.eye(2), np.full(2, -1.0))
    l2 = LinearParams(np.ones((1, 2)), np.array([0.25]))
    _close(mlp(np.array([[1.0, 2.0]]), [l1, l2])[0], [[0.25]])


@check("numerics")
def softmax_uniform_and_shift():
    _close(softmax(np.zeros(3)), [1 / 3] * 3)
    x = np.random.default_rng(0).normal(size=(4, 5))
    _close(softmax(x, 1), softmax(x + 7.0, 1), 1e-12)


@check("numerics")
def conv_identity():
    x = np.random.default_rng(1).normal(size=(3, 4, 5))
    _close(conv3x3(x, ConvParams.identity(3)), x)


@check("numerics")
def bilinear_grid_identity():
    F = np.arange(12.0).reshape(1, 3, 4)
    _close(bilinear_sample(F, np.array([2.0, 1.0])), [F[0, 1, 2]])


@check("numerics")
def bilinear_blend():
    F = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    _close(bilinear_sample(F, np.array([0.25, 0.5])), [0.25 * 1 + 0.5 * 2])


@check("numerics")
def finite_diff_quadratic():
    g = finite_diff_gradient(lambda v: float((v ** 2).sum()), np.array([1.0, -2.0]))
    assert relative_error(g, [2.0, -4.0]) < 1e-8


# --- radar ingest -----------------------------------------------------------


def _cloud(seed=0, n=12):
    rng = np.random.default_rng(seed)
    return radar.RadarPointCloud(rng.uniform(-20, 20, (n, 3)), rng.uniform(0, 2, n), rng.normal(size=(n, 2)),
                                 np.zeros(n, dtype=int))


@check("radar_ingest")
def csv_round_trip():
    pc = _cloud()
    back = radar.from_csv(radar.to_csv(pc))
    _close(back.xyz, pc.xyz, 0.0)
    _close(back.vel, pc.vel, 0.0)


@check("radar_ingest")
def flip_twice_identity():
    pc = _cloud(1)
    _close(radar.augment(radar.augment(pc, "flip-x"), "flip-x").xyz, pc.xyz, 0.0)


@check("radar_ingest")
def rotate_preserves_norms():
    pc = _cloud(2)
    r = radar.augment(pc, "rotate", 0.7)
    _close(np.linalg.norm(r.xyz[:, :2], axis=1), np.linalg.norm(pc.xyz[:, :2], axis=1), 1e-12)


@check("radar_ingest")
def drop_half_rounds():
    assert len(radar.drop_radar(_cloud(3, 5), 0.5)) == 2


@check("radar_ingest")
def accumulate_tags_sweeps():
    a, b = _cloud(4, 3), _cloud(5, 2)
    acc = radar.accumulate_sweeps([a, b], [radar.EgoMotion(), radar.EgoMotion(0.1, (1.0, 0.0))])
    assert list(acc.sweep) == [0, 0, 0, 1, 1] and acc.n_sweeps == 2


@check("radar_ingest")
def perturb_leaves_input_untouched():
    pc = _cloud(6)
    before = pc.xyz.copy()
    radar.perturb_xy(pc, 1.0, 0)
    _close(pc.xyz, before, 0.0)


# --- radar backbone ---------------------------------------------------------


def _dmsa_setup(seed, beta):
    rng = np.random.default_rng(seed)
    p = bb.DMSAParams.init(rng, 8, 2, beta)
    f = rng.normal(size=(6, 8))
    D = bb.pairwise_distances(rng.uniform(-5, 5, (6, 2)))
    return p, f, D


@check("radar_backbone")
def dmsa_beta_zero_is_vanilla():
    p, f, D = _dmsa_setup(0, 0.0)
    _close(bb.dmsa(f, D, p)[0], attention(f, f, p.attn)[0], 1e-12)


@check("radar_backbone")
def dmsa_large_beta_is_self():
    p, f, D = _dmsa_setup(1, 1e6)
    a = bb.dmsa_attention_matrices(f, D, p)
    _close(a, np.broadcast_to(np.eye(6), a.shape), 1e-8)


@check("radar_backbone")
def dmsa_rows_stochastic():
    p, f, D = _dmsa_setup(2, 1.0)
    _close(bb.dmsa_attention_matrices(f, D, p).sum(-1), 1.0, 1e-12)


@check("radar_backbone")
def point_block_pool_is_max():
    rng = np.random.default_rng(3)
    layers = [LinearParams.init(rng, 4, 6), LinearParams.init(rng, 6, 6)]
    f = rng.normal(size=(5, 4))
    out, _ = bb.point_block(f, layers)
    h = mlp(f, layers)[0]
    _close(out[:, 6:], np.broadcast_to(h.max(0), h.shape))


@check("radar_backbone")
def injection_gamma_zero_identity():
    rng = np.random.default_rng(4)
    p = bb.InjectExtractParams.init(rng, 6, 8, 2, 8, gamma=0.0)
    fp, ft = rng.normal(size=(4, 6)), rng.normal(size=(4, 8))
    _close(bb.injection(fp, ft, p)[0], fp, 0.0)


@check("radar_backbone")
def backbone_output_width():
    rng = np.random.default_rng(5)
    p = bb.BackboneParams.init(rng, 7, (4, 8), 8, 2, 2)
    out, _ = bb.dual_stream_forward(rng.normal(size=(5, 7)), rng.normal(size=(5, 2)), p)
    assert out.shape == (5, p.out_dim)


# --- rcs bev encoder --------------------------------------------------------


@check("rcs_bev_encoder")
def origin_point_single_pixel():
    g = rcs_bev.BEVGrid.centered(8, 8.0)
    fp = rcs_bev.rcs_footprint(radar.RadarPoint(0.0, 0.0, 0.0, 5.0, 0, 0, 0), g)
    assert len(fp) == 1


@check("rcs_bev_encoder")
def scatter_matches_naive():
    pc = _cloud(7, 20)
    g = rcs_bev.BEVGrid.centered(16, 24.0)
    feats = np.random.default_rng(7).normal(size=(20, 3))
    fps = [rcs_bev.rcs_footprint(pc.point(i), g, index=i) for i in range(len(pc))]
    table = rcs_bev.footprint_table(pc, g)
    _close(rcs_bev.scatter_sum(feats, table, g.shape), rcs_bev.scatter_sum_naive(feats, fps, g.shape), 0.0)


@check("rcs_bev_encoder")
def scatter_mass_identity():
    pc = _cloud(8, 20)
    g = rcs_bev.BEVGrid.centered(16, 24.0)
    feats = np.ones((20, 1))
    table = rcs_bev.footprint_table(pc, g)
    out = rcs_bev.scatter_sum(feats, table, g.shape)
    assert abs(out.sum() - len(table.point)) < 1e-9


@check("rcs_bev_encoder")
def gaussian_peak_is_one():
    g = rcs_bev.BEVGrid.centered(16, 16.0)
    m = rcs_bev.gaussian_bev_map(radar.RadarPoint(10.0, 0.0, 0.0, 2.0, 0, 0, 0), g)
    assert abs(m.max() - 1.0) < 1e-12


# --- camf -------------------------------------------------------------------


@check("camf_dense")
def deform_k1_is_bilinear():
    rng = np.random.default_rng(9)
    F = rng.normal(size=(4, 5, 6))
    p = camf.DeformAttnParams.init(rng, 3, 4, 4, heads=1, points=1, head_dim=4)
    p.value = LinearParams.identity(4)
    p.output = LinearParams.identity(4)
    ref = rng.uniform(0, 4, (7, 2))
    y, _ = camf.deform_cross_attn(rng.normal(size=(7, 3)), ref, F, p)
    _close(y, bilinear_sample(F, ref), 1e-12)


@check("camf_dense")
def deform_weights_sum_to_one():
    rng = np.random.default_rng(10)
    p = camf.DeformAttnParams.init(rng, 3, 4, 4, 2, 3)
    p.weight.weight[:] = rng.normal(size=p.weight.weight.shape)
    _, cache = camf.deform_cross_attn(rng.normal(size=(5, 3)), rng.uniform(0, 4, (5, 2)),
                                      rng.normal(size=(4, 5, 5)), p)
    _close(cache[3].sum(-1), 1.0, 1e-12)


@check("camf_dense")
def align_zero_output_identity():
    rng = np.random.default_rng(11)
    lp = camf.AlignLayerParams.init(rng, 4, 4, 5, 5, 2, 2)
    lp.to_c.output = LinearParams.zeros(lp.to_c.output.in_dim, 4)
    lp.to_r.output = LinearParams.zeros(lp.to_r.output.in_dim, 4)
    Fc, Fr = rng.normal(size=(4, 5, 5)), rng.normal(size=(4, 5, 5))
    a, b, _ = camf.camf_align(Fc, Fr, [lp])
    _close(a, Fc, 0.0)
    _close(b, Fr, 0.0)


@check("camf_dense")
def fuse_output_shape():
    rng = np.random.default_rng(12)
    p = camf.FuseParams.init(rng, 6, 5)
    y, _ = camf.channel_spatial_fuse(rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), p)
    assert y.shape == (5, 4, 4) and (y >= 0).all()


# --- camf sparse ------------------------------------------------------------


@check("camf_sparse")
def sample_at_cell_center():
    g = rcs_bev.BEVGrid.centered(4, 4.0, data=np.arange(32.0).reshape(2, 4, 4))
    c = g.pixel_centers()[2, 1]
    _close(sparse.project_and_sample(np.array([[c[0], c[1], 0.0]]), g)[0], g.data[:, 2, 1])


@check("camf_sparse")
def sample_outside_is_zero():
    g = rcs_bev.BEVGrid.centered(4, 4.0, data=np.ones((2, 4, 4)))
    _close(sparse.project_and_sample(np.array([[100.0, 0.0, 0.0]]), g), 0.0, 0.0)


@check("camf_sparse")
def sine_encoding_at_origin():
    e = sparse.sine_encoding(np.zeros((1, 3)))[0]
    _close(e, np.tile([0.0, 1.0], len(e) // 2), 0.0)


@check("camf_sparse")
def linear_fuse_selects_first_block():
    q, r = np.ones((2, 3)), 5 * np.ones((2, 2))
    p = LinearParams(np.hstack([np.eye(3), np.zeros((3, 2))]), np.zeros(3))
    _close(sparse.linear_fuse(q, r, p), q)


# --- task heads -------------------------------------------------------------


@check("task_heads")
def focal_closed_form():
    assert abs(heads.focal_loss(np.array([0.0]), np.array([1.0])) - 0.25 * 0.25 * math.log(2)) < 1e-12


@check("task_heads")
def focal_gamma_zero_is_bce():
    x = np.random.default_rng(13).normal(size=10)
    t = (x > 0).astype(float)
    p = 1 / (1 + np.exp(-x))
    bce = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert abs(heads.focal_loss(x, t, alpha=None, gamma=0.0) - bce) < 1e-12


@check("task_heads")
def head_zero_weights_half():
    rng = np.random.default_rng(14)
    p = heads.CenterHeadParams.init(rng, 4, 4)
    p.out = ConvParams(np.zeros_like(p.out.weight), np.zeros(heads.N_OUT))
    maps, _ = heads.center_head(np.zeros((4, 5, 5)), p)
    _close(heads.objectness(maps), 0.5, 0.0)


@check("task_heads")
def tracker_keeps_id():
    d0 = heads.Detection((0.0, 0.0), (2.0, 4.0), 0.0, (1.0, 0.0), 0, 0.9)
    d1 = heads.Detection((0.5, 0.0), (2.0, 4.0), 0.0, (1.0, 0.0), 0, 0.9)
    tr = heads.GreedyTracker()
    a = tr.step([d0], 0.5)
    b = tr.step([d1], 0.5)
    assert a[0][0] == b[0][0]


@check("task_heads")
def tracker_fresh_ids():
    tr = heads.GreedyTracker()
    ids = [t for t, _ in tr.step([heads.Detection((float(i) * 10, 0.0), (1, 1), 0, (0, 0), 0, 0.5)
                                  for i in range(3)], 0.5)]
    assert ids == [0, 1, 2]


# --- synthetic world --------------------------------------------------------


@check("synthetic_world")
def scene_no_overlap():
    objs = world.generate_scene(8, 20.0, 0)
    for i, a in enumerate(objs):
        for b in objs[i + 1:]:
            assert np.hypot(*(a.xy - b.xy)) > a.half_diagonal + b.half_diagonal


@check("synthetic_world")
def scene_deterministic():
    assert world.generate_scene(5, 20.0, 3) == world.generate_scene(5, 20.0, 3)


@check("synthetic_world")
def radar_zero_noise_on_boundary():
    o = world.SceneObject((10.0, 0.0, 0.8), (2.0, 4.0, 1.6), 0.3, (0.0, 0.0), 0)
    pc = world.simulate_radar([o], world.RadarSimParams(sigma_az=0.0, clutter_rate=0.0, density=3.0), 0)
    c, s = math.cos(o.yaw), math.sin(o.yaw)
    d = pc.xyz[:, :2] - o.xy
    along = np.abs(d[:, 0] * c + d[:, 1] * s)
    across = np.abs(-d[:, 0] * s + d[:, 1] * c)
    assert len(pc) > 0 and np.all(np.minimum(np.abs(along - 2.0), np.abs(across - 1.0)) < 1e-9)


@check("synthetic_world")
def camera_drop_all_zero():
    g = rcs_bev.BEVGrid.centered(8, 8.0)
    cam = world.render_camera_bev(world.generate_scene(2, 6.0, 1), g, world.CameraParams(), 0,
                                  world.generate_road(0))
    assert not world.drop_camera_views(cam, "all", 0).data.any()


# --- metrics ----------------------------------------------------------------


@check("metrics")
def nds_published_rows():
    assert abs(metrics.nds(0.550, (0.390, 0.234, 0.362, 0.259, 0.113)) - 0.6392) < 1e-4
    assert abs(metrics.nds(0.6734, (0.341, 0.234, 0.241, 0.147, 0.130)) - 0.72734) < 1e-4


@check("metrics")
def nds_perfect():
    assert metrics.nds(1.0, (0, 0, 0, 0, 0)) == 1.0


@check("metrics")
def motar_hand_value():
    assert abs(metrics.motar(0, 1, 5, 0.5, 10) - 0.8) < 1e-12


@check("metrics")
def miou_half_overlap():
    a = np.zeros((1, 4, 4))
    b = np.zeros((1, 4, 4))
    a[0, :, :2] = 1
    b[0, :, 1:3] = 1
    assert abs(metrics.miou(a, b)[1] - 1 / 3) < 1e-12


@check("metrics")
def aligned_iou_ratio_two():
    assert abs(1 - metrics.aligned_iou((2.0, 4.0), (2.0, 2.0)) - 0.5) < 1e-12


@check("metrics")
def perfect_tracking_amota_one():
    gt = [[metrics.TrackBox(i, (float(i) * 5 + t, 0.0)) for i in range(3)] for t in range(4)]
    inp = metrics.TrackEvalInput(gt, gt)
    assert metrics.amota(inp) == 1.0 and metrics.amotp(inp) == 0.0


# --- checkpoints --------------------------------------------------------------


def _tiny_checkpoint() -> bytes:
    from . import checkpoint
    from .model import ModelDims, init_params
    g = rcs_bev.BEVGrid.centered(4, 4.0)
    dims = ModelDims(4, 4, 4, 4, (4,), 4, 1, 1, 1, 1, False)
    return checkpoint.dumps(init_params(np.random.default_rng(0), dims, "camf", g), dims, g)


@check("checkpoint")
def checkpoint_round_trip():
    from . import checkpoint
    from .numerics import tree_items
    data = _tiny_checkpoint()
    p = checkpoint.loads(data)[0]
    assert checkpoint.dumps(p, *checkpoint.loads(data)[1:3]) == data
    assert len(list(tree_items(p))) > 0


@check("checkpoint")
def checkpoint_corruption_detected():
    from . import checkpoint
    data = bytearray(_tiny_checkpoint())
    data[len(data) // 2] ^= 0xFF
    try:
        checkpoint.loads(bytes(data))
    except checkpoint.CheckpointError:
        return
    raise AssertionError("flipped byte went unnoticed")


# --- cli plumbing -----------------------------------------------------------


@check("cli")
def config_round_trip():
    cfg = ExperimentConfig(seed=4, lr=0.002, out_dir="x y")
    assert parse(serialize(cfg)) == cfg


@check("cli")
def config_rejects_unknown_key():
    try:
        parse("no_such_key = 1\n")
    except ValueError:
        return
    raise AssertionError("unknown key accepted")


def run_all(stream=None, extra: list[Check] | None = None) -> tuple[int, int, list[str]]:
    """Run every registered check; returns ``(passed, total, failure messages)``."""
    checks = REGISTRY + (extra or [])
    failures = []
    per_suite: dict[str, list[int]] = {}
    for c in checks:
        ok = True
        try:
            c.fn()
        except Exception:  # noqa: BLE001 - every failure is reported, none aborts the run
            ok = False
            failures.append(f"{c.suite}.{c.name}\n{traceback.format_exc()}")
        s = per_suite.setdefault(c.suite, [0, 0])
        s[0] += ok
        s[1] += 1
    if stream is not None:
        for suite, (p, t) in per_suite.items():
            print(f"{suite:18s} {p}/{t}", file=stream)
        print(f"{'total':18s} {len(checks) - len(failures)}/{len(checks)}", file=stream)
    return len(checks) - len(failures), len(checks), failures
