"""Desk-scale detectors built from the fusion operators: camera-only, CAMF-fused and concat-fused."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneParams, dual_stream_backward, dual_stream_forward
from .camf import AlignLayerParams, FuseParams, camf_align, camf_align_backward, channel_spatial_fuse, \
    channel_spatial_fuse_backward
from .heads import (LOGSIZE, OBJ, OFF, VEL, VEL_SCALE, YAW, CenterHeadParams, SegParams, center_head,
                    center_head_backward, focal_loss, focal_loss_grad, seg_decode, seg_decode_backward, seg_loss)
from .numerics import CBRParams, ConfigurationError, cbr, cbr_backward, tree_items, tree_zeros
from .radar import FeatureScale, RadarPointCloud, point_features
from .rcs_bev import BEVGrid, RCSEncoderParams, ScatterSettings, rcs_bev_backward, rcs_bev_forward, \
    world_to_pixel
from .world import CAMERA_CHANNELS, N_CLASSES, SceneObject

MODES = ("camera", "camf", "concat")


@dataclass(frozen=True)
class ModelDims:
    c_cam: int = 16
    c_radar: int = 16
    c_fused: int = 16
    c_head: int = 16
    point_widths: tuple = (8, 16, 16)  # one entry per backbone stage
    width: int = 16
    heads: int = 2
    deform_heads: int = 2
    points: int = 4
    align_layers: int = 1
    seg: bool = True


@dataclass
class ToyParams:
    cam_enc: list[CBRParams]
    head: CenterHeadParams
    seg: SegParams | None = None
    backbone: BackboneParams | None = None
    rcs: RCSEncoderParams | None = None
    align: list[AlignLayerParams] = field(default_factory=list)
    fuse: FuseParams | None = None


def init_params(rng, dims: ModelDims, mode: str, grid: BEVGrid) -> ToyParams:
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    c_in = len(CAMERA_CHANNELS)
    cam = [CBRParams.init(rng, c_in, dims.c_cam), CBRParams.init(rng, dims.c_cam, dims.c_cam)]
    head_in = dims.c_cam if mode == "camera" else dims.c_fused
    p = ToyParams(cam, CenterHeadParams.init(rng, head_in, dims.c_head),
                  SegParams.init(rng, head_in, dims.c_head) if dims.seg else None)
    if mode != "camera":
        p.backbone = BackboneParams.init(rng, 7, dims.point_widths, dims.width, dims.heads, dims.heads)
        p.rcs = RCSEncoderParams.init(rng, p.backbone.out_dim, dims.c_radar, dims.c_radar)
        if mode == "camf":
            h, w = grid.shape
            p.align = [AlignLayerParams.init(rng, dims.c_cam, dims.c_radar, h, w, dims.deform_heads, dims.points)
                       for _ in range(dims.align_layers)]
        p.fuse = FuseParams.init(rng, dims.c_cam + dims.c_radar, dims.c_fused)
    return p


def mode_of(p: ToyParams) -> str:
    if p.fuse is None:
        return "camera"
    return "camf" if p.align else "concat"


# --- forward / backward -----------------------------------------------------


@dataclass
class ModelInput:
    camera: np.ndarray  # C x H x W camera BEV raster
    radar: RadarPointCloud
    grid: BEVGrid  # geometry of the detection raster


def forward(p: ToyParams, x: ModelInput, settings: ScatterSettings = ScatterSettings(), counter=None):
    """Returns ``(det_maps, seg_logits or None, cache)``."""
    cache = {}
    f = x.camera
    cam_caches = []
    for b in p.cam_enc:
        f, c = cbr(f, b, counter)
        cam_caches.append(c)
    cache["cam"] = cam_caches
    F_c = f
    if p.fuse is None:
        fused = F_c
    else:
        feats = point_features(x.radar, FeatureScale())
        pts, cache["bb"] = dual_stream_forward(feats, x.radar.xyz[:, :2], p.backbone)
        F_r, cache["rcs"] = rcs_bev_forward(pts, x.radar, x.grid, p.rcs, settings)
        cache["n_pts"] = len(feats)
        Fc_a, Fr_a = F_c, F_r
        if p.align:
            Fc_a, Fr_a, cache["align"] = camf_align(F_c, F_r, p.align, counter)
        fused, cache["fuse"] = channel_spatial_fuse(Fc_a, Fr_a, p.fuse, counter)
    cache["fused"] = fused
    maps, cache["head"] = center_head(fused, p.head)
    seg = None
    if p.seg is not None:
        seg, cache["seg"] = seg_decode(fused, p.seg)
    return maps, seg, cache


def backward(p: ToyParams, dmaps, dseg, cache, train_camera: bool = True) -> ToyParams:
    """Gradients for every parameter; the camera encoder is skipped (zero) when ``train_camera`` is off."""
    g = tree_zeros(p)
    dfused, g.head = center_head_backward(dmaps, cache["head"], p.head)
    if p.seg is not None and dseg is not None:
        ds, g.seg = seg_decode_backward(dseg, cache["seg"], p.seg)
        dfused = dfused + ds
    if p.fuse is None:
        dFc = dfused
    else:
        dFc, dFr, g.fuse = channel_spatial_fuse_backward(dfused, cache["fuse"], p.fuse)
        if p.align:
            dFc, dFr, g.align = camf_align_backward(dFc, dFr, cache["align"], p.align)
        dpts, g.rcs = rcs_bev_backward(dFr, cache["rcs"], p.rcs)
        if cache["n_pts"]:
            _, g.backbone = dual_stream_backward(dpts, cache["bb"], p.backbone)
    if train_camera:
        d = dFc
        for i in range(len(p.cam_enc) - 1, -1, -1):
            d, g.cam_enc[i] = cbr_backward(d, cache["cam"][i], p.cam_enc[i])
    return g


# --- training targets and losses --------------------------------------------


@dataclass
class DetTargets:
    heat: np.ndarray  # N_CLASSES x H x W, 1 at each object's centre pixel
    reg: np.ndarray  # 8 x H x W: offset(2), log size(2), sin/cos yaw(2), velocity/VEL_SCALE(2)
    mask: np.ndarray  # H x W regression weights
    n_pos: int


def det_targets(objects: list[SceneObject], grid: BEVGrid, reg_radius: int = 1) -> DetTargets:
    h, w = grid.shape
    heat = np.zeros((N_CLASSES, h, w))
    reg = np.zeros((8, h, w))
    mask = np.zeros((h, w))
    n = 0
    for o in objects:
        px, py = world_to_pixel(o.xy, grid)
        j, i = int(round(px)), int(round(py))
        if not (0 <= i < h and 0 <= j < w):
            continue
        heat[o.cls, i, j] = 1.0
        n += 1
        for di in range(-reg_radius, reg_radius + 1):
            for dj in range(-reg_radius, reg_radius + 1):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w and (mask[ii, jj] == 0 or (di == 0 and dj == 0)):
                    reg[:, ii, jj] = [px - jj, py - ii, math.log(o.size[0]), math.log(o.size[1]),
                                      math.sin(o.yaw), math.cos(o.yaw),
                                      o.velocity[0] / VEL_SCALE, o.velocity[1] / VEL_SCALE]
                    mask[ii, jj] = 1.0
    return DetTargets(heat, reg, mask, n)


def _smooth_l1(x, beta=1.0):
    a = np.abs(x)
    loss = np.where(a < beta, 0.5 * x * x / beta, a - 0.5 * beta)
    grad = np.where(a < beta, x / beta, np.sign(x))
    return loss, grad


def det_loss(maps: np.ndarray, t: DetTargets, reg_weight: float = 1.0, vel_weight: float = 1.0):
    """Focal heatmap loss normalised by the positive count plus masked smooth-L1 regression."""
    dmaps = np.zeros_like(maps)
    npos = max(t.n_pos, 1)
    logits = maps[OBJ]
    loss_h = focal_loss(logits, t.heat, reduction="sum") / npos
    dmaps[OBJ] = focal_loss_grad(logits, t.heat, reduction="sum") / npos
    msum = max(t.mask.sum(), 1.0)
    pred = np.concatenate([maps[OFF], maps[LOGSIZE], maps[YAW], maps[VEL]])
    l, g = _smooth_l1(pred - t.reg)
    wch = np.array([1, 1, 1, 1, 1, 1, vel_weight, vel_weight], dtype=np.float64)[:, None, None]
    wm = t.mask[None] * wch * reg_weight / msum
    loss_r = float((l * wm).sum())
    greg = g * wm
    dmaps[OFF], dmaps[LOGSIZE], dmaps[YAW], dmaps[VEL] = greg[0:2], greg[2:4], greg[4:6], greg[6:8]
    return loss_h + loss_r, dmaps, {"heat": loss_h, "reg": loss_r}


def total_loss(maps, seg_logits, det_t: DetTargets, seg_t: np.ndarray | None, seg_scale: float = 0.01,
               seg_weights=(400.0, 80.0, 200.0), vel_weight: float = 1.0):
    loss, dmaps, parts = det_loss(maps, det_t, vel_weight=vel_weight)
    dseg = None
    if seg_logits is not None and seg_t is not None:
        ls, dseg = seg_loss(seg_logits, seg_t, seg_weights)
        loss += seg_scale * ls
        dseg = dseg * seg_scale
        parts["seg"] = seg_scale * ls
    return loss, dmaps, dseg, parts


def camera_hash(p: ToyParams) -> str:
    """SHA-256 over the camera encoder parameters, used to verify the stage-2 freeze."""
    h = hashlib.sha256()
    for name, arr in tree_items(p.cam_enc):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
