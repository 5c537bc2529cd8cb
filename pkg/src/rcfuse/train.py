"""Synthetic datasets, AdamW, the two-stage training protocol and evaluation for the toy detectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import world
from .config import ExperimentConfig
from .heads import Detection, decode_detections, seg_masks
from .metrics import DetectionReport, evaluate_detection, miou
from .model import (ModelDims, ModelInput, ToyParams, backward, camera_hash, det_targets, forward,
                    init_params, total_loss)
from .numerics import tree_copy, tree_items, tree_zeros
from .radar import perturb_xy
from .rcs_bev import BEVGrid

TRAIN_SEED_OFFSET = 1_000_003
EVAL_SEED_OFFSET = 2_000_029


class DivergenceError(RuntimeError):
    pass


# --- data -------------------------------------------------------------------


def det_grid(cfg: ExperimentConfig) -> BEVGrid:
    return BEVGrid.centered(cfg.grid_size, cfg.grid_extent)


def seg_grid(cfg: ExperimentConfig) -> BEVGrid:
    return BEVGrid.centered(cfg.grid_size * cfg.seg_upsample, cfg.grid_extent)


def radar_params(cfg: ExperimentConfig) -> world.RadarSimParams:
    return world.RadarSimParams(density=cfg.radar_density, sigma_az=cfg.sigma_az, sigma_doppler=cfg.sigma_doppler,
                                clutter_rate=cfg.clutter_rate, clutter_extent=cfg.grid_extent,
                                n_sweeps=cfg.n_sweeps)


def camera_params(cfg: ExperimentConfig) -> world.CameraParams:
    return world.CameraParams(depth_bias=cfg.depth_bias, depth_noise=cfg.depth_noise, depth_blur=cfg.depth_blur)


def make_scene(cfg: ExperimentConfig, seed: int, objects=None, timestamp: float = 0.0) -> world.SceneFrame:
    rng = np.random.default_rng(seed)
    if objects is None:
        n = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
        objects = world.generate_scene(n, cfg.scene_area, seed, max_speed=cfg.max_speed)
    return world.make_frame(objects, det_grid(cfg), radar_params(cfg), camera_params(cfg), seed,
                            timestamp, seg_grid=seg_grid(cfg))


def dataset(cfg: ExperimentConfig, split: str) -> list[world.SceneFrame]:
    if split == "train":
        n, off = cfg.train_frames, TRAIN_SEED_OFFSET
    elif split == "eval":
        n, off = cfg.eval_frames, EVAL_SEED_OFFSET
    else:
        raise ValueError(f"unknown split {split!r}")
    base = off + 7919 * cfg.seed
    return [make_scene(cfg, base + k) for k in range(n)]


def model_input(frame: world.SceneFrame, cfg: ExperimentConfig) -> ModelInput:
    return ModelInput(frame.camera_bev.data, frame.radar, det_grid(cfg))


def dims_of(cfg: ExperimentConfig) -> ModelDims:
    widths = tuple(max(cfg.point_width // 2 ** (cfg.stages - 1 - s), 4) for s in range(cfg.stages))
    return ModelDims(cfg.c_cam, cfg.c_radar, cfg.c_fused, cfg.c_head, widths, cfg.width, cfg.heads,
                     cfg.deform_heads, cfg.points, cfg.align_layers, cfg.seg)


# --- optimiser --------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a parameter tree, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4,
                 frozen_prefixes: tuple[str, ...] = ()):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.frozen = frozen_prefixes
        self.m = tree_zeros(params)
        self.v = tree_zeros(params)
        self.t = 0
        self._slots = [(self._trainable(n), p, m, v) for (n, p), (_, m), (_, v)
                       in zip(tree_items(params), tree_items(self.m), tree_items(self.v))]

    def _trainable(self, name: str) -> bool:
        return not any(name == f or name.startswith(f + ".") for f in self.frozen)

    def step(self, params, grads, lr: float | None = None):
        """``params`` must be the tree given at construction (its leaves are updated in place)."""
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (train, p, m, v), (_, g) in zip(self._slots, tree_items(grads)):
            if not train:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * self.wd * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for _, g in tree_items(grads)))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for _, g in tree_items(grads):
            g *= s
    return total


# --- training ---------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        if not self.rows:
            return "stage,step,loss,heat,reg,seg\n"
        keys = ["stage", "step", "loss", "heat", "reg", "seg"]
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(repr(r.get(k, 0.0)) if k not in ("stage", "step") else str(r[k]) for k in keys))
        return "\n".join(lines) + "\n"


def _augment(frame: world.SceneFrame, cfg: ExperimentConfig, rng, camera_drop: bool) -> ModelInput:
    x = model_input(frame, cfg)
    if camera_drop and cfg.camera_drop_prob > 0 and rng.random() < cfg.camera_drop_prob:
        x = ModelInput(np.zeros_like(x.camera), x.radar, x.grid)
    if cfg.radar_noise_aug > 0 and len(x.radar):
        amp = float(rng.uniform(0.0, cfg.radar_noise_aug))
        x = ModelInput(x.camera, perturb_xy(x.radar, amp, int(rng.integers(2**31))), x.grid)
    return x


def train_stage(params: ToyParams, frames, cfg: ExperimentConfig, steps: int, stage: int, log: TrainLog,
                frozen: tuple[str, ...] = (), camera_drop: bool = False, rng_seed: int = 0) -> ToyParams:
    """Single-frame AdamW steps with cosine learning-rate decay."""
    if steps == 0:
        return params
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay, frozen_prefixes=frozen)
    rng = np.random.default_rng(rng_seed)
    targets = [det_targets(f.objects, det_grid(cfg)) for f in frames]
    train_cam = "cam_enc" not in frozen
    for step in range(steps):
        k = int(rng.integers(len(frames)))
        x = _augment(frames[k], cfg, rng, camera_drop)
        maps, seg, cache = forward(params, x)
        loss, dmaps, dseg, parts = total_loss(maps, seg, targets[k], frames[k].gt_seg.stack(), cfg.seg_scale,
                                              cfg.seg_weights, cfg.vel_weight)
        if not math.isfinite(loss):
            raise DivergenceError(f"stage {stage} step {step}: loss is {loss}")
        grads = backward(params, dmaps, dseg, cache, train_camera=train_cam)
        clip_global_norm(grads, cfg.grad_clip)
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        opt.step(params, grads, lr)
        log.rows.append({"stage": stage, "step": step, "loss": loss, **parts})
    return params


@dataclass
class TrainResult:
    camera: ToyParams
    fused: ToyParams | None
    log: TrainLog
    hash_before: str
    hash_after: str


def train_two_stage(cfg: ExperimentConfig, frames=None, modes: tuple[str, ...] | None = None) -> dict:
    """Stage 1 trains the camera-only model; stage 2 copies its camera encoder and head into each fused
    model, freezes the encoder, and trains the rest. Returns ``{mode: params}`` plus logs and hashes."""
    frames = frames if frames is not None else dataset(cfg, "train")
    modes = modes or ((cfg.mode,) if cfg.mode != "camera" else ())
    grid = det_grid(cfg)
    dims = dims_of(cfg)
    log = TrainLog()
    cam = init_params(np.random.default_rng(cfg.seed), dims, "camera", grid)
    train_stage(cam, frames, cfg, cfg.stage1_steps, 1, log, rng_seed=cfg.seed * 31 + 1)
    out = {"camera": cam, "log": {"camera": log}, "hash": {}}
    for mode in modes:
        rng = np.random.default_rng(cfg.seed + 17 * (1 + ("camf", "concat").index(mode)))
        p = init_params(rng, dims, mode, grid)
        p.cam_enc = tree_copy(cam.cam_enc)
        if dims.c_fused == dims.c_cam:
            p.head = tree_copy(cam.head)
            if cam.seg is not None:
                p.seg = tree_copy(cam.seg)
        before = camera_hash(p)
        mlog = TrainLog()
        frozen = ("cam_enc",) if cfg.freeze_camera else ()
        train_stage(p, frames, cfg, cfg.stage2_steps, 2, mlog, frozen, camera_drop=True, rng_seed=cfg.seed * 31 + 2)
        out[mode] = p
        out["log"][mode] = mlog
        out["hash"][mode] = (before, camera_hash(p))
    return out


# --- evaluation -------------------------------------------------------------


@dataclass
class EvalResult:
    detection: DetectionReport
    miou: float | None
    per_task_iou: list[float] | None
    detections: list[list[Detection]]


def predict(params: ToyParams, x: ModelInput, cfg: ExperimentConfig):
    maps, seg, _ = forward(params, x)
    dets = decode_detections(maps, x.grid, cfg.score_thresh, cfg.nms_radius)
    return dets, (seg_masks(seg) if seg is not None else None), maps


def evaluate(params: ToyParams, frames, cfg: ExperimentConfig, transform=None) -> EvalResult:
    """Detection and segmentation metrics over ``frames``; ``transform`` may corrupt each input."""
    dets_all, gts, ious = [], [], []
    for k, f in enumerate(frames):
        x = model_input(f, cfg)
        if transform is not None:
            x = transform(x, k)
        dets, seg, _ = predict(params, x, cfg)
        dets_all.append(dets)
        gts.append(f.objects)
        if seg is not None:
            ious.append(miou(seg, f.gt_seg.stack())[0])
    rep = evaluate_detection(dets_all, gts, world.CLASS_NAMES)
    per = list(np.mean(ious, axis=0)) if ious else None
    return EvalResult(rep, float(np.mean(per)) if per else None, per, dets_all)
