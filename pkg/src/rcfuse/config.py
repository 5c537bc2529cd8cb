"""Experiment configuration in a flat ``key = value`` text format.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := key ws? '=' ws? value ws? comment?
    key     := [a-z_][a-z0-9_]*
    value   := 'true' | 'false' | integer | float | '"' chars '"'

Every key must name a field of :class:`ExperimentConfig`; values are
coerced to the field's type. Missing keys keep their defaults.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .numerics import ConfigurationError

_ENTRY = re.compile(r'^([a-z_][a-z0-9_]*)\s*=\s*("(?:[^"\\]|\\.)*"|[^#\s]+)\s*(#.*)?$')


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/toy"
    mode: str = "camf"  # camera | camf | concat
    # grid
    grid_size: int = 32
    grid_extent: float = 16.0
    seg_upsample: int = 2
    # scenes
    n_objects_min: int = 3
    n_objects_max: int = 6
    scene_area: float = 14.0
    max_speed: float = 8.0
    # camera stand-in
    depth_bias: float = 1.0
    depth_noise: float = 1.0
    depth_blur: float = 0.0
    # radar simulation
    radar_density: float = 1.0
    sigma_az: float = 0.02
    sigma_doppler: float = 0.1
    clutter_rate: float = 2.0
    n_sweeps: int = 1
    # model
    c_cam: int = 16
    c_radar: int = 16
    c_fused: int = 16
    c_head: int = 16
    stages: int = 3
    point_width: int = 16
    width: int = 16
    heads: int = 2
    deform_heads: int = 2
    points: int = 4
    align_layers: int = 1
    seg: bool = True
    # training
    train_frames: int = 150
    eval_frames: int = 40
    stage1_steps: int = 600
    stage2_steps: int = 1200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    freeze_camera: bool = True
    camera_drop_prob: float = 0.2
    radar_noise_aug: float = 0.0
    seg_scale: float = 0.01
    vel_weight: float = 10.0
    seg_weight_vehicle: float = 400.0
    seg_weight_drivable: float = 80.0
    seg_weight_lane: float = 200.0
    # evaluation, tracking, robustness
    score_thresh: float = 0.05
    nms_radius: float = 1.5
    noise_amplitude: float = 1.0
    track_frames: int = 10
    track_dt: float = 0.5
    gate: float = 2.0
    max_misses: int = 3

    def __post_init__(self):
        if self.mode not in ("camera", "camf", "concat"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.n_objects_min > self.n_objects_max or self.n_objects_min < 0:
            raise ConfigurationError("object count range is empty")
        if self.stages < 1 or self.grid_size < 2 or self.points < 1 or self.heads < 1:
            raise ConfigurationError("model sizes must be positive")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigurationError("step counts must be >= 0")

    @property
    def seg_weights(self) -> tuple[float, float, float]:
        return self.seg_weight_vehicle, self.seg_weight_drivable, self.seg_weight_lane

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        """SHA-256 of the serialized config; the output location is not part of the experiment."""
        return hashlib.sha256(serialize(replace(self, out_dir="")).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _coerce(key: str, raw: str, typ):
    try:
        if typ in (bool, "bool"):
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (str, "str"):
            if not (len(raw) >= 2 and raw[0] == raw[-1] == '"'):
                raise ValueError
            return json.loads(raw)
    except ValueError:
        pass
    raise ConfigurationError(f"bad value for {key}: {raw}")


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        m = _ENTRY.match(s)
        if not m:
            raise ConfigurationError(f"line {n}: cannot parse {line!r}")
        key, raw = m.group(1), m.group(2)
        if key not in types:
            raise ConfigurationError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return replace(base or ExperimentConfig(), **values)


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, str):
            s = json.dumps(v)
        else:
            s = repr(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


def load(path: str | Path | None) -> ExperimentConfig:
    return ExperimentConfig() if path is None else parse(Path(path).read_text(encoding="utf-8"))
