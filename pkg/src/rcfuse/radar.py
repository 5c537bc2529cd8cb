"""Radar point clouds: data model, multi-sweep accumulation, augmentation, corruption, CSV I/O."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ConfigurationError

CSV_HEADER = ["x", "y", "z", "rcs", "vx", "vy", "sweep"]
FEATURE_DIM = 7


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    z: float
    rcs: float
    vx: float = 0.0
    vy: float = 0.0
    sweep: int = 0


@dataclass
class RadarPointCloud:
    """Column-major storage of ``N`` radar returns."""
    xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rcs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    vel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sweep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_sweeps: int = 1

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.rcs = np.asarray(self.rcs, dtype=np.float64).reshape(n)
        self.vel = np.asarray(self.vel, dtype=np.float64).reshape(n, 2)
        self.sweep = np.asarray(self.sweep, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("radar coordinates must be finite")
        if n and (self.sweep.min() < 0 or self.sweep.max() >= self.n_sweeps):
            raise ValueError(f"sweep index outside [0, {self.n_sweeps})")

    def __len__(self):
        return len(self.xyz)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIM

    @classmethod
    def from_points(cls, points: list[RadarPoint], n_sweeps: int = 1) -> "RadarPointCloud":
        if not points:
            return cls(n_sweeps=n_sweeps)
        return cls(np.array([[p.x, p.y, p.z] for p in points]), np.array([p.rcs for p in points]),
                   np.array([[p.vx, p.vy] for p in points]), np.array([p.sweep for p in points]),
                   n_sweeps)

    def point(self, i: int) -> RadarPoint:
        x, y, z = self.xyz[i]
        return RadarPoint(float(x), float(y), float(z), float(self.rcs[i]), float(self.vel[i, 0]),
                          float(self.vel[i, 1]), int(self.sweep[i]))

    def points(self) -> list[RadarPoint]:
        return [self.point(i) for i in range(len(self))]

    def subset(self, idx) -> "RadarPointCloud":
        return RadarPointCloud(self.xyz[idx].copy(), self.rcs[idx].copy(), self.vel[idx].copy(),
                               self.sweep[idx].copy(), self.n_sweeps)

    def copy(self) -> "RadarPointCloud":
        return self.subset(slice(None))


@dataclass(frozen=True)
class EgoMotion:
    """Rigid 2D transform taking a past sweep's ego frame into the current ego frame."""
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (-math.pi < self.rotation <= math.pi):
            raise ConfigurationError(f"rotation {self.rotation} outside (-pi, pi]")

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0.0 and tuple(self.translation) == (0.0, 0.0)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def accumulate_sweeps(sweeps: list[RadarPointCloud], motion: list[EgoMotion]) -> RadarPointCloud:
    """Express every sweep in the current ego frame and tag points with their sweep index."""
    if len(sweeps) != len(motion):
        raise ConfigurationError(f"{len(sweeps)} sweeps but {len(motion)} ego motions")
    if not sweeps:
        raise ConfigurationError("need at least one sweep")
    if not motion[0].is_identity:
        raise ConfigurationError("sweep 0 must carry the identity transform")
    xyz, rcs, vel, sw = [], [], [], []
    for k, (pc, m) in enumerate(zip(sweeps, motion)):
        R = _rot(m.rotation)
        p = pc.xyz.copy()
        p[:, :2] = p[:, :2] @ R.T + np.asarray(m.translation, dtype=np.float64)
        xyz.append(p)
        rcs.append(pc.rcs)
        vel.append(pc.vel @ R.T)
        sw.append(np.full(len(pc), k, dtype=np.int64))
    return RadarPointCloud(np.concatenate(xyz), np.concatenate(rcs), np.concatenate(vel),
                           np.concatenate(sw), n_sweeps=len(sweeps))


def augment(pc: RadarPointCloud, op: str, value: float | None = None) -> RadarPointCloud:
    """Apply ``flip-x``, ``flip-y``, ``rotate`` (radians) or ``scale`` (factor).

    Flips and rotations act on positions and velocities alike; scaling touches
    positions only because Doppler is a measurement, not a coordinate.
    """
    out = pc.copy()
    if op == "flip-x":
        out.xyz[:, 0] = -out.xyz[:, 0]
        out.vel[:, 0] = -out.vel[:, 0]
    elif op == "flip-y":
        out.xyz[:, 1] = -out.xyz[:, 1]
        out.vel[:, 1] = -out.vel[:, 1]
    elif op == "rotate":
        if value is None or not math.isfinite(value):
            raise ConfigurationError("rotate needs a finite angle")
        R = _rot(value)
        out.xyz[:, :2] = out.xyz[:, :2] @ R.T
        out.vel = out.vel @ R.T
    elif op == "scale":
        if value is None or not math.isfinite(value) or value <= 0:
            raise ConfigurationError("scale needs a positive finite factor")
        out.xyz = out.xyz * value
    else:
        raise ConfigurationError(f"unknown augmentation {op!r}")
    return out


def perturb_xy(pc: RadarPointCloud, amplitude: float, seed: int) -> RadarPointCloud:
    """Add independent ``U[-amplitude, amplitude]`` noise to x and y of every point."""
    if amplitude < 0:
        raise ConfigurationError("amplitude must be >= 0")
    out = pc.copy()
    if amplitude == 0 or pc.is_empty:
        return out
    rng = np.random.default_rng(seed)
    out.xyz[:, :2] += rng.uniform(-amplitude, amplitude, size=(len(pc), 2))
    return out


def drop_radar(pc: RadarPointCloud, fraction: float | str, seed: int = 0) -> RadarPointCloud:
    """Remove ``round(fraction * N)`` points (half rounds up), or everything for ``"all"``."""
    if fraction == "all":
        return RadarPointCloud(n_sweeps=pc.n_sweeps)
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError("fraction must lie in [0, 1]")
    n_drop = int(math.floor(fraction * len(pc) + 0.5))
    if n_drop == 0:
        return pc.copy()
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(len(pc))[n_drop:])
    return pc.subset(keep)


@dataclass(frozen=True)
class FeatureScale:
    xy: float = 50.0
    z: float = 5.0
    vel: float = 10.0
    use_z: bool = True


def point_features(pc: RadarPointCloud, scale: FeatureScale = FeatureScale()) -> np.ndarray:
    """``N x 7`` network input: x, y, z, rcs, vx, vy, sweep (sweep mapped to [0, 1])."""
    f = np.zeros((len(pc), FEATURE_DIM))
    f[:, 0:2] = pc.xyz[:, :2] / scale.xy
    if scale.use_z:
        f[:, 2] = pc.xyz[:, 2] / scale.z
    f[:, 3] = pc.rcs
    f[:, 4:6] = pc.vel / scale.vel
    f[:, 6] = pc.sweep / max(pc.n_sweeps - 1, 1)
    return f


def to_csv(pc: RadarPointCloud, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i in range(len(pc)):
        x, y, z = pc.xyz[i]
        w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(pc.rcs[i])),
                    repr(float(pc.vel[i, 0])), repr(float(pc.vel[i, 1])), int(pc.sweep[i])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def from_csv(source: str | Path, n_sweeps: int | None = None) -> RadarPointCloud:
    """Parse the CSV produced by :func:`to_csv` (a path or the text itself)."""
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) or (
        isinstance(source, str) and "\n" not in source and Path(source).exists()) else source
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"radar CSV header must be {','.join(CSV_HEADER)}")
    body = [r for r in rows[1:] if r]
    if not body:
        return RadarPointCloud(n_sweeps=n_sweeps or 1)
    arr = np.array([[float(v) for v in r[:6]] for r in body])
    sweep = np.array([int(r[6]) for r in body])
    ns = n_sweeps if n_sweeps is not None else int(sweep.max()) + 1
    return RadarPointCloud(arr[:, :3], arr[:, 3], arr[:, 4:6], sweep, ns)
