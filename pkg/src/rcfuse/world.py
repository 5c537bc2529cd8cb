"""Synthetic driving scenes: ground-truth boxes, simulated radar, idealised camera BEV, seg masks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .radar import EgoMotion, RadarPointCloud, accumulate_sweeps, from_csv, to_csv
from .rcs_bev import BEVGrid

VEHICLE, PEDESTRIAN, BARRIER = 0, 1, 2
CLASS_NAMES = ("vehicle", "pedestrian", "barrier")
N_CLASSES = 3
SEG_TASKS = ("vehicle", "drivable", "lane")
CAMERA_CHANNELS = ("vehicle", "pedestrian", "barrier", "drivable", "lane")
N_VIEWS = 6

# (w, l, h) ranges per class, meters
_SIZE_RANGES = {
    VEHICLE: ((1.8, 2.2), (4.0, 5.0), (1.5, 1.9)),
    PEDESTRIAN: ((0.6, 0.8), (0.6, 0.8), (1.6, 1.9)),
    BARRIER: ((0.4, 0.6), (1.8, 2.4), (0.9, 1.1)),
}


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # w, l, h
    yaw: float
    velocity: tuple[float, float]
    cls: int
    attribute: int = 0  # 1 moving, 0 stationary

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("object size must be positive")

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.center[:2])

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.size[0], self.size[1])

    def corners(self) -> np.ndarray:
        """``4 x 2`` footprint corners, counter-clockwise."""
        w, l = self.size[0], self.size[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        fwd = np.array([c, s]) * l / 2
        left = np.array([-s, c]) * w / 2
        ctr = self.xy
        return np.array([ctr + fwd + left, ctr - fwd + left, ctr - fwd - left, ctr + fwd - left])


def moving_attribute(vx: float, vy: float, threshold: float = 0.5) -> int:
    return int(math.hypot(vx, vy) > threshold)


@dataclass(frozen=True)
class RoadLayout:
    heading: float = 0.0
    offset: float = 0.0  # signed lateral offset of the centerline from the ego
    half_width: float = 7.0
    lane_width: float = 3.5
    marking_half_width: float = 0.4

    def lateral(self, xy: np.ndarray) -> np.ndarray:
        n = np.array([-math.sin(self.heading), math.cos(self.heading)])
        return xy @ n - self.offset


@dataclass
class SegMasks:
    vehicle: np.ndarray
    drivable: np.ndarray
    lane: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.vehicle, self.drivable, self.lane]).astype(np.float64)


@dataclass
class SceneFrame:
    timestamp: float
    objects: list[SceneObject]
    radar: RadarPointCloud
    camera_bev: BEVGrid
    gt_seg: SegMasks
    road: RoadLayout = field(default_factory=RoadLayout)
    seed: int = 0


# --- scene generation -------------------------------------------------------


def generate_scene(n_objects: int, area: float, seed: int, max_speed: float = 10.0,
                   class_probs=(0.6, 0.2, 0.2), min_range: float = 3.0, max_tries: int = 2000) -> list[SceneObject]:
    """Place ``n_objects`` non-overlapping boxes in ``[-area, area]^2``.

    Overlap means centre distance at most the sum of half-diagonals. Raises
    :class:`PlacementError` when the density cannot be met within ``max_tries``.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    objs: list[SceneObject] = []
    tries = 0
    while len(objs) < n_objects:
        tries += 1
        if tries > max_tries:
            raise PlacementError(f"placed {len(objs)}/{n_objects} objects after {max_tries} tries")
        cls = int(rng.choice(N_CLASSES, p=class_probs))
        (w0, w1), (l0, l1), (h0, h1) = _SIZE_RANGES[cls]
        size = (float(rng.uniform(w0, w1)), float(rng.uniform(l0, l1)), float(rng.uniform(h0, h1)))
        x, y = rng.uniform(-area, area, 2)
        yaw = float(rng.uniform(-math.pi, math.pi))
        vx, vy = rng.uniform(-max_speed, max_speed, 2)
        if math.hypot(x, y) < min_range:
            continue
        cand = SceneObject((float(x), float(y), size[2] / 2), size, yaw, (float(vx), float(vy)), cls,
                           moving_attribute(vx, vy))
        if all(np.hypot(*(cand.xy - o.xy)) > cand.half_diagonal + o.half_diagonal for o in objs):
            objs.append(cand)
    return objs


def generate_road(seed: int) -> RoadLayout:
    rng = np.random.default_rng(seed)
    return RoadLayout(float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(-4.0, 4.0)))


def step_scene(objects: list[SceneObject], dt: float) -> list[SceneObject]:
    """Constant-velocity advance of every object by ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return [replace(o, center=(o.center[0] + o.velocity[0] * dt, o.center[1] + o.velocity[1] * dt, o.center[2]))
            for o in objects]


# --- radar simulation -------------------------------------------------------


@dataclass(frozen=True)
class RadarSimParams:
    density: float = 1.0  # expected returns per meter of visible boundary
    sigma_az: float = 0.02  # radians
    sigma_range: float = 0.0
    sigma_doppler: float = 0.1
    k_rcs: float = 0.1
    rcs_noise: float = 0.02
    clutter_rate: float = 2.0  # expected clutter points per sweep
    clutter_extent: float = 50.0
    n_sweeps: int = 1
    sweep_dt: float = 0.075


def visible_edges(obj: SceneObject, eye=(0.0, 0.0)) -> list[tuple[np.ndarray, np.ndarray]]:
    """Box edges whose outward normal faces the sensor."""
    c = obj.corners()
    out = []
    for k in range(4):
        a, b = c[k], c[(k + 1) % 4]
        mid = (a + b) / 2
        normal = mid - obj.xy
        if normal @ (np.asarray(eye) - mid) > 0:
            out.append((a, b))
    return out


def _simulate_sweep(objects, p: RadarSimParams, rng, time_offset: float) -> RadarPointCloud:
    xyz, rcs, vel = [], [], []
    for o in objects:
        shifted = replace(o, center=(o.center[0] - o.velocity[0] * time_offset,
                                     o.center[1] - o.velocity[1] * time_offset, o.center[2]))
        edges = visible_edges(shifted)
        lens = np.array([np.linalg.norm(b - a) for a, b in edges])
        if not len(edges) or lens.sum() <= 0:
            continue
        n = rng.poisson(p.density * lens.sum())
        which = rng.choice(len(edges), size=n, p=lens / lens.sum())
        ts = rng.uniform(0.0, 1.0, n)
        area = o.size[0] * o.size[1]
        for e, t in zip(which, ts):
            a, b = edges[e]
            pt = a + t * (b - a)
            r = math.hypot(*pt)
            th = math.atan2(pt[1], pt[0])
            if p.sigma_az > 0:
                th += rng.normal(0.0, p.sigma_az)
            if p.sigma_range > 0:
                r += rng.normal(0.0, p.sigma_range)
            u = np.array([math.cos(th), math.sin(th)])
            xyz.append([r * u[0], r * u[1], o.center[2]])
            rcs.append(max(p.k_rcs * area + (rng.normal(0.0, p.rcs_noise) if p.rcs_noise > 0 else 0.0), 0.0))
            vr = float(np.dot(o.velocity, u))
            if p.sigma_doppler > 0:
                vr += rng.normal(0.0, p.sigma_doppler)
            vel.append(vr * u)
    n_clutter = rng.poisson(p.clutter_rate) if p.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        x, y = rng.uniform(-p.clutter_extent, p.clutter_extent, 2)
        xyz.append([x, y, 0.5])
        rcs.append(float(rng.uniform(0.0, 0.3)))
        vel.append(np.zeros(2))
    if not xyz:
        return RadarPointCloud()
    return RadarPointCloud(np.array(xyz), np.array(rcs), np.array(vel), np.zeros(len(xyz), dtype=np.int64))


def simulate_radar(objects: list[SceneObject], params: RadarSimParams, seed: int) -> RadarPointCloud:
    """Returns on the sensor-facing box boundaries with azimuth noise, RCS and radial Doppler.

    Past sweeps see objects at their earlier positions; the ego is static, so
    accumulation uses identity transforms.
    """
    rng = np.random.default_rng(seed)
    sweeps = [_simulate_sweep(objects, params, rng, k * params.sweep_dt) for k in range(params.n_sweeps)]
    return accumulate_sweeps(sweeps, [EgoMotion() for _ in sweeps])


# --- camera BEV stand-in ----------------------------------------------------


@dataclass(frozen=True)
class CameraParams:
    depth_bias: float = 0.0  # meters along the sensor ray
    depth_noise: float = 0.0  # std of per-object depth error, meters
    depth_blur: float = 0.0  # extra longitudinal spread, meters
    size_scale: float = 0.5  # blob std as a fraction of the half extent
    amplitude: float = 1.0
    road: bool = True


def camera_blob(obj: SceneObject, centers: np.ndarray, p: CameraParams, depth_error: float = 0.0) -> np.ndarray:
    ctr = obj.xy
    rng_ = np.linalg.norm(ctr)
    u = ctr / rng_ if rng_ > 0 else np.array([1.0, 0.0])
    mu = ctr + (p.depth_bias + depth_error) * u
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    R = np.array([[c, -s], [s, c]])
    sl = max(p.size_scale * obj.size[1] / 2, 1e-3)
    sw = max(p.size_scale * obj.size[0] / 2, 1e-3)
    cov = R @ np.diag([sl * sl, sw * sw]) @ R.T + p.depth_blur ** 2 * np.outer(u, u)
    inv = np.linalg.inv(cov)
    d = centers - mu
    m = np.einsum("...i,ij,...j->...", d, inv, d)
    return p.amplitude * np.exp(-0.5 * m)


def render_camera_bev(objects: list[SceneObject], grid: BEVGrid, params: CameraParams, seed: int,
                      road: RoadLayout | None = None) -> BEVGrid:
    """Per-class oriented Gaussian blobs (max-combined) plus road channels.

    Each blob centre is pushed along the sensor ray by ``depth_bias`` plus a
    per-object ``N(0, depth_noise)`` error, which is the weakness radar fixes.
    """
    rng = np.random.default_rng(seed)
    centers = grid.pixel_centers()
    data = np.zeros((len(CAMERA_CHANNELS),) + grid.shape)
    for o in objects:
        err = rng.normal(0.0, params.depth_noise) if params.depth_noise > 0 else 0.0
        data[o.cls] = np.maximum(data[o.cls], camera_blob(o, centers, params, err))
    if params.road and road is not None and objects is not None:
        drv, lane = road_masks(road, grid)
        data[3] = drv
        data[4] = lane
    return grid.with_data(data)


def drop_camera_views(camera_bev: BEVGrid, n_views_dropped: int | str, seed: int) -> BEVGrid:
    """Zero ``n`` of six azimuthal sectors (the stand-in for six cameras); ``"all"`` zeroes everything."""
    if n_views_dropped == "all":
        n_views_dropped = N_VIEWS
    if not 0 <= n_views_dropped <= N_VIEWS:
        raise ValueError(f"can drop 0..{N_VIEWS} views")
    data = camera_bev.data.copy()
    if n_views_dropped:
        rng = np.random.default_rng(seed)
        dropped = rng.choice(N_VIEWS, size=n_views_dropped, replace=False)
        sector = view_sector(camera_bev)
        data[:, np.isin(sector, dropped)] = 0.0
    return camera_bev.with_data(data)


def view_sector(grid: BEVGrid) -> np.ndarray:
    c = grid.pixel_centers()
    th = np.arctan2(c[..., 1], c[..., 0])
    return np.floor((th + math.pi) / (2 * math.pi / N_VIEWS)).astype(np.int64) % N_VIEWS


# --- segmentation ground truth ---------------------------------------------


def points_in_box(obj: SceneObject, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    d = pts - obj.xy
    along = d[..., 0] * c + d[..., 1] * s
    across = -d[..., 0] * s + d[..., 1] * c
    return (np.abs(along) <= obj.size[1] / 2) & (np.abs(across) <= obj.size[0] / 2)


def road_masks(road: RoadLayout, grid: BEVGrid) -> tuple[np.ndarray, np.ndarray]:
    lat = road.lateral(grid.pixel_centers())
    drivable = np.abs(lat) < road.half_width
    rel = np.mod(lat + road.half_width, road.lane_width)
    near = np.minimum(rel, road.lane_width - rel)
    lane = drivable & (near < road.marking_half_width)
    return drivable.astype(np.float64), lane.astype(np.float64)


def render_seg(objects: list[SceneObject], road: RoadLayout, grid: BEVGrid) -> SegMasks:
    centers = grid.pixel_centers()
    veh = np.zeros(grid.shape, dtype=bool)
    for o in objects:
        if o.cls == VEHICLE:
            veh |= points_in_box(o, centers)
    drv, lane = road_masks(road, grid)
    return SegMasks(veh.astype(np.float64), drv, lane)


def make_frame(objects: list[SceneObject], grid: BEVGrid, radar_params: RadarSimParams,
               camera_params: CameraParams, seed: int, timestamp: float = 0.0,
               road: RoadLayout | None = None, seg_grid: BEVGrid | None = None) -> SceneFrame:
    road = road if road is not None else generate_road(seed + 7)
    radar = simulate_radar(objects, radar_params, seed + 1)
    cam = render_camera_bev(objects, grid, camera_params, seed + 2, road)
    seg = render_seg(objects, road, seg_grid or grid)
    return SceneFrame(timestamp, objects, radar, cam, seg, road, seed)


# --- serialization ----------------------------------------------------------


def scene_to_dict(frame: SceneFrame, radar_csv: str | None = None) -> dict:
    g = frame.camera_bev
    return {
        "schema": "rcfuse.scene/1",
        "timestamp": frame.timestamp,
        "seed": frame.seed,
        "grid": {"height": g.height, "width": g.width, "resolution": g.resolution, "origin": list(g.origin)},
        "road": asdict(frame.road),
        "objects": [{"center": list(o.center), "size": list(o.size), "yaw": o.yaw, "velocity": list(o.velocity),
                     "class": CLASS_NAMES[o.cls], "attribute": o.attribute} for o in frame.objects],
        "radar_csv": radar_csv,
        "radar_sweeps": frame.radar.n_sweeps,
    }


def objects_from_dict(d: dict) -> list[SceneObject]:
    return [SceneObject(tuple(o["center"]), tuple(o["size"]), o["yaw"], tuple(o["velocity"]),
                        CLASS_NAMES.index(o["class"]), o.get("attribute", 0)) for o in d["objects"]]


def save_scene(frame: SceneFrame, directory: str | Path, stem: str = "scene") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_name = f"{stem}_radar.csv"
    to_csv(frame.radar, directory / csv_name)
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(scene_to_dict(frame, csv_name), indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_scene(path: str | Path, camera_params: CameraParams = CameraParams()) -> SceneFrame:
    """Rebuild a frame from its JSON record; camera and seg rasters are re-rendered from the objects."""
    path = Path(path)
    d = json.loads(path.read_text(encoding="utf-8"))
    objs = objects_from_dict(d)
    g = d["grid"]
    grid = BEVGrid(g["height"], g["width"], g["resolution"], tuple(g["origin"]))
    road = RoadLayout(**d["road"])
    radar = from_csv(path.parent / d["radar_csv"], d.get("radar_sweeps")) if d.get("radar_csv") else RadarPointCloud()
    cam = render_camera_bev(objs, grid, camera_params, d["seed"] + 2, road)
    return SceneFrame(d["timestamp"], objs, radar, cam, render_seg(objs, road, grid), road, d["seed"])
