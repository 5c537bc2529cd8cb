"""Small file formats: PGM images, raw float64 tensors with JSON sidecars, JSON-lines records."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .heads import Detection, Track


def write_pgm(path: str | Path, img: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM; values are linearly mapped from ``[lo, hi]`` (default: data range) to 0..255.

    Row 0 of the array is written last so that +y points up in the image.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    lo = float(np.min(a)) if lo is None else lo
    hi = float(np.max(a)) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.round((a - lo) * scale), 0, 255).astype(np.uint8)[::-1]
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)[::-1]


def save_tensor(path: str | Path, arr: np.ndarray, meta: dict | None = None) -> None:
    """Little-endian float64 payload at ``path`` plus ``path.json`` holding shape and metadata."""
    path = Path(path)
    a = np.ascontiguousarray(arr, dtype="<f8")
    path.write_bytes(a.tobytes())
    side = {"dtype": "float64-le", "shape": list(a.shape), **(meta or {})}
    Path(str(path) + ".json").write_text(json.dumps(side, sort_keys=True) + "\n")


def load_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(side["shape"]).copy()
    return arr, side


def _finite(x: float):
    return x if math.isfinite(x) else None


def detection_to_dict(d: Detection) -> dict:
    return {"center": list(d.center), "size": list(d.size), "yaw": d.yaw, "velocity": list(d.velocity),
            "cls": d.cls, "score": d.score}


def detection_from_dict(r: dict) -> Detection:
    return Detection(tuple(r["center"]), tuple(r["size"]), r["yaw"], tuple(r["velocity"]), r["cls"], r["score"])


def write_detections(path: str | Path, frames: list[list[Detection]]) -> None:
    """One JSON object per detection, tagged with its frame index."""
    with open(path, "w", encoding="utf-8") as fh:
        for f, dets in enumerate(frames):
            for d in dets:
                fh.write(json.dumps({"frame": f, **detection_to_dict(d)}, sort_keys=True) + "\n")


def read_detections(path: str | Path, n_frames: int | None = None) -> list[list[Detection]]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    n = n_frames if n_frames is not None else (max((r["frame"] for r in rows), default=-1) + 1)
    out: list[list[Detection]] = [[] for _ in range(n)]
    for r in rows:
        out[r["frame"]].append(detection_from_dict(r))
    return out


def write_tracks(path: str | Path, frames: list[list[tuple[int, Detection]]]) -> None:
    """Per-frame track assignments as JSON lines: ``{frame, track_id, ...detection}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for f, assigned in enumerate(frames):
            for tid, d in assigned:
                fh.write(json.dumps({"frame": f, "track_id": tid, **detection_to_dict(d)}, sort_keys=True) + "\n")


def track_to_dict(t: Track) -> dict:
    return {"id": t.id, "age": t.age, "misses": t.misses, "detection": detection_to_dict(t.detection),
            "history": [detection_to_dict(d) for d in t.history]}


def clean_json(obj):
    """Replace NaN/inf by ``null`` recursively so the output is strict JSON."""
    if isinstance(obj, float):
        return _finite(obj)
    if isinstance(obj, dict):
        return {k: clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.floating):
        return _finite(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(clean_json(obj), indent=2, sort_keys=True, allow_nan=False) + "\n",
                          encoding="utf-8")
