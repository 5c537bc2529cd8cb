"""Command-line experiment runner.

Every subcommand takes ``--config PATH`` (flat ``key = value`` file),
``--seed N`` and ``--out DIR``; the last two override the config. Each run
writes a ``manifest_<command>.json`` with the config hash, the seeds and a SHA-256 of
every output file, and nothing time-dependent except ``bench.csv``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io as _stdio
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, selftest, train, world
from .attention import AttnParams
from .camf import DeformAttnParams, deform_cross_attn, dense_cross_attn, pixel_refs
from .config import ExperimentConfig, load
from .heads import GreedyTracker, Detection, objectness
from .io import write_detections, write_json, write_pgm, write_tracks
from .metrics import TrackBox, TrackEvalInput, amota, amotp, evaluate_detection, metrics_report, write_report
from .model import ModelInput, forward
from .numerics import ConfigurationError, OpCounter
from .radar import drop_radar, perturb_xy
from .rcs_bev import footprint_table, gaussian_max_map

BENCH_SIDES = (8, 16, 32, 64)
ROBUST_CONDITIONS = ("clean", "views_1", "views_3", "views_all", "radar_drop", "radar_noise")


class CommandError(RuntimeError):
    """A user-facing failure: printed without a traceback, exit code 2."""


# --- shared plumbing --------------------------------------------------------


def _config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["out_dir"] = args.out
    return cfg.with_(**kw)


def _out(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, outputs: list[str], extra: dict | None = None):
    base = 7919 * cfg.seed
    settings = {k: v for k, v in asdict(cfg).items() if k != "out_dir"}
    man = {"command": command, "config_hash": cfg.hash(), "config": settings,
           "seeds": {"seed": cfg.seed, "train_base": train.TRAIN_SEED_OFFSET + base,
                     "eval_base": train.EVAL_SEED_OFFSET + base},
           "outputs": {name: _sha(out / name) for name in sorted(outputs)}}
    if extra:
        man.update(extra)
    write_json(out / f"manifest_{command}.json", man)


def _checkpoint_path(cfg: ExperimentConfig, given: str | None, mode: str | None = None) -> Path:
    p = Path(given) if given else Path(cfg.out_dir) / f"{mode or cfg.mode}.rbn"
    if not p.exists():
        raise CommandError(f"missing checkpoint {p}; run train-toy first")
    return p


def _load_model(cfg: ExperimentConfig, path: Path):
    try:
        params, dims, grid, header = checkpoint.load(path)
    except checkpoint.CheckpointError as e:
        raise CommandError(f"{path}: {e}") from e
    want = train.dims_of(cfg)
    if dims != want or grid.shape != train.det_grid(cfg).shape:
        raise CommandError(f"{path}: checkpoint widths {asdict(dims)} do not match the config {asdict(want)}")
    return params


# --- selftest ---------------------------------------------------------------


def _checkpoint_check(path: str) -> selftest.Check:
    def loads_cleanly():
        checkpoint.load(path)
    return selftest.Check("checkpoint", f"load {path}", loads_cleanly)


def cmd_selftest(args) -> int:
    extra = [_checkpoint_check(args.checkpoint)] if args.checkpoint else []
    passed, total, failures = selftest.run_all(sys.stdout, extra)
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        names = [f"{c.suite}.{c.name}" for c in selftest.REGISTRY + extra]
        failed = {f.split("\n", 1)[0] for f in failures}
        write_json(out / "selftest.json", {"passed": passed, "total": total,
                                           "checks": {n: n not in failed for n in names}})
    return 0 if not failures else 1


# --- training and evaluation ------------------------------------------------


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    frames = train.dataset(cfg, "train")
    try:
        res = train.train_two_stage(cfg, frames)
    except train.DivergenceError as e:
        raise CommandError(f"training diverged: {e}") from e
    dims, grid = train.dims_of(cfg), train.det_grid(cfg)
    outputs = ["loss.csv"]
    checkpoint.save(out / "camera.rbn", res["camera"], dims, grid, cfg.hash())
    outputs.append("camera.rbn")
    log = train.TrainLog(list(res["log"]["camera"].rows))
    frozen = {}
    if cfg.mode != "camera":
        checkpoint.save(out / f"{cfg.mode}.rbn", res[cfg.mode], dims, grid, cfg.hash())
        outputs.append(f"{cfg.mode}.rbn")
        log.rows += res["log"][cfg.mode].rows
        before, after = res["hash"][cfg.mode]
        frozen = {"camera_hash_before": before, "camera_hash_after": after}
        if cfg.freeze_camera and before != after:
            raise CommandError("camera parameters changed during stage 2 despite the freeze")
    (out / "loss.csv").write_text(log.to_csv())
    ev = train.dataset(cfg, "eval")
    for name in ("camera",) + ((cfg.mode,) if cfg.mode != "camera" else ()):
        r = train.evaluate(res[name], ev, cfg)
        fname = "metrics.json" if name == cfg.mode else "metrics_camera.json"
        write_report(metrics_report(r.detection, miou_=r.miou, extra={"model": name}), out / fname)
        outputs.append(fname)
    write_manifest(out, "train-toy", cfg, outputs, {"freeze": frozen})
    print(f"trained {cfg.mode}; outputs in {out}")
    return 0


def _offset_rows(cache, grid_shape) -> list[list]:
    rows = []
    h, w = grid_shape
    refs = pixel_refs(h, w)
    for li, (cc, cr, *_rest) in enumerate(cache.get("align", [])):
        for direction, dc in (("radar_to_camera", cc), ("camera_to_radar", cr)):
            A, loc = dc[3], dc[4]
            off = loc - refs[:, None, None, :]
            nq, H, K, _ = off.shape
            for q in range(nq):
                for hh in range(H):
                    for k in range(K):
                        rows.append([li, direction, int(refs[q, 0]), int(refs[q, 1]), hh, k,
                                     repr(float(off[q, hh, k, 0])), repr(float(off[q, hh, k, 1])),
                                     repr(float(A[q, hh, k]))])
    return rows


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    params = _load_model(cfg, _checkpoint_path(cfg, args.checkpoint))
    frames = train.dataset(cfg, "eval")
    r = train.evaluate(params, frames, cfg)
    write_report(metrics_report(r.detection, miou_=r.miou, extra={"model": cfg.mode}), out / "eval_metrics.json")
    write_detections(out / "detections.jsonl", r.detections)
    outputs = ["eval_metrics.json", "detections.jsonl", "heat_objectness.pgm", "fused_features.pgm",
               "camera_bev.pgm"]
    x = train.model_input(frames[0], cfg)
    maps, _, cache = forward(params, x)
    write_pgm(out / "heat_objectness.pgm", objectness(maps).max(0), 0.0, 1.0)
    write_pgm(out / "fused_features.pgm", np.abs(cache["fused"]).mean(0))
    write_pgm(out / "camera_bev.pgm", x.camera[:3].max(0))
    if "rcs" in cache:
        write_pgm(out / "g_rcs.pgm", cache["rcs"][4].max(0) if cache["rcs"][4].ndim == 3 else cache["rcs"][4])
        outputs.append("g_rcs.pgm")
    if cache.get("align"):
        with open(out / "offsets.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["layer", "direction", "px", "py", "head", "point", "dx", "dy", "weight"])
            wr.writerows(_offset_rows(cache, x.grid.shape))
        outputs.append("offsets.csv")
    ck = _checkpoint_path(cfg, args.checkpoint)
    write_manifest(out, "eval", cfg, outputs, {"checkpoint": {"name": ck.name, "sha256": _sha(ck)}})
    print(f"nds {r.detection.nds:.4f} map {r.detection.map:.4f}")
    return 0


# --- tracking ---------------------------------------------------------------


def _in_grid(o: world.SceneObject, cfg: ExperimentConfig) -> bool:
    return abs(o.center[0]) < cfg.grid_extent and abs(o.center[1]) < cfg.grid_extent


def oracle_detections(objects) -> list[Detection]:
    return [Detection(tuple(o.xy), o.size[:2], o.yaw, o.velocity, o.cls, 1.0) for o in objects]


def run_tracking(cfg: ExperimentConfig, params=None, n_sequences: int = 2):
    """Track ``n_sequences`` constant-velocity sequences; ``params=None`` feeds ground truth to the tracker.

    Returns ``(TrackEvalInput, per-frame assignments, per-frame detections, per-frame ground truth)``.
    """
    gt_frames, hyp_frames, assigned, dets_all, gts = [], [], [], [], []
    base = train.EVAL_SEED_OFFSET + 7919 * cfg.seed + 500_000
    for s in range(n_sequences):
        seed = base + 1000 * s
        rng = np.random.default_rng(seed)
        n = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
        objects = world.generate_scene(n, cfg.scene_area, seed, max_speed=cfg.max_speed)
        road = world.generate_road(seed)
        tracker = GreedyTracker(cfg.gate, cfg.max_misses)
        for t in range(cfg.track_frames):
            if t:
                objects = world.step_scene(objects, cfg.track_dt)
            visible = [(i, o) for i, o in enumerate(objects) if _in_grid(o, cfg)]
            if params is None:
                dets = oracle_detections([o for _, o in visible])
            else:
                f = world.make_frame([o for _, o in visible], train.det_grid(cfg), train.radar_params(cfg),
                                     train.camera_params(cfg), seed + t + 1, t * cfg.track_dt, road,
                                     train.seg_grid(cfg))
                dets = train.predict(params, train.model_input(f, cfg), cfg)[0]
            pairs = tracker.step(dets, cfg.track_dt)
            gt_frames.append([TrackBox(100_000 * s + i, tuple(o.xy), o.cls) for i, o in visible])
            hyp_frames.append([TrackBox(100_000 * s + tid, d.center, d.cls, d.score) for tid, d in pairs])
            assigned.append(pairs)
            dets_all.append(dets)
            gts.append([o for _, o in visible])
    return TrackEvalInput(gt_frames, hyp_frames, threshold=cfg.gate), assigned, dets_all, gts


def cmd_track(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    params = None if args.oracle else _load_model(cfg, _checkpoint_path(cfg, args.checkpoint))
    inp, assigned, dets, gts = run_tracking(cfg, params, args.sequences)
    det = evaluate_detection(dets, gts, world.CLASS_NAMES)
    rep = metrics_report(det, amota(inp), amotp(inp), extra={"model": "oracle" if params is None else cfg.mode})
    write_report(rep, out / "track_metrics.json")
    write_tracks(out / "tracks.jsonl", assigned)
    write_manifest(out, "track", cfg, ["track_metrics.json", "tracks.jsonl"])
    print(f"amota {rep['amota']:.4f} amotp {rep['amotp']:.4f}")
    return 0


# --- segmentation -----------------------------------------------------------


def cmd_segment(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    params = _load_model(cfg, _checkpoint_path(cfg, args.checkpoint))
    if params.seg is None:
        raise CommandError("checkpoint has no segmentation head")
    frames = train.dataset(cfg, "eval")
    r = train.evaluate(params, frames, cfg)
    rep = metrics_report(miou_=r.miou, extra={"per_task_iou": dict(zip(world.SEG_TASKS, r.per_task_iou))})
    write_report(rep, out / "seg_metrics.json")
    _, seg, _ = train.predict(params, train.model_input(frames[0], cfg), cfg)
    gt = frames[0].gt_seg.stack()
    outputs = ["seg_metrics.json"]
    for t, name in enumerate(world.SEG_TASKS):
        write_pgm(out / f"seg_{name}_pred.pgm", seg[t], 0.0, 1.0)
        write_pgm(out / f"seg_{name}_gt.pgm", gt[t], 0.0, 1.0)
        outputs += [f"seg_{name}_pred.pgm", f"seg_{name}_gt.pgm"]
    write_manifest(out, "segment", cfg, outputs)
    print(f"miou {r.miou:.4f}")
    return 0


# --- robustness -------------------------------------------------------------


def corrupt(condition: str, cfg: ExperimentConfig):
    """Input transform ``(ModelInput, frame index) -> ModelInput`` for a robustness condition."""
    def views(n):
        return lambda x, k: ModelInput(world.drop_camera_views(x.grid.with_data(x.camera), n, 10_000 + k).data,
                                       x.radar, x.grid)
    if condition == "clean":
        return None
    if condition.startswith("views_"):
        n = condition.split("_", 1)[1]
        return views("all" if n == "all" else int(n))
    if condition == "radar_drop":
        return lambda x, k: ModelInput(x.camera, drop_radar(x.radar, "all"), x.grid)
    if condition == "radar_noise":
        return lambda x, k: ModelInput(x.camera, perturb_xy(x.radar, cfg.noise_amplitude, 20_000 + k), x.grid)
    raise ConfigurationError(f"unknown robustness condition {condition!r}")


def _robust_job(job):
    cfg, path, condition = job
    params = checkpoint.load(path)[0]
    r = train.evaluate(params, train.dataset(cfg, "eval"), cfg, corrupt(condition, cfg))
    return {"nds": r.detection.nds, "map": r.detection.map,
            "vehicle_ap": r.detection.per_class.get("vehicle", {}).get("ap", 0.0)}


def robustness_table(cfg: ExperimentConfig, paths: dict[str, Path], workers: int = 1) -> dict:
    """``{model: {condition: {nds, map, vehicle_ap}}}``; jobs may run in a process pool, results keep job order."""
    jobs = [(cfg, str(p), c) for p in paths.values() for c in ROBUST_CONDITIONS]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_robust_job, jobs))
    else:
        results = [_robust_job(j) for j in jobs]
    table: dict = {}
    for (_, p, c), r in zip(jobs, results):
        model = next(m for m, q in paths.items() if str(q) == p)
        table.setdefault(model, {})[c] = r
    return table


def markdown_table(table: dict) -> str:
    lines = ["| model | condition | NDS | mAP | vehicle AP |", "|---|---|---|---|---|"]
    for model, rows in table.items():
        for c, r in rows.items():
            lines.append(f"| {model} | {c} | {r['nds']:.4f} | {r['map']:.4f} | {r['vehicle_ap']:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_robustness(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    src = Path(args.checkpoint_dir or cfg.out_dir)
    paths = {m: src / f"{m}.rbn" for m in ("camera", "camf", "concat") if (src / f"{m}.rbn").exists()}
    if not paths:
        raise CommandError(f"missing checkpoint: no camera/camf/concat .rbn files in {src}")
    for p in paths.values():
        _load_model(cfg, p)
    table = robustness_table(cfg, paths, args.workers)
    write_json(out / "robustness.json", table)
    (out / "robustness.md").write_text(markdown_table(table))
    write_manifest(out, "robustness", cfg, ["robustness.json", "robustness.md"])
    print(markdown_table(table), end="")
    return 0


# --- bench ------------------------------------------------------------------


def bench_rows(sides=BENCH_SIDES, channels: int = 16, heads: int = 2, points: int = 4, seed: int = 0,
               repeats: int = 1, timed: bool = True) -> list[dict]:
    """Multiply counts and wall time of dense vs deformable cross-attention with every pixel as a query."""
    rows = []
    for side in sides:
        rng = np.random.default_rng(seed)
        F = rng.normal(size=(channels, side, side))
        zq = F.reshape(channels, -1).T
        refs = pixel_refs(side, side)
        dp = DeformAttnParams.init(rng, channels, channels, channels, heads, points)
        ap = AttnParams.init(rng, channels, channels, channels, channels, heads)
        for op, fn in (("vanilla", lambda c: dense_cross_attn(zq, F, ap, c)),
                       ("deformable", lambda c: deform_cross_attn(zq, refs, F, dp, c))):
            counter = OpCounter()
            fn(counter)
            wall = None
            if timed:
                best = float("inf")
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn(None)
                    best = min(best, time.perf_counter() - t0)
                wall = best
            rows.append({"side": side, "pixels": side * side, "op": op, "mults": counter.mults, "wall_s": wall})
    return rows


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    sides = tuple(int(s) for s in args.sides.split(",")) if args.sides else BENCH_SIDES
    rows = bench_rows(sides, seed=cfg.seed, repeats=args.repeats)
    buf = _stdio.StringIO()
    wr = csv.DictWriter(buf, ["side", "pixels", "op", "mults", "wall_s"], lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    (out / "bench.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


# --- plot -------------------------------------------------------------------


def loss_raster(csv_text: str, width: int = 200, height: int = 100) -> np.ndarray:
    """Rasterise the loss column of a training log (log scale), stages side by side in step order."""
    rows = list(csv.DictReader(_stdio.StringIO(csv_text)))
    img = np.zeros((height, width))
    if not rows:
        return img
    y = np.log10(np.maximum([float(r["loss"]) for r in rows], 1e-12))
    lo, hi = float(y.min()), float(y.max())
    span = hi - lo if hi > lo else 1.0
    cols = np.minimum((np.arange(len(y)) * width) // len(y), width - 1)
    rws = np.round((y - lo) / span * (height - 1)).astype(int)
    img[rws, cols] = 1.0
    return img


def cmd_plot(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    frame = train.dataset(cfg.with_(eval_frames=1), "eval")[0]
    grid = train.det_grid(cfg)
    outputs = []
    for c, name in enumerate(world.CAMERA_CHANNELS):
        write_pgm(out / f"plot_camera_{name}.pgm", frame.camera_bev.data[c])
        outputs.append(f"plot_camera_{name}.pgm")
    g = gaussian_max_map(footprint_table(frame.radar, grid), grid.shape)
    write_pgm(out / "plot_g_rcs.pgm", g, 0.0, 1.0)
    seg = frame.gt_seg.stack()
    for t, name in enumerate(world.SEG_TASKS):
        write_pgm(out / f"plot_gt_{name}.pgm", seg[t], 0.0, 1.0)
    outputs += ["plot_g_rcs.pgm"] + [f"plot_gt_{n}.pgm" for n in world.SEG_TASKS]
    loss = Path(args.loss) if args.loss else Path(cfg.out_dir) / "loss.csv"
    if loss.exists():
        write_pgm(out / "plot_loss.pgm", loss_raster(loss.read_text()), 0.0, 1.0)
        outputs.append("plot_loss.pgm")
    write_manifest(out, "plot", cfg, outputs)
    print(f"wrote {len(outputs)} images to {out}")
    return 0


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcfuse", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.set_defaults(fn=fn)
        return p

    p = add("selftest", cmd_selftest, "run the oracle and invariant checks")
    p.add_argument("--checkpoint", help="also verify this checkpoint file")
    add("train-toy", cmd_train_toy, "two-stage training on synthetic scenes")
    for name, fn, help_ in (("eval", cmd_eval, "detection metrics, heatmaps and offsets"),
                            ("segment", cmd_segment, "BEV segmentation metrics and masks")):
        add(name, fn, help_).add_argument("--checkpoint")
    p = add("track", cmd_track, "tracking metrics on generated sequences")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="track ground-truth detections instead of a model")
    p.add_argument("--sequences", type=int, default=2)
    p = add("robustness", cmd_robustness, "view drops, radar drop and radar noise")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--workers", type=int, default=1)
    p = add("bench", cmd_bench, "dense vs deformable cross-attention cost")
    p.add_argument("--sides", help="comma-separated BEV sides (default 8,16,32,64)")
    p.add_argument("--repeats", type=int, default=1)
    p = add("plot", cmd_plot, "PGM renderings of a scene and the loss curve")
    p.add_argument("--loss", help="loss CSV (default OUT/loss.csv)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CommandError, ConfigurationError, FileNotFoundError) as e:
        print(f"rcfuse {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
