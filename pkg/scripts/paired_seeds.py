"""Camera-only vs fused vs concat on paired seeds: translation, velocity and NDS per seed.

    python scripts/paired_seeds.py --seeds 0 1 2 3 4 --out runs/paired
"""
import argparse
import json
import time
from pathlib import Path

from rcfuse import train
from rcfuse.config import ExperimentConfig, load


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="key = value config file (default: built-in defaults)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/paired")
    args = ap.parse_args()
    base = load(args.config) if args.config else ExperimentConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        cfg = base.with_(seed=seed)
        t0 = time.perf_counter()
        models = train.train_two_stage(cfg, modes=("camf", "concat"))
        ev = train.dataset(cfg, "eval")
        for mode in ("camera", "camf", "concat"):
            d = train.evaluate(models[mode], ev, cfg).detection
            rows.append({"seed": seed, "model": mode, "nds": d.nds, "map": d.map, "mate": d.mate, "mave": d.mave})
            print(f"seed {seed} {mode:7s} NDS {d.nds:.3f} mAP {d.map:.3f} ATE {d.mate:.3f} AVE {d.mave:.3f}")
        print(f"seed {seed}: {time.perf_counter() - t0:.0f} s")
    (out / "paired_seeds.json").write_text(json.dumps(rows, indent=1))
    wins = {k: sum(r[k] < c[k] for r, c in zip(rows[1::3], rows[0::3])) for k in ("mate", "mave")}
    print(f"fused below camera: ATE {wins['mate']}/{len(args.seeds)}, AVE {wins['mave']}/{len(args.seeds)}")


if __name__ == "__main__":
    main()
