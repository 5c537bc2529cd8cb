"""Train camera, CAMF and concat models per seed and score every corruption condition.

    python scripts/robustness_sweep.py --seeds 0 1 2 --out runs/robust
"""
import argparse
import json
from pathlib import Path

from rcfuse import checkpoint, cli, train
from rcfuse.config import ExperimentConfig, load


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--noise", type=float, nargs="+", default=[1.0], help="radar position noise amplitudes (m)")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/robust")
    args = ap.parse_args()
    base = load(args.config) if args.config else ExperimentConfig()
    out = Path(args.out)
    results = {}
    for seed in args.seeds:
        cfg = base.with_(seed=seed)
        d = out / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        models = train.train_two_stage(cfg, modes=("camf", "concat"))
        dims, grid = train.dims_of(cfg), train.det_grid(cfg)
        paths = {}
        for mode in ("camera", "camf", "concat"):
            paths[mode] = d / f"{mode}.rbn"
            checkpoint.save(paths[mode], models[mode], dims, grid, cfg.hash())
        for amp in args.noise:
            table = cli.robustness_table(cfg.with_(noise_amplitude=amp), paths, args.workers)
            results[f"seed{seed}/noise{amp:g}"] = table
            print(f"seed {seed}, noise {amp:g} m")
            print(cli.markdown_table(table), end="")
    (out / "robustness_sweep.json").write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
