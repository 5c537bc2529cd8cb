"""Multiply counts and wall time of dense vs deformable cross-attention as the BEV side grows.

    python scripts/bench_scaling.py --sides 8 16 32 64
"""
import argparse

from rcfuse.cli import bench_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--sides", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    rows = {(r["side"], r["op"]): r for r in bench_rows(tuple(args.sides), repeats=args.repeats)}
    prev = None
    print(f"{'side':>5} {'dense mults':>14} {'deform mults':>13} {'ratio':>8} {'growth':>7} {'dense s':>9} {'deform s':>9}")
    for s in args.sides:
        v, d = rows[(s, "vanilla")], rows[(s, "deformable")]
        ratio = v["mults"] / d["mults"]
        growth = f"{ratio / prev:.2f}x" if prev else ""
        print(f"{s:5d} {v['mults']:14d} {d['mults']:13d} {ratio:8.2f} {growth:>7} {v['wall_s']:9.4f} {d['wall_s']:9.4f}")
        prev = ratio


if __name__ == "__main__":
    main()
