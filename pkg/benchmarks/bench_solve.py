"""Median MPC solve time on AROMA over horizons and pipe meshes.

    python3 benchmarks/bench_solve.py --horizons 12,20,32 --pipe-cells 2,4 --out bench.csv
"""

import argparse
import csv
import platform

from dhnmpc.cli import bench_rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--horizons", default="12,20,32,40")
    p.add_argument("--pipe-cells", default="2,4")
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--out")
    args = p.parse_args()
    rows = bench_rows([int(h) for h in args.horizons.split(",")],
                      [int(c) for c in args.pipe_cells.split(",")], args.steps)
    print(f"# {platform.processor() or platform.machine()}, python {platform.python_version()}")
    print(f"{'horizon':>7s} {'states':>6s} {'median_s':>9s} {'p90_s':>8s}")
    for r in rows:
        print(f"{r['horizon']:7d} {r['states']:6d} {r['median_s']:9.3f} {r['p90_s']:8.3f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
