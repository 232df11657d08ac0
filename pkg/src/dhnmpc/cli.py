"""Command-line entry points: validate, simulate, compare, bench, export-plots."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .controllers import (ControllerConfig, ControllerConfigError, SolverFailure,
                          canonical_variant, make_controller)
from .hydraulics import residual_report
from .model import DhnModel, default_cells
from .network import (NetworkError, check_valve_assumption, expand_bidirectional, loop_structure,
                      valve_columns, with_valves)
from .ocp import OcpOptions
from .scenario import ConfigError, Scenario, build_aroma, build_relief, load_scenario
from .simulation import long_format, run_closed_loop, save_record

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_FALLBACK = 0, 1, 2, 3
log = logging.getLogger("dhnmpc")


def _scenario(args, variant=None) -> Scenario:
    if getattr(args, "config", None):
        sc = load_scenario(args.config)
    elif getattr(args, "preset", "aroma") == "relief":
        sc = build_relief()
    else:
        sc = build_aroma()
    if variant:
        sc.variant = canonical_variant(variant)
    if getattr(args, "steps", None):
        sc.steps = args.steps
    if getattr(args, "horizon", None):
        sc.options = dataclasses.replace(sc.options, horizon=args.horizon)
    return sc


def _run(sc: Scenario, variant: str, fallback: str = "rbc"):
    model = DhnModel.build(sc.network, sc.cells, ambient=sc.ambient)
    cfg = ControllerConfig.for_variant(variant, sc, fallback=fallback)
    ctl = make_controller(cfg, model, sc)
    rec = run_closed_loop(ctl, sc)
    return model, rec


def _manifest(sc: Scenario, variant: str) -> dict:
    import casadi
    import scipy
    return {"config_hash": sc.hash(), "variant": variant, "steps": sc.steps,
            "versions": {"dhnmpc": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "casadi": casadi.__version__,
                         "python": platform.python_version()}}


def cmd_validate(args) -> int:
    sc = _scenario(args)
    spec = sc.network
    if args.no_valves:
        spec = with_valves(spec, set())
    g = expand_bidirectional(spec)
    loops = loop_structure(g)
    rep = check_valve_assumption(loops, valve_columns(g))
    print(f"nodes={g.n_nodes} expanded_edges={g.n_edges} m_r={loops.m_r} m_f={loops.m_f}")
    valves = sorted({g.physical(k).id for k in rep.valve_edges})
    print(f"valves={len(valves)} {','.join(valves)}")
    print(f"rank(F Pi)={rep.rank} m_theta={rep.m_theta} certificate={rep.certificate}")
    if not rep.assumption_satisfied:
        print(f"valve assumption FAILED; deficient loops: {rep.deficient_loops}")
        return EXIT_CONFIG
    print("valve assumption satisfied")
    return EXIT_OK


def _summary(variant, rec) -> dict:
    m = rec.metrics()
    return {"variant": variant, **m}


def cmd_simulate(args) -> int:
    sc = _scenario(args, args.variant)
    variant = sc.variant
    model, rec = _run(sc, variant, args.fallback)
    metrics = rec.metrics(sc.options.t_supply_min)
    out = Path(args.out) / f"{time.strftime('%Y%m%d-%H%M%S')}-{sc.hash()}-{variant}"
    save_record(rec, out, metrics, _manifest(sc, variant))
    _write_loops(model, rec, out / "loops.csv")
    np.savez(out / "record.npz", names=np.array(rec.names), consumers=np.array(rec.consumers),
             producers=np.array(rec.producers), **rec.arrays())
    print(json.dumps({"run_dir": str(out), **metrics}, indent=2))
    return EXIT_FALLBACK if metrics["fallbacks"] else EXIT_OK


def _write_loops(model, rec, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loop", "lhs", "rhs", "residual"])
        for k, q_r in enumerate(rec.loop_flows):
            for row in residual_report(model.hydraulics, q_r):
                w.writerow([k, *row])


def cmd_compare(args) -> int:
    variants = [canonical_variant(v) for v in args.variants.split(",")]

    def one(v):
        sc = _scenario(args, v)
        _, rec = _run(sc, v, args.fallback)
        return _summary(v, rec)

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(one, variants))
    else:
        rows = [one(v) for v in variants]
    base = next((r["cost"] for r in rows if r["variant"] == "rbc"), None)
    print(f"{'variant':8s} {'cost_EUR':>10s} {'vs_rbc_%':>9s} {'ATV_C':>8s} {'DV_%':>8s}")
    for r in rows:
        rel = f"{100 * (r['cost'] - base) / base:9.2f}" if base else f"{'-':>9s}"
        print(f"{r['variant']:8s} {r['cost']:10.2f} {rel} {r['atv']:8.3f} {r['dv']:8.3f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
    return EXIT_FALLBACK if any(r["fallbacks"] for r in rows) else EXIT_OK


def bench_rows(horizons, pipe_cells, steps: int = 3, variant: str = "mps"):
    """Median MPC solve time for every (horizon, mesh) pair."""
    rows = []
    for cells in pipe_cells:
        for n in horizons:
            sc = build_aroma(variant, steps=steps, options=OcpOptions(horizon=n))
            sc.cells = default_cells(sc.network, pipe_cells=cells)
            sc.warmup_steps = 8
            model = DhnModel.build(sc.network, sc.cells, ambient=sc.ambient)
            ctl = make_controller(ControllerConfig.for_variant(variant, sc), model, sc)
            rec = run_closed_loop(ctl, sc, steps)
            st = np.asarray(rec.solve_time)
            rows.append({"horizon": n, "states": model.n_states,
                         "median_s": float(np.median(st)), "p90_s": float(np.percentile(st, 90)),
                         "solves": len(st)})
    return rows


def cmd_bench(args) -> int:
    horizons = [int(h) for h in args.horizons.split(",")]
    cells = [int(c) for c in args.pipe_cells.split(",")]
    rows = bench_rows(horizons, cells, args.steps)
    print(f"{'horizon':>7s} {'states':>6s} {'median_s':>9s} {'p90_s':>8s}")
    for r in rows:
        print(f"{r['horizon']:7d} {r['states']:6d} {r['median_s']:9.3f} {r['p90_s']:8.3f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


class _Rec:
    """Just enough of a record for the long-format writer."""

    def __init__(self, data):
        self.producers = [str(p) for p in data["producers"]]
        self.consumers = [str(c) for c in data["consumers"]]
        self._a = {k: data[k] for k in data.files}

    def arrays(self):
        return self._a


def cmd_export(args) -> int:
    run = Path(args.run_dir)
    src = run / "record.npz"
    if not src.exists():
        raise ConfigError(f"no record.npz in {run}")
    with np.load(src) as data:
        rec = _Rec(data)
        out = Path(args.out) if args.out else run / "plot_long.csv"
        long_format(rec, out)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhnmpc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="scenario TOML file")
        sp.add_argument("--preset", choices=["aroma", "relief"], default="aroma")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--horizon", type=int)

    sp = sub.add_parser("validate", help="loop structure and valve assumption report")
    common(sp)
    sp.add_argument("--no-valves", action="store_true", help="strip all valves first")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="run one closed loop")
    common(sp)
    sp.add_argument("--variant", default=None)
    sp.add_argument("--out", default="runs")
    sp.add_argument("--fallback", choices=["rbc", "hold", "none"], default="rbc")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="cost/ATV/DV table over variants")
    common(sp)
    sp.add_argument("--variants", default="rbc,sp,sps,mp,mps")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out")
    sp.add_argument("--fallback", choices=["rbc", "hold", "none"], default="rbc")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("bench", help="median solve times over horizons and mesh sizes")
    sp.add_argument("--horizons", default="12,20,32,40")
    sp.add_argument("--pipe-cells", default="4")
    sp.add_argument("--steps", type=int, default=3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export-plots", help="long-format CSV from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ControllerConfigError, NetworkError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
