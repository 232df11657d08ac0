"""Plant model, closed-loop harness and performance metrics."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controllers import Action, ControllerConfig, RuleBasedController, _injections
from .model import DhnModel
from .scenario import Scenario
from .thermal import ImplicitEuler

log = logging.getLogger(__name__)


class PlantError(RuntimeError):
    def __init__(self, message, last_good_time):
        super().__init__(f"{message} (last good time {last_good_time:.1f} s)")
        self.last_good_time = last_good_time


def compute_atv(inlet_temps, t_min: float) -> float:
    """Average temperature violation over steps and consumers, degC."""
    t = np.asarray(inlet_temps, dtype=float)
    if t.size == 0:
        return 0.0
    return float(np.maximum(0.0, t_min - t).sum() / t.size)


def compute_dv(demand, flows, t_in, t_out, rho: float, cp: float):
    """Demand violation in percent; per-term shortfall only.

    Returns ``(dv, flagged)``; ``flagged`` is true when total demand is zero.
    """
    d = np.asarray(demand, dtype=float)
    delivered = rho * cp * np.asarray(flows, dtype=float) * (np.asarray(t_in) - np.asarray(t_out))
    total = d.sum()
    if total <= 0.0:
        return 0.0, True
    return float(100.0 * np.maximum(d - delivered, 0.0).sum() / total), False


class Plant:
    """High-fidelity plant: ``beta``-refined mesh, fixed implicit-Euler substeps."""

    def __init__(self, controller_model: DhnModel, beta: int = 4, safety: int = 4,
                 t_floor: float = 30.0):
        self.coarse = controller_model
        self.model = controller_model.refined(beta)
        self.beta = beta
        self.safety = safety
        self.t_floor = t_floor - self.model.ambient
        self.euler = ImplicitEuler(self.model.thermal, self.model.layout)
        tgc, tgf = self.coarse.thermal, self.model.thermal
        # fine index groups of each coarse node
        groups = [[j] for j in range(tgc.n_junctions)]
        for cc, cf in zip(tgc.cells, tgf.cells):
            for i in range(len(cc)):
                groups.append(list(cf[i * beta:(i + 1) * beta]))
        self.groups = groups
        self.to_coarse = np.zeros((tgc.n_nodes, tgf.n_nodes))
        self.to_fine = np.zeros((tgf.n_nodes, tgc.n_nodes))
        for i, grp in enumerate(groups):
            v = tgf.volume[grp]
            w = v / v.sum() if v.sum() > 0 else np.full(len(grp), 1.0 / len(grp))
            self.to_coarse[i, grp] = w
            self.to_fine[grp, i] = 1.0
        g = self.model.graph
        self.hx_index = {n: g.edge_index(self.model.hx_edge(n)) for n in self.model.layout.names}
        self.inlets = {n: self.model.inlet_node(n) for n in self.model.consumer_names}
        self.outlets = {n: tgf.edge_cells(self.model.hx_edge(n))[-1]
                        for n in self.model.consumer_names}

    def downsample(self, x_hf) -> np.ndarray:
        return self.to_coarse @ np.asarray(x_hf, dtype=float)

    def upsample(self, x) -> np.ndarray:
        return self.to_fine @ np.asarray(x, dtype=float)

    def extraction(self, x, q, demand: dict) -> dict:
        """Heat a consumer can actually draw, limited by its return-floor temperature."""
        tg = self.model.thermal
        out = {}
        for name, d in demand.items():
            qc = q[self.hx_index[name]]
            avail = tg.rho * tg.cp * qc * max(x[self.inlets[name]] - self.t_floor, 0.0)
            out[name] = min(d, avail) if d > 0 else d
        return out

    def simulate_interval(self, x_hf, q, demand: dict, injections: np.ndarray, tau: float):
        """Advance ``tau`` seconds with flows and producer powers held.

        ``demand`` maps consumers to heat demand (W, negative means surplus);
        ``injections`` holds producer powers on the layout columns.
        Returns the new state and interval means used by the metrics.
        """
        n_sub = self.beta * self.safety
        h = tau / n_sub
        q = np.asarray(q, dtype=float)
        lay = self.model.layout
        x = np.asarray(x_hf, dtype=float)
        acc = {n: np.zeros(3) for n in self.inlets}  # delivered W, t_in, t_out
        self.euler.factor(q, h)
        for s in range(n_sub):
            w = np.array(injections, dtype=float)
            drawn = self.extraction(x, q, demand)
            for name, e in drawn.items():
                w[lay.index(name)] -= e
            x_new = self.euler.step(x, q, w, h)
            if not np.all(np.isfinite(x_new)):
                raise PlantError("non-finite plant state", s * h)
            x = x_new
            for name in acc:
                acc[name] += (drawn[name], x[self.inlets[name]], x[self.outlets[name]])
        means = {n: a / n_sub for n, a in acc.items()}
        return x, means


@dataclass
class ClosedLoopRecord:
    names: list
    consumers: list
    producers: list
    tau: float
    ambient: float
    time: list = field(default_factory=list)          # h, end of each interval
    loop_flows: list = field(default_factory=list)
    edge_flows: list = field(default_factory=list)
    power: list = field(default_factory=list)         # W per producer
    demand: list = field(default_factory=list)        # W per consumer
    drawn: list = field(default_factory=list)
    consumer_flow: list = field(default_factory=list)
    t_in: list = field(default_factory=list)          # degC, interval means
    t_out: list = field(default_factory=list)
    states: list = field(default_factory=list)        # controller dimension, degC
    price: list = field(default_factory=list)
    cost: list = field(default_factory=list)          # EUR per step
    status: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    storage_net: list = field(default_factory=list)   # m^3/s charge minus discharge
    injecting: list = field(default_factory=list)     # consumer also injects heat this step

    def arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in (
            "time", "loop_flows", "edge_flows", "power", "demand", "drawn", "consumer_flow",
            "t_in", "t_out", "states", "price", "cost", "solve_time", "storage_net",
            "injecting")}

    def metrics(self, t_supply_min: float = 70.0, rho: float = 981.0,
                cp: float = 4182.0) -> dict:
        if not self.time:
            return {"cost": 0.0, "atv": 0.0, "dv": 0.0, "steps": 0, "dv_undefined": False,
                    "solve_median": 0.0, "solve_p90": 0.0, "fallbacks": 0}
        a = self.arrays()
        # a prosumer that injects in the same exchanger has no measurable draw
        active = (a["demand"] > 0) & ~a["injecting"].astype(bool)
        dem = np.where(active, a["demand"], 0.0)
        dv, flag = compute_dv(dem, a["consumer_flow"] * active, a["t_in"], a["t_out"], rho, cp)
        st = a["solve_time"]
        return {"cost": float(a["cost"].sum()), "atv": compute_atv(a["t_in"], t_supply_min),
                "dv": dv, "dv_undefined": flag, "steps": len(self.time),
                "solve_median": float(np.median(st)), "solve_p90": float(np.percentile(st, 90)),
                "fallbacks": int(sum(self.fallback)),
                "energy_MWh": float(a["power"].sum() * self.tau / 3.6e9)}


def initial_state(plant: Plant, scenario: Scenario) -> np.ndarray:
    """Uniform supply/return temperatures, layered tank, then an RBC warm-up."""
    m = plant.model
    tg = m.thermal
    ini = scenario.initial
    amb = m.ambient
    side = m.spec.side
    x = np.zeros(tg.n_nodes)
    for j, node in enumerate(m.graph.nodes):
        x[j] = (ini["supply"] if side[node] == "supply" else ini["return"]) - amb
    for k, e in enumerate(m.spec.edges):
        t_node = m.graph.nodes.index(e.tail)
        for c in tg.cells[k]:
            x[c] = x[t_node]
    if scenario.warmup_steps:
        cfg = ControllerConfig.for_variant("rbc", scenario)
        rbc = RuleBasedController(cfg, plant.coarse, scenario)
        for k in range(scenario.warmup_steps):
            act = rbc(k % scenario.steps, plant.downsample(x))
            x, _ = _advance(plant, scenario, cfg.prosumer_mode, k % scenario.steps, x, act)
    sc = m.storage_cells
    if len(sc):
        n_hot = int(round(ini["storage_fill"] * len(sc)))
        x[sc[:n_hot]] = ini["storage_hot"] - amb
        x[sc[n_hot:]] = ini["storage_cold"] - amb
    return x


def _advance(plant: Plant, scenario: Scenario, mode: str, k: int, x, act: Action):
    m = plant.model
    q = m.edge_flows(act.loop_flows)
    fixed = _injections(scenario, m, mode, k, 1)[0]
    demand = {}
    inj = np.zeros(len(m.layout.names))
    for j, name in enumerate(m.layout.names):
        if m.layout.kinds[j] != "producer":
            demand[name] = -fixed[j]
    for name, p in act.power.items():
        col = name if name in m.layout.names else scenario.prosumer
        inj[m.layout.index(col)] += p
    return plant.simulate_interval(x, q, demand, inj, scenario.tau)


def run_closed_loop(controller, scenario: Scenario, steps: int | None = None,
                    plant: Plant | None = None, x0=None, mode: str | None = None,
                    progress=None) -> ClosedLoopRecord:
    """Controller -> plant -> downsample, ``steps`` times."""
    steps = scenario.steps if steps is None else steps
    coarse = controller.model
    plant = plant or Plant(coarse, scenario.beta, t_floor=scenario.options.t_return_floor)
    x = initial_state(plant, scenario) if x0 is None else np.asarray(x0, dtype=float)
    mode = mode or controller.cfg.prosumer_mode
    m = plant.model
    cons = list(m.consumer_names)
    prods = [p.name for p in getattr(controller, "producers", [])] or \
        [next(iter(m.spec.producers))]
    rec = ClosedLoopRecord(list(coarse.thermal.labels), cons, prods, scenario.tau, m.ambient)
    rec.states.append(plant.downsample(x) + m.ambient)
    sto = m.storage_edges
    factors = {p.name: p.price_factor for p in getattr(controller, "producers", [])}
    for k in range(steps):
        xc = plant.downsample(x)
        t0 = time.perf_counter()
        act = controller(k, xc)
        solve = act.solve_time if act.solve_time else time.perf_counter() - t0
        fixed = _injections(scenario, m, mode, k, 1)[0]
        x, means = _advance(plant, scenario, mode, k, x, act)
        q = m.edge_flows(act.loop_flows)
        rec.time.append((k + 1) * scenario.tau / 3600.0)
        rec.loop_flows.append(np.asarray(act.loop_flows, dtype=float))
        rec.edge_flows.append(q)
        rec.power.append([act.power.get(p, 0.0) for p in prods])
        rec.demand.append([-fixed[m.layout.index(c)] for c in cons])
        rec.drawn.append([means[c][0] for c in cons])
        rec.consumer_flow.append([q[plant.hx_index[c]] for c in cons])
        rec.t_in.append([means[c][1] + m.ambient for c in cons])
        rec.t_out.append([means[c][2] + m.ambient for c in cons])
        rec.states.append(plant.downsample(x) + m.ambient)
        rec.price.append(scenario.price[k])
        paid = sum(factors.get(p, 1.0) * act.power.get(p, 0.0) for p in prods)
        rec.cost.append(scenario.price[k] * paid * scenario.tau / 3.6e9)
        rec.status.append(act.status)
        rec.solve_time.append(solve)
        rec.fallback.append(act.fallback)
        rec.storage_net.append(q[sto[0]] - q[sto[1]] if sto else 0.0)
        inj = np.zeros(len(cons), dtype=bool)
        for name, p in act.power.items():
            if name not in m.layout.names and p > 0 and scenario.prosumer in cons:
                inj[cons.index(scenario.prosumer)] = True
        for j, c in enumerate(cons):
            if m.layout.kinds[m.layout.index(c)] == "prosumer" and mode != "consumer-only":
                if mode == "fixed-producer" and scenario.p2_fixed:
                    inj[j] = True
                if mode == "net-signed" and scenario.surplus[k] > 0:
                    inj[j] = True
        rec.injecting.append(inj)
        if progress:
            progress(k, act)
    return rec


def save_record(rec: ClosedLoopRecord, outdir, metrics: dict | None = None,
                manifest: dict | None = None) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    a = rec.arrays()
    with open(out / "states.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_h"] + rec.names)
        times = [0.0] + list(a["time"])
        for t, row in zip(times, a["states"]):
            w.writerow([f"{t:g}"] + [f"{v:.6f}" for v in row])
    with open(out / "inputs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        m_r = a["loop_flows"].shape[1] if a["loop_flows"].size else 0
        w.writerow(["time_h", "price_EUR_MWh", "status"]
                   + [f"P_{p}_kW" for p in rec.producers] + [f"q_r{i}_Ls" for i in range(m_r)])
        for k in range(len(rec.time)):
            w.writerow([f"{rec.time[k]:g}", rec.price[k], rec.status[k]]
                       + [f"{v / 1e3:.6f}" for v in a["power"][k]]
                       + [f"{v * 1e3:.6f}" for v in a["loop_flows"][k]])
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics if metrics is not None else rec.metrics(), fh, indent=2)
    if manifest is not None:
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def long_format(rec: ClosedLoopRecord, path) -> None:
    """Plot-ready rows of (time, series, value)."""
    a = rec.arrays()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_h", "series", "value"])
        for k, t in enumerate(a["time"]):
            for j, p in enumerate(rec.producers):
                w.writerow([t, f"power_{p}_kW", a["power"][k, j] / 1e3])
            for j, c in enumerate(rec.consumers):
                w.writerow([t, f"inlet_{c}_C", a["t_in"][k, j]])
                w.writerow([t, f"flow_{c}_Ls", a["consumer_flow"][k, j] * 1e3])
            w.writerow([t, "price_EUR_MWh", a["price"][k]])
            w.writerow([t, "storage_net_Ls", a["storage_net"][k] * 1e3])
