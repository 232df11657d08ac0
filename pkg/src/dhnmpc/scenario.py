"""Scenario configuration, series ingestion and the AROMA preset."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from .aroma import aroma_network
from .model import default_cells
from .network import Edge, NetworkSpec, suggest_valve_placement, with_valves
from .ocp import OcpOptions

log = logging.getLogger(__name__)

AROMA_FRACTIONS = {"C1": 0.08, "C2": 0.34, "C3": 0.11, "C4": 0.08, "C5": 0.38}
SERIES_KINDS = ("price", "demand", "outdoor")


class ConfigError(ValueError):
    pass


def _data_path(name: str) -> Path:
    return Path(str(resources.files("dhnmpc") / "data" / name))


def ingest_series(path, kind: str, tau: float = 900.0, length: int | None = None) -> np.ndarray:
    """Read ``time,value`` (time in hours) and resample to steps of ``tau`` seconds.

    Prices are zero-order held; demand and outdoor temperature are
    interpolated linearly.
    """
    if kind not in SERIES_KINDS:
        raise ConfigError(f"unknown series kind {kind!r}")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"series file not found: {path}")
    times, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        if header[:2] != ["time", "value"]:
            raise ConfigError(f"{path}: header must be 'time,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, v = float(row[0]), float(row[1])
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            if np.isnan(t) or np.isnan(v):
                raise ConfigError(f"{path}:{lineno}: NaN value")
            times.append(t)
            values.append(v)
    t = np.array(times)
    v = np.array(values)
    if len(t) == 0:
        raise ConfigError(f"{path}: empty series")
    if np.any(np.diff(t) <= 0):
        raise ConfigError(f"{path}: timestamps must increase strictly")
    step_h = tau / 3600.0
    if length is None:
        span = t[-1] - t[0] + (np.min(np.diff(t)) if kind == "price" and len(t) > 1 else 0.0)
        length = int(np.floor(span / step_h + 1e-9)) + (0 if kind == "price" else 1)
    grid = t[0] + step_h * np.arange(length)
    if kind == "price":
        idx = np.searchsorted(t, grid + 1e-9, side="right") - 1
        return v[np.clip(idx, 0, len(v) - 1)]
    return np.interp(grid, t, v)


def _window(hours, start, end, tau):
    """Mask of steps whose start lies in [start, end) hours of the day."""
    h = (np.arange(hours) * tau / 3600.0) % 24.0
    return (h >= start - 1e-9) & (h < end - 1e-9)


@dataclass
class Scenario:
    """Everything a closed-loop run needs. Series are per step; powers in W."""

    name: str
    network: NetworkSpec
    fractions: dict
    demand: np.ndarray              # total demand, W
    price: np.ndarray               # EUR/MWh
    outdoor: np.ndarray             # degC
    tau: float = 900.0
    steps: int = 96
    beta: int = 4
    ambient: float = 10.0
    cells: dict = field(default_factory=dict)
    p_max: dict = field(default_factory=lambda: {"P1": 1.2e6})
    prosumer: str | None = "C1"
    surplus: np.ndarray | None = None     # prosumer injection, W
    extra_load: dict = field(default_factory=dict)   # consumer -> W series
    p2_fixed: float | None = None          # fixed prosumer production, W
    p2_max: float = 1.5e5
    options: OcpOptions = field(default_factory=OcpOptions)
    variant: str = "mps"
    warmup_steps: int = 96
    initial: dict = field(default_factory=lambda: {"supply": 80.0, "return": 50.0,
                                                   "storage_hot": 80.0, "storage_cold": 45.0,
                                                   "storage_fill": 0.5})
    demand_scale: dict = field(default_factory=dict)   # consumer -> multiplier

    def __post_init__(self):
        total = sum(self.fractions.values())
        if abs(total - 1.0) > 1e-9:
            log.warning("demand fractions sum to %.6f, renormalizing to 1", total)
            self.fractions = {k: v / total for k, v in self.fractions.items()}
        names = set(self.network.consumers) | set(self.network.prosumers)
        if set(self.fractions) != names:
            raise ConfigError(f"fractions must cover consumers {sorted(names)}")
        need = self.steps + self.options.horizon
        for label in ("demand", "price", "outdoor"):
            arr = np.asarray(getattr(self, label), dtype=float)
            if arr.ndim != 1 or len(arr) < need:
                raise ConfigError(f"{label} series has {len(arr)} steps, need {need}")
            setattr(self, label, arr)
        if not self.cells:
            self.cells = default_cells(self.network)
        if self.surplus is None:
            self.surplus = np.zeros(len(self.demand))
        if self.options.tau != self.tau:
            self.options = dataclasses.replace(self.options, tau=self.tau)

    @property
    def length(self) -> int:
        return len(self.demand)

    def consumer_demand(self, name: str) -> np.ndarray:
        """Heat demand of one consumer in W (prosumer surplus excluded)."""
        d = self.fractions[name] * self.demand * self.demand_scale.get(name, 1.0)
        if name in self.extra_load:
            d = d + self.extra_load[name]
        return d

    def price_relative(self) -> np.ndarray:
        return self.price / float(np.mean(self.price[: self.steps]))

    def hash(self) -> str:
        blob = json.dumps(to_dict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def build_aroma(variant: str = "mps", tau: float = 900.0, steps: int = 96,
                options: OcpOptions | None = None, **kw) -> Scenario:
    """AROMA preset with the checked-in price, demand and outdoor profiles."""
    options = options or OcpOptions(tau=tau)
    n = steps + options.horizon
    demand = ingest_series(_data_path("demand.csv"), "demand", tau) * 1e3
    price = ingest_series(_data_path("price.csv"), "price", tau)
    outdoor = ingest_series(_data_path("outdoor.csv"), "outdoor", tau)
    reps = int(np.ceil(n / len(demand)))
    size = max(n, min(len(demand), len(price), len(outdoor)))
    demand, price, outdoor = (np.tile(a, reps + 1)[:size] for a in (demand, price, outdoor))
    win = _window(len(demand), 12.0, 17.0, tau)
    surplus = np.where(win, 1.0e5, 0.0)
    extra = {"C4": np.where(win, 8.0e4, 0.0)}
    pump_scale = kw.pop("pump_scale", 1.0)
    spec = aroma_network(pump_scale=pump_scale)
    return Scenario("aroma", spec, dict(AROMA_FRACTIONS), demand, price, outdoor, tau=tau,
                    steps=steps, options=options, variant=variant, surplus=surplus,
                    extra_load=extra, **kw)


def build_relief(variant: str = "mp", steps: int = 96, options: OcpOptions | None = None,
                 pump_scale: float = 0.1, **kw) -> Scenario:
    """Pump-constrained setup: prosumer produces a fixed 100 kW, states kept in 70-90 degC."""
    # the 70-90 C band is an operating limit, so consumers also cannot return below 70 C
    options = options or OcpOptions(t_box=(70.0, 90.0), t_supply_min=70.0,
                                    t_return_floor=70.0, floor_margin=0.0)
    sc = build_aroma(variant, steps=steps, options=options, pump_scale=pump_scale, **kw)
    sc.name = "aroma-relief"
    sc.surplus = np.zeros(sc.length)
    sc.extra_load = {}
    sc.demand_scale = {"C1": 0.0}
    sc.p2_fixed = 1.0e5
    sc.initial = dict(sc.initial, supply=85.0, **{"return": 72.0})
    return sc


# serialization ----------------------------------------------------------------

def _edge_dict(e: Edge) -> dict:
    return {k: v for k, v in dataclasses.asdict(e).items()}


def to_dict(sc: Scenario) -> dict:
    net = sc.network
    out = {
        "scenario": {"name": sc.name, "variant": sc.variant, "tau_s": sc.tau, "steps": sc.steps,
                     "beta": sc.beta, "ambient_C": sc.ambient, "warmup_steps": sc.warmup_steps,
                     "prosumer": sc.prosumer or "", "p2_max_kW": sc.p2_max / 1e3},
        "network": {
            "nodes": list(net.nodes), "pairing": dict(net.pairing),
            "producers": dict(net.producers), "consumers": dict(net.consumers),
            "prosumers": dict(net.prosumers), "storages": dict(net.storages),
            "edges": [_edge_dict(e) for e in net.edges],
        },
        "cells": dict(sc.cells),
        "fractions": dict(sc.fractions),
        "producers": {k: {"p_max_kW": v / 1e3} for k, v in sc.p_max.items()},
        "initial": dict(sc.initial),
        "series": {"demand_kW": (sc.demand / 1e3).tolist(), "price_EUR_MWh": sc.price.tolist(),
                   "outdoor_C": sc.outdoor.tolist(), "surplus_kW": (sc.surplus / 1e3).tolist(),
                   "extra_load_kW": {k: (v / 1e3).tolist() for k, v in sc.extra_load.items()}},
        "demand_scale": dict(sc.demand_scale),
        "ocp": {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(sc.options).items() if v is not None},
    }
    if sc.p2_fixed is not None:
        out["scenario"]["p2_fixed_kW"] = sc.p2_fixed / 1e3
    return out


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(to_dict(sc), fh)


def _series(section: dict, key: str, base: Path, kind: str, tau: float, scale=1.0):
    """A series is either inline (``key``) or a file (``key_file``)."""
    if key in section:
        return np.asarray(section[key], dtype=float) * scale
    fkey = kind + "_file"
    if fkey in section:
        p = Path(section[fkey])
        p = p if p.is_absolute() else base / p
        return ingest_series(p, kind, tau) * scale
    return None


def from_dict(cfg: dict, base: Path | None = None) -> Scenario:
    base = base or Path.cwd()
    try:
        s = cfg.get("scenario", {})
        tau = float(s.get("tau_s", 900.0))
        ocp_cfg = dict(cfg.get("ocp", {}))
        if "t_box" in ocp_cfg:
            ocp_cfg["t_box"] = tuple(ocp_cfg["t_box"])
        ocp_cfg.setdefault("tau", tau)
        known = {f.name for f in dataclasses.fields(OcpOptions)}
        bad = set(ocp_cfg) - known
        if bad:
            raise ConfigError(f"[ocp]: unknown keys {sorted(bad)}")
        options = OcpOptions(**ocp_cfg)
        net_cfg = cfg.get("network", {"preset": "aroma"})
        if net_cfg.get("preset") == "aroma":
            spec = aroma_network(pump_scale=float(net_cfg.get("pump_scale", 1.0)))
        else:
            edges = [Edge(**e) for e in net_cfg["edges"]]
            spec = NetworkSpec(list(net_cfg["nodes"]), edges, dict(net_cfg["pairing"]),
                               dict(net_cfg.get("producers", {})),
                               dict(net_cfg.get("consumers", {})),
                               dict(net_cfg.get("prosumers", {})),
                               dict(net_cfg.get("storages", {})))
            if net_cfg.get("place_valves", False):
                spec = with_valves(spec, suggest_valve_placement(spec))
        ser = cfg.get("series", {})
        demand = _series(ser, "demand_kW", base, "demand", tau, 1e3)
        price = _series(ser, "price_EUR_MWh", base, "price", tau)
        outdoor = _series(ser, "outdoor_C", base, "outdoor", tau)
        if demand is None or price is None:
            raise ConfigError("[series]: demand and price are required")
        if outdoor is None:
            outdoor = np.full(len(demand), 10.0)
        n = min(len(demand), len(price), len(outdoor))
        surplus = np.asarray(ser.get("surplus_kW", np.zeros(n)), dtype=float)[:n] * 1e3
        extra = {k: np.asarray(v, dtype=float)[:n] * 1e3
                 for k, v in ser.get("extra_load_kW", {}).items()}
        producers = cfg.get("producers", {})
        p_max = {k: float(v.get("p_max_kW", 1000.0)) * 1e3 for k, v in producers.items()} \
            or {next(iter(spec.producers)): 1.2e6}
        kw = {}
        if "initial" in cfg:
            kw["initial"] = dict(cfg["initial"])
        if "cells" in cfg:
            kw["cells"] = {k: int(v) for k, v in cfg["cells"].items()}
        sc = Scenario(
            name=s.get("name", "custom"), network=spec,
            fractions={k: float(v) for k, v in cfg["fractions"].items()},
            demand=demand[:n], price=price[:n], outdoor=outdoor[:n], tau=tau,
            steps=int(s.get("steps", 96)), beta=int(s.get("beta", 4)),
            ambient=float(s.get("ambient_C", 10.0)), p_max=p_max,
            prosumer=(s.get("prosumer") or None) if spec.prosumers else None,
            surplus=surplus, extra_load=extra,
            p2_fixed=(float(s["p2_fixed_kW"]) * 1e3 if "p2_fixed_kW" in s else None),
            p2_max=float(s.get("p2_max_kW", 150.0)) * 1e3, options=options,
            variant=s.get("variant", "mps"), warmup_steps=int(s.get("warmup_steps", 96)),
            demand_scale={k: float(v) for k, v in cfg.get("demand_scale", {}).items()}, **kw)
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from None
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(cfg, path.parent)
