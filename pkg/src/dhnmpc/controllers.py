"""Rule-based baseline and the MPC variants behind one interface."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import DhnModel
from .ocp import SUCCESS, OcpData, OcpProblem, OcpSolution, Producer
from .scenario import Scenario

log = logging.getLogger(__name__)

VARIANTS = ("rbc", "sp", "sps", "mp", "mps")
ALIASES = {"rbc": "rbc", "sp-mpc": "sp", "sps-mpc": "sps", "mp-mpc": "mp", "mps-mpc": "mps"}
PROSUMER_MODES = ("consumer-only", "net-signed", "fixed-producer", "controllable")


class ControllerConfigError(ValueError):
    pass


class SolverFailure(RuntimeError):
    """MPC solve failed and no fallback is configured."""


def canonical_variant(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ControllerConfigError(f"unknown controller variant {name!r}")
    return key


@dataclass
class ControllerConfig:
    variant: str = "mps"
    storage: bool = True
    multi_producer: bool = True
    prosumer_mode: str = "controllable"
    # heating curve T = a - b (T_out - t_ref), clamped
    curve_a: float = 85.0
    curve_b: float = 1.0
    curve_ref: float = 10.0
    curve_min: float = 70.0
    curve_max: float = 90.0
    dt_design: float = 30.0
    min_circulation: float = 2e-4     # m^3/s per consumer loop
    gain: float = 1.0
    fallback: str = "rbc"
    accept_violation: float = 1e-3

    @classmethod
    def for_variant(cls, variant: str, scenario: Scenario | None = None, **kw):
        v = canonical_variant(variant)
        multi = v in ("mp", "mps")
        mode = "controllable" if multi else "net-signed"
        if scenario is not None and scenario.p2_fixed is not None:
            mode = "fixed-producer"
        if scenario is not None and scenario.prosumer is None:
            mode = "consumer-only"
        base = dict(variant=v, storage=v in ("sps", "mps"), multi_producer=multi,
                    prosumer_mode=mode)
        base.update(kw)
        return cls(**base)

    def validate(self, model: DhnModel):
        if self.prosumer_mode not in PROSUMER_MODES:
            raise ControllerConfigError(f"unknown prosumer mode {self.prosumer_mode!r}")
        if self.storage and model.storage_edges is None:
            raise ControllerConfigError("storage enabled but the network has no storage")
        if self.multi_producer and self.variant != "rbc" and not model.spec.prosumers:
            raise ControllerConfigError("multi-producer variants need a prosumer")
        if self.prosumer_mode == "controllable" and not self.multi_producer:
            raise ControllerConfigError("single-producer variants cannot control the prosumer")


@dataclass
class Action:
    loop_flows: np.ndarray           # m^3/s
    power: dict                      # producer name -> W
    status: str = "rule"
    solve_time: float = 0.0
    iterations: int = 0
    fallback: bool = False
    info: dict = field(default_factory=dict)


def _injections(scenario: Scenario, model: DhnModel, mode: str, start: int, n: int):
    """Fixed injections on every layout column, W, shape (n, columns)."""
    cols = model.layout.names
    out = np.zeros((n, len(cols)))
    sl = slice(start, start + n)
    for j, name in enumerate(cols):
        if model.layout.kinds[j] == "producer":
            continue
        out[:, j] = -scenario.consumer_demand(name)[sl]
        if model.layout.kinds[j] == "prosumer":
            if mode == "net-signed":
                out[:, j] += scenario.surplus[sl]
            elif mode == "fixed-producer":
                out[:, j] += scenario.p2_fixed or 0.0
    return out


def prosumer_available(scenario: Scenario, start: int, n: int) -> np.ndarray:
    """Upper bound of controllable prosumer production, W."""
    s = scenario.surplus[start:start + n]
    return np.maximum(s, 0.0)


def heating_curve(t_out, cfg: ControllerConfig):
    return np.clip(cfg.curve_a - cfg.curve_b * (np.asarray(t_out) - cfg.curve_ref),
                   cfg.curve_min, cfg.curve_max)


def consumer_loops(model: DhnModel) -> dict:
    """Shortest reduced loop per consumer that passes the primary producer.

    The loop may not cross another heat exchanger, the storage, or a reverse
    pipe direction.
    """
    g = model.graph
    spec = model.spec
    prim = g.edge_index(next(iter(spec.producers.values())))
    hx = {g.edge_index(e) for e in list(spec.consumers.values()) + list(spec.prosumers.values())}
    other = {k for k in range(g.n_edges) if g.physical(k).kind != "pipe"} - hx - {prim}
    out = {}
    for name in model.consumer_names:
        k = g.edge_index(model.hx_edge(name))
        best = None
        for i, row in enumerate(model.loops.reduced):
            used = set(np.flatnonzero(row > 0))
            if prim not in used or k not in used or used & other or (used & hx) != {k}:
                continue
            if any(g.reverse[e] for e in used):
                continue
            if best is None or len(used) < best[1]:
                best = (i, len(used))
        if best is None:
            raise ControllerConfigError(f"no producer loop through consumer {name}")
        out[name] = best[0]
    return out


class RuleBasedController:
    """Heating curve on the producer outlet, demand-proportional consumer flows."""

    name = "rbc"

    def __init__(self, config: ControllerConfig, model: DhnModel, scenario: Scenario):
        self.cfg = config
        self.model = model
        self.sc = scenario
        self.loops = consumer_loops(model)
        self.primary = next(iter(model.spec.producers))
        self.p_max = scenario.p_max.get(self.primary, np.inf)
        self.inlet = model.graph.edges[model.graph.edge_index(model.hx_edge(self.primary))][0]
        self.outlet = model.thermal.edge_cells(model.hx_edge(self.primary))[-1]
        self.shortfall = []

    def flows(self, k: int) -> np.ndarray:
        m, tg = self.model, self.model.thermal
        q_r = np.zeros(m.m_r)
        rhocp = tg.rho * tg.cp
        fixed = _injections(self.sc, m, self.cfg.prosumer_mode, k, 1)[0]
        for name, loop in self.loops.items():
            j = m.layout.index(name)
            # an injecting prosumer needs flow to carry its heat away just the same
            load = abs(fixed[j])
            q_r[loop] += max(load / (rhocp * self.cfg.dt_design), self.cfg.min_circulation)
        scale = min(1.0, m.hydraulics.max_feasible_scale(q_r))
        upper = m.graph.flow_upper()
        q = m.edge_flows(q_r)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(q > 0, upper / np.where(q > 0, q, 1.0), np.inf)
        scale = min(scale, float(ratio.min()))
        if scale < 1.0:
            self.shortfall.append((k, scale))
            log.info("rbc step %d: flows scaled by %.3f to stay hydraulically feasible", k, scale)
        # stay strictly inside the loop inequality
        return q_r * scale * (1.0 - 1e-9 if scale < 1.0 else 1.0)

    def __call__(self, k: int, x: np.ndarray) -> Action:
        m, tg = self.model, self.model.thermal
        q_r = self.flows(k)
        q_p = m.edge_flows(q_r)[m.graph.edge_index(m.hx_edge(self.primary))]
        t_sup = float(heating_curve(self.sc.outdoor[k], self.cfg)) - m.ambient
        t_in, t_out = x[self.inlet], x[self.outlet]
        rhocp = tg.rho * tg.cp
        p = rhocp * q_p * ((t_sup - t_in) + self.cfg.gain * (t_sup - t_out))
        power = {self.primary: float(np.clip(p, 0.0, self.p_max))}
        return Action(q_r, power, info={"t_supply": t_sup + m.ambient})


class MpcController:
    """Economic MPC; one NLP reused across steps with shifted warm starts."""

    def __init__(self, config: ControllerConfig, model: DhnModel, scenario: Scenario):
        config.validate(model)
        self.cfg = config
        self.model = model
        self.sc = scenario
        self.name = config.variant
        opts = scenario.options
        self.N = opts.horizon
        spec = model.spec
        primary = next(iter(spec.producers))
        self.producers = [Producer(primary, primary, scenario.p_max.get(primary, 1.2e6) / 1e3)]
        self.prosumer = scenario.prosumer if spec.prosumers else None
        if config.prosumer_mode == "controllable" and self.prosumer:
            self.producers.append(Producer("P2", self.prosumer, scenario.p2_max / 1e3,
                                           price_factor=0.0))
        pinned = np.zeros(model.m_r, dtype=bool)
        if not config.storage and model.storage_edges is not None:
            pinned |= model.loops_through(model.storage_edges)
        if not config.multi_producer and self.prosumer:
            rev = model.graph.edge_index(model.hx_edge(self.prosumer), reverse=True)
            pinned |= model.loops_through([rev])
        self.pinned = pinned
        self.problem = OcpProblem(model, opts, self.producers, pinned)
        self.rbc = RuleBasedController(config, model, scenario)
        self.previous: OcpSolution | None = None
        self.volume = 0.0
        self.events = []
        self.last_input = None

    def data(self, k: int, x: np.ndarray) -> OcpData:
        N, sc = self.N, self.sc
        dist = _injections(sc, self.model, self.cfg.prosumer_mode, k, N) / 1e3
        p_max = np.tile([p.p_max for p in self.producers], (N, 1))
        if len(self.producers) > 1:
            p_max[:, 1] = np.minimum(p_max[:, 1], prosumer_available(sc, k, N) / 1e3)
        spd = sc.options.steps_per_day
        if k % spd == 0:
            self.volume = 0.0
        return OcpData(x0=x, disturbance=dist, price=sc.price_relative()[k:k + N],
                       storage_volume0=self.volume, steps_to_day_end=spd - k % spd,
                       p_max=p_max)

    def __call__(self, k: int, x: np.ndarray) -> Action:
        data = self.data(k, x)
        guess = self.problem.warm_start(self.previous, data)
        sol = self.problem.solve(data, guess)
        usable = sol.success or (sol.status in ("iteration-limit", "time-limit")
                                 and sol.max_violation <= self.cfg.accept_violation)
        if usable:
            self.previous = sol
            q_r, p = sol.first_input()
            power = {pr.name: float(v) for pr, v in zip(self.producers, p)}
            act = Action(q_r, power, sol.status, sol.wall_time, sol.iterations,
                         info={"terms": sol.terms})
        else:
            self.previous = None
            self.events.append((k, sol.status))
            if self.cfg.fallback == "none":
                raise SolverFailure(f"step {k}: solver status {sol.status}")
            log.warning("mpc step %d: solver status %s, falling back to %s", k, sol.status,
                        self.cfg.fallback)
            if self.cfg.fallback == "hold" and self.last_input is not None:
                q_r, power = self.last_input
            else:
                rb = self.rbc(k, x)
                q_r, power = rb.loop_flows, rb.power
            act = Action(q_r, power, sol.status, sol.wall_time, sol.iterations, fallback=True)
        sto = self.model.storage_edges
        if sto is not None:
            q = self.model.edge_flows(act.loop_flows)
            self.volume += (q[sto[0]] - q[sto[1]]) * self.sc.tau
        self.last_input = (act.loop_flows, act.power)
        return act


def make_controller(config: ControllerConfig | str, model: DhnModel, scenario: Scenario):
    if isinstance(config, str):
        config = ControllerConfig.for_variant(config, scenario)
    config.validate(model)
    if config.variant == "rbc":
        return RuleBasedController(config, model, scenario)
    return MpcController(config, model, scenario)
