"""Pressure-drop models, the convex loop inequality and actuator recovery.

Sign convention: a positive pressure change on an edge means pressure falls
from tail to head, so pumps contribute a negative change.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .network import ExpandedGraph, LoopStructure, ValveReport

RHO = 981.0


class AssumptionViolation(RuntimeError):
    """Recovered valve drops came out negative beyond tolerance."""

    def __init__(self, message, loops):
        super().__init__(message)
        self.loops = list(loops)


class PathDependenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def friction_resistance(length, diameter, friction, rho=RHO):
    """Quadratic friction coefficient 8 rho L K / (pi^2 d^5), in Pa s^2 m^-6."""
    length, diameter, friction = (np.asarray(a, dtype=float) for a in (length, diameter, friction))
    if np.any(length <= 0) or np.any(diameter <= 0) or np.any(friction <= 0) or rho <= 0:
        raise ValueError("L, d, K and rho must be positive")
    return 8.0 * rho * length * friction / (np.pi**2 * diameter**5)


def edge_pressure_change(r_mu, q, nu=0.0, r=0.0, pump=0.0, valve_coeff=0.0):
    """Pressure change over an edge with fixed flow direction.

    ``(r_mu + valve_coeff * nu) q^2 - pump * r``; the valve resistance is
    linear in the opening and the pump lift linear in the speed.
    """
    nu = np.asarray(nu, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(nu < 0):
        raise ValueError("valve opening must be nonnegative")
    if np.any((r < 0) | (r > 1)):
        raise ValueError("pump speed must lie in [0, 1]")
    q = np.asarray(q, dtype=float)
    return (r_mu + valve_coeff * nu) * q * q - pump * r


@dataclass
class ActuatorState:
    """Valve openings and pump speeds.

    ``valve_drop`` is the pressure drop each valve has to take. A valve on an
    edge without flow is marked inactive: its opening is reported as 0 and
    the drop is whatever the closed valve holds.
    """

    nu: np.ndarray
    r: np.ndarray
    valve_drop: np.ndarray
    inactive: np.ndarray


@dataclass
class HydraulicModel:
    graph: ExpandedGraph
    loops: LoopStructure
    r_mu: np.ndarray
    pump: np.ndarray
    valve_coeff: np.ndarray
    valves: ValveReport | None = None

    @classmethod
    def build(cls, graph: ExpandedGraph, loops: LoopStructure, valves: ValveReport | None = None,
              rho: float = RHO, pump_scale: float = 1.0):
        phys = [graph.physical(k) for k in range(graph.n_edges)]
        r_mu = friction_resistance([e.length for e in phys], [e.diameter for e in phys],
                                   [e.friction for e in phys], rho)
        vc = np.array([e.valve_coeff if e.has_valve else 0.0 for e in phys])
        return cls(graph, loops, r_mu, graph.pump_capacity() * pump_scale, vc, valves)

    @property
    def pump_edges(self) -> np.ndarray:
        return np.flatnonzero(self.pump > 0)

    def loop_matrices(self) -> np.ndarray:
        """Z^i = F_r diag(F_r,i) R_mu F_r^T for every reduced loop, stacked."""
        fr = self.loops.reduced
        return np.stack([fr @ np.diag(row * self.r_mu) @ fr.T for row in fr])

    def loop_capacity(self) -> np.ndarray:
        """Total pump capacity on each reduced loop."""
        return self.loops.reduced @ self.pump

    def edge_flows(self, q_r) -> np.ndarray:
        return self.loops.reduced.T @ np.asarray(q_r, dtype=float)

    def loop_feasibility(self, q_r) -> np.ndarray:
        """Friction loss minus pump capacity per loop; feasible where <= 0."""
        q_r = np.asarray(q_r, dtype=float)
        if q_r.shape[-1] != self.loops.m_r:
            raise ValueError(f"expected {self.loops.m_r} loop flows, got {q_r.shape[-1]}")
        q = q_r @ self.loops.reduced
        return (q * q * self.r_mu) @ self.loops.reduced.T - self.loop_capacity()

    def max_feasible_scale(self, q_r) -> float:
        """Largest s with s*q_r satisfying the loop inequality."""
        q = self.edge_flows(q_r)
        loss = self.loops.reduced @ (self.r_mu * q * q)
        cap = self.loop_capacity()
        with np.errstate(divide="ignore"):
            ratio = np.where(loss > 0, cap / np.where(loss > 0, loss, 1.0), np.inf)
        return float(np.sqrt(ratio.min()))

    def pressure_changes(self, q, state: ActuatorState) -> np.ndarray:
        """Pressure change on every expanded edge for given actuators."""
        q = np.asarray(q, dtype=float)
        dp = self.r_mu * q * q - self.pump * state.r
        if self.valves is not None and len(self.valves.valve_edges):
            dp[self.valves.valve_edges] += state.valve_drop
        return dp

    def recover_actuators(self, q, z1=None, adapt=True, rtol=1e-9) -> ActuatorState:
        """Valve openings and pump speeds that close every fundamental loop.

        All pumps run at full speed. Valve drops follow
        ``y = (Psi + Theta Z1) c - (Psi + Theta Z2) R_mu (q*q)`` with ``Z1``
        defaulting to ``Z2``. If that leaves a negative drop and ``adapt`` is
        set, ``Z1`` is re-chosen for this flow by a small LP over the kernel
        of ``F Pi``; the valve condition is flow dependent, so a fixed ``Z1``
        need not serve every flow.
        """
        rep = self.valves
        if rep is None or not rep.assumption_satisfied:
            raise AssumptionViolation("valve placement does not satisfy the rank/recovery check", [])
        q = np.asarray(q, dtype=float)
        m2 = rep.recovery_map
        m1 = m2 if z1 is None else rep.psi + rep.theta @ z1
        friction = self.r_mu * q * q
        y = m1 @ self.pump - m2 @ friction
        scale = max(np.abs(m1 @ self.pump).max(initial=0.0), np.abs(m2 @ friction).max(initial=0.0),
                    1.0)
        tol = rtol * scale
        if np.any(y < -tol) and adapt and rep.m_theta > 0:
            shift = _kernel_shift(rep.theta, y)
            if shift is not None:
                y = y + rep.theta @ shift
        bad = np.flatnonzero(y < -tol)
        if bad.size:
            f = self.loops.fundamental
            loops = sorted({int(i) for k in bad for i in np.flatnonzero(f[:, rep.valve_edges[k]])})
            raise AssumptionViolation(f"negative valve drop on valves {bad.tolist()}", loops)
        y = np.maximum(y, 0.0)
        qv = q[rep.valve_edges]
        coeff = self.valve_coeff[rep.valve_edges]
        flowing = qv * qv * coeff > 0
        nu = np.zeros_like(y)
        nu[flowing] = y[flowing] / (coeff[flowing] * qv[flowing] ** 2)
        return ActuatorState(nu=nu, r=np.ones(self.graph.n_edges), valve_drop=y, inactive=~flowing)

    def loop_equality_residual(self, q, state: ActuatorState) -> np.ndarray:
        return self.loops.fundamental @ self.pressure_changes(q, state)

    def nodal_pressures(self, q, state: ActuatorState, reference=0, p_ref=0.0, rtol=1e-8):
        """Integrate pressure changes along a spanning tree from ``reference``.

        Every co-tree edge must close within ``rtol * max|dp|``.
        """
        g = self.graph
        dp = self.pressure_changes(q, state)
        ref = g.node_index(reference) if isinstance(reference, str) else int(reference)
        p = np.full(g.n_nodes, np.nan)
        p[ref] = p_ref
        nbrs = [[] for _ in range(g.n_nodes)]
        for k, (t, h) in enumerate(g.edges):
            nbrs[t].append((k, h, -1.0))
            nbrs[h].append((k, t, +1.0))
        tree = set()
        queue = deque([ref])
        while queue:
            n = queue.popleft()
            for k, m, sign in nbrs[n]:
                if np.isnan(p[m]):
                    # walking tail->head lowers pressure by dp
                    p[m] = p[n] + sign * dp[k]
                    tree.add(k)
                    queue.append(m)
        closure = np.array([p[t] - p[h] - dp[k] for k, (t, h) in enumerate(g.edges) if k not in tree])
        worst = float(np.abs(closure).max(initial=0.0))
        scale = max(float(np.abs(dp).max(initial=0.0)), 1e-300)
        if worst > rtol * scale:
            raise PathDependenceError(f"pressure field is path dependent (residual {worst:.3e} Pa)",
                                      worst)
        return p


def _kernel_shift(theta, y):
    """Some ``w`` with ``y + theta @ w >= 0``, maximising the smallest entry."""
    n = theta.shape[1]
    # variables (w, t): maximise t subject to y + theta w >= t, t <= 0
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-theta, np.ones((theta.shape[0], 1))])
    res = scipy.optimize.linprog(c, A_ub=a_ub, b_ub=y, bounds=[(None, None)] * n + [(None, 0.0)],
                                 method="highs")
    if res.status != 0:
        return None
    return res.x[:n]


@dataclass(frozen=True)
class CycleSet:
    """Signed edge vectors of undirected cycles of the expanded graph.

    ``in_span`` marks cycles that are integer combinations of the
    fundamental loops; ``coefficients`` holds those combinations.
    """

    signed: np.ndarray
    in_span: np.ndarray
    coefficients: np.ndarray

    @property
    def kappa(self) -> float:
        c = self.coefficients[self.in_span]
        return float(np.abs(c).sum(axis=1).max(initial=0.0))

    def covered(self) -> np.ndarray:
        return self.signed[self.in_span]


def undirected_cycles(graph: ExpandedGraph, cap: int = 200_000) -> np.ndarray:
    """Every simple cycle of the expanded graph ignoring edge direction.

    Rows are signed edge vectors (+1 traversed along the edge, -1 against).
    Antiparallel edge pairs give two-edge cycles.
    """
    n = graph.n_nodes
    nbrs = [[] for _ in range(n)]
    for k, (t, h) in enumerate(graph.edges):
        nbrs[t].append((h, k, 1.0))
        nbrs[h].append((t, k, -1.0))
    found = {}

    for start in range(n):
        # only nodes >= start so each cycle is rooted at its smallest node
        stack = [(start, [start], [])]
        while stack:
            node, path, edges = stack.pop()
            for m, k, sign in nbrs[node]:
                if edges and k == edges[-1][0]:
                    continue
                if m == start and len(edges) >= 1:
                    cyc = edges + [(k, sign)]
                    if len({e for e, _ in cyc}) != len(cyc):
                        continue
                    key = frozenset(e for e, _ in cyc)
                    if key not in found:
                        vec = np.zeros(graph.n_edges)
                        for e, s in cyc:
                            vec[e] = s
                        found[key] = vec
                        if len(found) > cap:
                            raise RuntimeError(f"more than {cap} undirected cycles")
                elif m > start and m not in path:
                    stack.append((m, path + [m], edges + [(k, sign)]))
    if not found:
        return np.zeros((0, graph.n_edges))
    rows = sorted(found.values(), key=lambda v: (np.count_nonzero(v), tuple(-np.abs(v))))
    return np.array(rows)


def all_cycles(graph: ExpandedGraph, loops: LoopStructure, tol=1e-9) -> CycleSet:
    """Enumerate undirected cycles and express them in the fundamental loops."""
    signed = undirected_cycles(graph)
    f = loops.fundamental
    coef, *_ = np.linalg.lstsq(f.T, signed.T, rcond=None)
    coef = coef.T
    in_span = np.abs(coef @ f - signed).max(axis=1) <= tol
    rounded = np.round(coef)
    integer = np.abs(rounded @ f - signed).max(axis=1) <= tol
    coef = np.where(integer[:, None], rounded, coef)
    return CycleSet(signed, in_span, coef)


def verify_kirchhoff_all_cycles(dp, cycles) -> float:
    """Largest absolute signed pressure sum over the given cycles."""
    signed = cycles.covered() if isinstance(cycles, CycleSet) else np.asarray(cycles)
    if signed.size == 0:
        return 0.0
    return float(np.abs(signed @ np.asarray(dp)).max())


def residual_report(model: HydraulicModel, q_r, path=None):
    """Per-loop rows (loop, lhs, rhs, residual) of the loop inequality."""
    q = model.edge_flows(q_r)
    lhs = model.loops.reduced @ (model.r_mu * q * q)
    rhs = model.loop_capacity()
    rows = [(i, float(a), float(b), float(a - b)) for i, (a, b) in enumerate(zip(lhs, rhs))]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loop", "lhs", "rhs", "residual"])
            w.writerows(rows)
    return rows
