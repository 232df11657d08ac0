"""Graph model of a district heating network and its loop structure.

The network is a directed graph whose edges are pipes, heat exchangers,
pumps and valves. Pipes that may carry flow in both directions get an extra
reverse edge so every edge flow is nonnegative. Directed cycles of that
expanded graph that run through the supply side and back along the mirrored
return side define the loop flows used by the controller.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.linalg
import scipy.optimize

logger = logging.getLogger(__name__)

EDGE_KINDS = ("pipe", "producer", "consumer", "prosumer", "storage")


class NetworkError(ValueError):
    """Structural or configuration problem with a network description."""


class CycleOverflowError(RuntimeError):
    """Raised when cycle enumeration exceeds the configured cap."""


class UnsupportedTopologyError(NetworkError):
    pass


@dataclass(frozen=True)
class Edge:
    """One physical edge of the network.

    ``pump`` is the pump capacity (Pa) acting in the edge direction and
    ``reverse_pump`` the capacity acting on the reverse edge of a
    bidirectional pipe. Lengths and diameters are in metres, flow bounds in
    m^3/s.
    """

    id: str
    tail: str
    head: str
    length: float
    diameter: float
    friction: float = 0.02
    heat_transfer: float = 0.4
    q_min: float = 0.0
    q_max: float = 0.05
    pump: float = 0.0
    reverse_pump: float = 0.0
    has_valve: bool = False
    valve_coeff: float = 1e8
    kind: str = "pipe"

    def __post_init__(self):
        if min(self.length, self.diameter, self.friction, self.heat_transfer) <= 0:
            raise NetworkError(f"edge {self.id}: L, d, K, U must be positive")
        if self.q_min > self.q_max or self.q_max <= 0:
            raise NetworkError(f"edge {self.id}: need q_min <= q_max and q_max > 0")
        if self.pump < 0 or self.reverse_pump < 0:
            raise NetworkError(f"edge {self.id}: pump capacity must be >= 0")
        if self.kind not in EDGE_KINDS:
            raise NetworkError(f"edge {self.id}: unknown kind {self.kind!r}")

    @property
    def bidirectional(self) -> bool:
        return self.q_min < 0

    @property
    def cross_section(self) -> float:
        return np.pi * self.diameter**2 / 4.0

    @property
    def volume(self) -> float:
        return self.cross_section * self.length


@dataclass
class NetworkSpec:
    """Network description.

    ``pairing`` maps every supply-side node to its mirror on the return
    side. ``producers``/``consumers``/``prosumers``/``storages`` map a
    participant name to the id of its heat-exchanger edge.
    """

    nodes: list[str]
    edges: list[Edge]
    pairing: dict[str, str]
    producers: dict[str, str] = field(default_factory=dict)
    consumers: dict[str, str] = field(default_factory=dict)
    prosumers: dict[str, str] = field(default_factory=dict)
    storages: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise NetworkError("duplicate node ids")
        ids = [e.id for e in self.edges]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate edge ids")
        seen = set()
        for e in self.edges:
            for n in (e.tail, e.head):
                if n not in known:
                    raise NetworkError(f"edge {e.id} references unknown node {n!r}")
            if e.tail == e.head:
                raise NetworkError(f"edge {e.id} is a self-loop")
            key = frozenset((e.tail, e.head))
            if key in seen:
                raise NetworkError(f"parallel edges between {e.tail} and {e.head} are not supported")
            seen.add(key)
        for group in (self.producers, self.consumers, self.prosumers, self.storages):
            for name, eid in group.items():
                if eid not in ids:
                    raise NetworkError(f"{name} refers to unknown edge {eid!r}")

    def edge(self, eid: str) -> Edge:
        for e in self.edges:
            if e.id == eid:
                return e
        raise KeyError(eid)

    @property
    def side(self) -> dict[str, str]:
        sides = {}
        for s, r in self.pairing.items():
            sides[s] = "supply"
            sides[r] = "return"
        return sides

    def mirror(self, node: str) -> str:
        inverse = {r: s for s, r in self.pairing.items()}
        if node in self.pairing:
            return self.pairing[node]
        if node in inverse:
            return inverse[node]
        raise NetworkError(f"node {node!r} has no supply/return pairing")


@dataclass(frozen=True)
class ExpandedGraph:
    """The graph with one added reverse edge per bidirectional pipe.

    ``origin[k]`` is the index of the physical edge behind expanded edge
    ``k`` and ``reverse[k]`` says whether it is the added reverse direction.
    """

    spec: NetworkSpec
    nodes: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    origin: np.ndarray
    reverse: np.ndarray
    incidence: np.ndarray
    adjacency: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node_index(self, node: str) -> int:
        return self.nodes.index(node)

    def edge_index(self, eid: str, reverse: bool = False) -> int:
        k = [e.id for e in self.spec.edges].index(eid)
        hits = np.flatnonzero((self.origin == k) & (self.reverse == reverse))
        if hits.size == 0:
            raise KeyError((eid, reverse))
        return int(hits[0])

    def counterpart(self, k: int) -> int | None:
        """Index of the opposite direction of the same pipe, if any."""
        hits = np.flatnonzero((self.origin == self.origin[k]) & (self.reverse != self.reverse[k]))
        return int(hits[0]) if hits.size else None

    def physical(self, k: int) -> Edge:
        return self.spec.edges[int(self.origin[k])]

    def label(self, k: int) -> str:
        return self.physical(k).id + ("~" if self.reverse[k] else "")

    def pump_capacity(self) -> np.ndarray:
        c = np.zeros(self.n_edges)
        for k in range(self.n_edges):
            e = self.physical(k)
            c[k] = e.reverse_pump if self.reverse[k] else e.pump
        return c

    def flow_upper(self) -> np.ndarray:
        return np.array([-self.physical(k).q_min if self.reverse[k] else self.physical(k).q_max
                         for k in range(self.n_edges)])

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n_nodes))
        for k, (t, h) in enumerate(self.edges):
            g.add_edge(t, h, index=k)
        return g


def expand_bidirectional(spec: NetworkSpec) -> ExpandedGraph:
    """Add a reverse edge for every pipe with a negative lower flow bound."""
    nodes = tuple(spec.nodes)
    idx = {n: i for i, n in enumerate(nodes)}
    edges, origin, reverse = [], [], []
    for k, e in enumerate(spec.edges):
        edges.append((idx[e.tail], idx[e.head]))
        origin.append(k)
        reverse.append(False)
    for k, e in enumerate(spec.edges):
        if e.bidirectional:
            edges.append((idx[e.head], idx[e.tail]))
            origin.append(k)
            reverse.append(True)

    n, m = len(nodes), len(edges)
    incidence = np.zeros((n, m))
    adjacency = np.zeros((n, n))
    for k, (t, h) in enumerate(edges):
        incidence[t, k] = -1.0
        incidence[h, k] = 1.0
        adjacency[t, h] = 1.0

    g = ExpandedGraph(spec, nodes, tuple(edges), np.array(origin), np.array(reverse, dtype=bool),
                      incidence, adjacency)
    if not nx.is_strongly_connected(g.digraph()):
        raise NetworkError("expanded graph is not strongly connected")
    return g


@dataclass(frozen=True)
class Cycle:
    """A directed cycle stored with its smallest node index first."""

    nodes: tuple[int, ...]
    edges: tuple[int, ...]

    def __len__(self):
        return len(self.nodes)


def _canonical(nodes: list[int], g: ExpandedGraph) -> Cycle:
    i = int(np.argmin(nodes))
    rot = list(nodes[i:]) + list(nodes[:i])
    lookup = {e: k for k, e in enumerate(g.edges)}
    edges = tuple(lookup[(rot[j], rot[(j + 1) % len(rot)])] for j in range(len(rot)))
    return Cycle(tuple(rot), edges)


def enumerate_directed_cycles(g: ExpandedGraph, cap: int = 1_000_000) -> list[Cycle]:
    """All directed simple cycles of the expanded graph, canonically ordered."""
    found = []
    for cyc in nx.simple_cycles(g.digraph()):
        found.append(_canonical(cyc, g))
        if len(found) > cap:
            raise CycleOverflowError(f"more than {cap} directed cycles")
    return sorted(set(found), key=lambda c: (len(c.nodes), c.nodes))


def is_mirrored(cycle: Cycle, g: ExpandedGraph) -> bool:
    """True if the cycle's return path mirrors its supply path.

    The cycle must cross from return to supply once and back once, and the
    return run must visit the mirrors of the supply run in reverse order.
    """
    spec = g.spec
    side = spec.side
    names = [g.nodes[i] for i in cycle.nodes]
    for n in names:
        if n not in side:
            raise NetworkError(f"node {n!r} has no supply/return pairing")
    labels = [side[n] for n in names]
    k = len(names)
    starts = [i for i in range(k) if labels[i] == "supply" and labels[i - 1] == "return"]
    if len(starts) != 1:
        return False
    s = starts[0]
    rot = names[s:] + names[:s]
    lab = labels[s:] + labels[:s]
    n_sup = lab.count("supply")
    if lab[:n_sup] != ["supply"] * n_sup:
        return False
    supply, ret = rot[:n_sup], rot[n_sup:]
    return ret == [spec.mirror(n) for n in reversed(supply)]


def filter_cycles(cycles: list[Cycle], g: ExpandedGraph) -> list[Cycle]:
    """Drop cycles of at most two nodes and cycles without a mirrored return path."""
    return [c for c in cycles if len(c.nodes) > 2 and is_mirrored(c, g)]


def reduced_loop_matrix(cycles: list[Cycle], n_edges: int) -> np.ndarray:
    if not cycles:
        raise NetworkError("no symmetric cycles: the reduced loop matrix would be empty")
    fr = np.zeros((len(cycles), n_edges))
    for i, c in enumerate(cycles):
        fr[i, list(c.edges)] = 1.0
    if len({tuple(r) for r in fr}) != len(cycles):
        raise NetworkError("duplicate cycles in reduced set")
    return fr


@dataclass(frozen=True)
class LoopStructure:
    cycles: tuple[Cycle, ...]
    reduced: np.ndarray          # F_r, m_r x |E+|
    fundamental: np.ndarray      # F, m_f x |E+|
    pivots: np.ndarray           # column permutation of F_r^T from the pivoted QR
    basis_rows: np.ndarray       # rows of F_r kept in F

    @property
    def m_r(self) -> int:
        return self.reduced.shape[0]

    @property
    def m_f(self) -> int:
        return self.fundamental.shape[0]


def fundamental_loop_matrix(fr: np.ndarray, rtol: float = 1e-10, band: float = 100.0):
    """Independent rows of ``fr`` chosen by QR with column pivoting on ``fr.T``.

    Returns ``(F, m_f, pivots)``. Rank counts pivots above ``rtol * |R_11|``;
    a pivot within a factor ``band`` of that threshold triggers a warning.
    """
    _, r, piv = scipy.linalg.qr(fr.T, pivoting=True, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise NetworkError("reduced loop matrix is zero")
    thresh = rtol * diag[0]
    m_f = int(np.sum(diag > thresh))
    loose = int(np.sum(diag > thresh / band))
    tight = int(np.sum(diag > thresh * band))
    if loose != tight:
        warnings.warn(f"ambiguous loop-matrix rank: candidates {tight} and {loose}", RuntimeWarning)
    keep = np.sort(piv[:m_f])
    return fr[keep].copy(), m_f, piv


def loop_structure(g: ExpandedGraph, cap: int = 1_000_000) -> LoopStructure:
    cycles = filter_cycles(enumerate_directed_cycles(g, cap), g)
    fr = reduced_loop_matrix(cycles, g.n_edges)
    f, m_f, piv = fundamental_loop_matrix(fr)
    return LoopStructure(tuple(cycles), fr, f, piv, np.sort(piv[:m_f]))


# -- valves ----------------------------------------------------------------

@dataclass
class ValveReport:
    valve_edges: np.ndarray      # expanded-edge index of every valve column
    selection: np.ndarray        # Pi, |E+| x |V|
    rank: int
    psi: np.ndarray              # (F Pi)^+ F
    theta: np.ndarray            # I - (F Pi)^+ F Pi
    m_theta: int
    z2: np.ndarray | None
    nonnegative: bool
    certificate: str | None      # "loop-combination", "nonnegative" or None
    assumption_satisfied: bool
    deficient_loops: list[int] = field(default_factory=list)

    @property
    def recovery_map(self) -> np.ndarray:
        """Psi + Theta Z2, the map from edge pressure slack to valve drops."""
        if self.z2 is None:
            return self.psi
        return self.psi + self.theta @ self.z2


def selection_matrix(valve_edges, n_edges: int) -> np.ndarray:
    pi = np.zeros((n_edges, len(valve_edges)))
    for j, k in enumerate(valve_edges):
        pi[k, j] = 1.0
    return pi


def valve_columns(g: ExpandedGraph) -> np.ndarray:
    """Expanded-edge indices carrying a valve (both directions of a valved pipe)."""
    return np.array([k for k in range(g.n_edges) if g.physical(k).has_valve], dtype=int)


def _nonneg_solve(a: np.ndarray, b: np.ndarray):
    """Find X >= 0 with a @ X @ b equal to a target; returns a solver closure."""
    def solve(target):
        n, m = a.shape[1], b.shape[0]
        # vec(A X B) = (B^T kron A) vec(X), column-major vec
        kron = np.kron(b.T, a)
        res = scipy.optimize.linprog(np.ones(n * m), A_eq=kron, b_eq=target.ravel(order="F"),
                                     bounds=(0, None), method="highs")
        if res.status != 0:
            return None
        return res.x.reshape((n, m), order="F")
    return solve


def check_valve_assumption(loops: LoopStructure, valve_edges, tol: float = 1e-9) -> ValveReport:
    """Rank test and recovery-map search for a valve placement.

    The search first looks for ``G >= 0`` with ``F Pi G F_r = F``; then
    ``Psi + Theta Z2 = G F_r`` is nonnegative and maps any edge slack that
    satisfies the loop inequality to nonnegative valve drops. If that fails
    it falls back to any nonnegative ``X`` with ``F Pi X = F``.
    """
    f, fr = loops.fundamental, loops.reduced
    valve_edges = np.asarray(valve_edges, dtype=int)
    pi = selection_matrix(valve_edges, f.shape[1])
    fpi = f @ pi
    n_v = len(valve_edges)
    rank = int(np.linalg.matrix_rank(fpi)) if n_v else 0
    pinv = np.linalg.pinv(fpi) if n_v else np.zeros((0, f.shape[0]))
    psi = pinv @ f
    theta = np.eye(n_v) - pinv @ fpi
    m_theta = n_v - rank

    if rank < loops.m_f:
        # loops whose rows are not reached by the valve columns
        deficient = []
        for i in range(loops.m_f):
            others = np.delete(fpi, i, axis=0)
            if n_v == 0 or np.linalg.matrix_rank(others) == rank:
                deficient.append(i)
        return ValveReport(valve_edges, pi, rank, psi, theta, m_theta, None, False, None, False,
                           deficient)

    z2, cert = None, None
    g = _nonneg_solve(fpi, fr)(f)
    if g is not None:
        z2, cert = g @ fr - psi, "loop-combination"
    else:
        x = _nonneg_solve(fpi, np.eye(f.shape[1]))(f)
        if x is not None:
            z2, cert = x - psi, "nonnegative"
    ok = z2 is not None
    if ok:
        m = psi + theta @ z2
        ok = bool(np.all(m >= -tol)) and np.abs(fpi @ m - f).max() <= 1e-8
    return ValveReport(valve_edges, pi, rank, psi, theta, m_theta, z2, ok, cert if ok else None, ok)


def suggest_valve_placement(spec: NetworkSpec, complete: bool = True) -> set[str]:
    """Valve placement on the supply side, walked from the consumers back.

    Every heat source feeding the supply side gets a valve. At a splitting
    node each outgoing edge gets a valve unless it leads straight into
    another splitting node; at a merging node edges coming from a producer
    get a valve. Junctions of degree above three are rejected. With
    ``complete`` the rule set is topped up greedily until the rank and
    recovery checks pass.
    """
    side = spec.side
    sup = {n for n, s in side.items() if s == "supply"}
    incident = {n: 0 for n in sup}
    outs = {n: [] for n in sup}
    ins = {n: [] for n in sup}
    for e in spec.edges:
        t_sup, h_sup = e.tail in sup, e.head in sup
        if not (t_sup or h_sup):
            continue
        for n in (e.tail, e.head):
            if n in sup:
                incident[n] += 1
        directions = [(e.tail, e.head)] + ([(e.head, e.tail)] if e.bidirectional else [])
        for t, h in directions:
            if t in sup:
                outs[t].append((e, h))
            if h in sup:
                ins[h].append((e, t))

    for n, deg in incident.items():
        if deg > 3:
            raise UnsupportedTopologyError(f"supply junction {n} has degree {deg} > 3")

    splitting = {n for n in sup if len(outs[n]) >= 2}
    merging = {n for n in sup if len(ins[n]) >= 2}
    valves: set[str] = set()

    # sources: edges entering the supply side from the return side
    for n in sup:
        for e, t in ins[n]:
            if t not in sup:
                valves.add(e.id)

    # reverse cascade: breadth-first from the consumer-side sinks
    order, seen = [], set()
    frontier = sorted({e.tail if e.tail in sup else e.head for n in sup for e, h in outs[n]
                       if h not in sup})
    while frontier:
        nxt = []
        for n in frontier:
            if n in seen:
                continue
            seen.add(n)
            order.append(n)
            nxt.extend(t for e, t in ins[n] if t in sup)
        frontier = sorted(set(nxt) - seen)
    order.extend(sorted(sup - seen))
    producer_outlets = {spec.edge(eid).head for eid in spec.producers.values()}

    for n in order:
        if n in splitting:
            for e, h in outs[n]:
                if h not in splitting:
                    valves.add(e.id)
        if n in merging:
            for e, t in ins[n]:
                if t not in sup or t in producer_outlets:
                    valves.add(e.id)

    if not complete:
        return valves
    return _complete_valves(spec, valves)


def _unrepresented(loops: LoopStructure, valve_edges) -> int:
    """Number of distinct loop-membership columns of F that are not a
    nonnegative combination of the valve columns."""
    f = loops.fundamental
    fpi = f[:, list(valve_edges)]
    count = 0
    for col in {tuple(c) for c in f.T}:
        if fpi.shape[1] == 0:
            count += any(col)
            continue
        res = scipy.optimize.linprog(np.zeros(fpi.shape[1]), A_eq=fpi, b_eq=np.array(col),
                                     bounds=(0, None), method="highs")
        count += res.status != 0
    return count


def _complete_valves(spec: NetworkSpec, valves: set[str]) -> set[str]:
    def score(vs):
        s = with_valves(spec, vs)
        g = expand_bidirectional(s)
        loops = loop_structure(g)
        cols = valve_columns(g)
        rep = check_valve_assumption(loops, cols)
        return (rep.assumption_satisfied, rep.rank, -_unrepresented(loops, cols)), rep

    key, rep = score(valves)
    side = spec.side
    # supply-side pipes first, then everything else
    candidates = [e.id for e in spec.edges if e.id not in valves
                  and side.get(e.tail) == "supply" and side.get(e.head) == "supply"]
    candidates += [e.id for e in spec.edges if e.id not in valves and e.id not in candidates]
    while not rep.assumption_satisfied:
        if not candidates:
            raise NetworkError("no valve placement satisfies the rank condition")
        trials = [(score(valves | {eid}), eid) for eid in candidates]
        (best_key, best_rep), eid = max(trials, key=lambda t: t[0][0])
        if best_key <= key:
            raise NetworkError("valve completion stalled: no single valve improves the placement")
        valves = valves | {eid}
        candidates.remove(eid)
        key, rep = best_key, best_rep
        logger.info("valve completion: added %s (rank %d)", eid, rep.rank)
    return valves


def with_valves(spec: NetworkSpec, valves) -> NetworkSpec:
    from dataclasses import replace
    valves = set(valves)
    return NetworkSpec(spec.nodes, [replace(e, has_valve=e.id in valves) for e in spec.edges],
                       dict(spec.pairing), dict(spec.producers), dict(spec.consumers),
                       dict(spec.prosumers), dict(spec.storages))


def loops_to_csv(loops: LoopStructure, g: ExpandedGraph, path, which: str = "reduced") -> None:
    mat = loops.reduced if which == "reduced" else loops.fundamental
    header = ",".join(["loop"] + [g.label(k) for k in range(g.n_edges)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, row in enumerate(mat):
            fh.write(",".join([str(i)] + [f"{v:g}" for v in row]) + "\n")

