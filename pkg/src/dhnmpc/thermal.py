"""Finite-volume thermal model on the refined network graph.

States are temperatures relative to ambient, one per junction and one per
inserted cell. Junctions carry no volume, so the model is a DAE: cell rows
are ODEs, junction rows are algebraic mixing constraints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import ExpandedGraph

RHO = 981.0
CP = 4182.0
JUNCTION_EPS = 1e-9


class DegenerateJunctionError(RuntimeError):
    """A junction has no through-flow and regularization is off."""


@dataclass(frozen=True)
class ThermalGraph:
    """Refined graph.

    Nodes ``0..n_junctions-1`` are the network junctions, the rest are cells
    in physical-edge order. Refined edge ``k`` runs ``tails[k] -> heads[k]``
    and carries the flow of expanded edge ``flow_index[k]``.
    """

    graph: ExpandedGraph
    l_x: np.ndarray              # cells per physical edge
    n_junctions: int
    volume: np.ndarray
    alpha: np.ndarray
    tails: np.ndarray
    heads: np.ndarray
    flow_index: np.ndarray
    cells: tuple                 # cells of each physical edge, tail to head
    labels: tuple
    rho: float = RHO
    cp: float = CP
    ambient: float = 10.0

    @property
    def n_nodes(self) -> int:
        return len(self.volume)

    @property
    def n_cells(self) -> int:
        return self.n_nodes - self.n_junctions

    @property
    def junctions(self) -> np.ndarray:
        return np.arange(self.n_junctions)

    @property
    def cell_nodes(self) -> np.ndarray:
        return np.arange(self.n_junctions, self.n_nodes)

    def incidence(self) -> np.ndarray:
        e = np.zeros((self.n_nodes, len(self.tails)))
        e[self.tails, np.arange(len(self.tails))] = -1.0
        e[self.heads, np.arange(len(self.tails))] = 1.0
        return e

    def adjacency(self) -> np.ndarray:
        d = np.zeros((self.n_nodes, self.n_nodes))
        d[self.tails, self.heads] = 1.0
        return d

    def edge_cells(self, eid: str) -> tuple:
        k = [e.id for e in self.graph.spec.edges].index(eid)
        return self.cells[k]

    def refined_flows(self, q) -> np.ndarray:
        """Flow on each refined edge from expanded-edge flows."""
        q = np.asarray(q, dtype=float)
        return q[..., self.flow_index]

    def node_inflow(self, q) -> np.ndarray:
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.heads, self.refined_flows(q))
        return out


def refine_mesh(g: ExpandedGraph, l_x, rho: float = RHO, cp: float = CP,
                ambient: float = 10.0) -> ThermalGraph:
    """Insert ``l_x[e]`` cells on physical edge ``e``.

    ``l_x`` is an int, a sequence over physical edges or a mapping from edge
    id to count (missing ids get 1). A bidirectional pipe gets one chain of
    cells that both directions run through.
    """
    spec = g.spec
    n_phys = len(spec.edges)
    if isinstance(l_x, dict):
        counts = np.array([int(l_x.get(e.id, 1)) for e in spec.edges])
    else:
        counts = np.broadcast_to(np.asarray(l_x, dtype=int), (n_phys,)).copy()
    if np.any(counts < 0):
        raise ValueError("l_x must be nonnegative")

    n_j = g.n_nodes
    volume = [0.0] * n_j
    alpha = [0.0] * n_j
    labels = list(g.nodes)
    cells = []
    nxt = n_j
    for k, e in enumerate(spec.edges):
        ids = tuple(range(nxt, nxt + counts[k]))
        nxt += counts[k]
        cells.append(ids)
        if counts[k]:
            v = e.volume / counts[k]
            a = 4.0 * e.heat_transfer * v / (rho * cp * e.diameter)
            for j in range(counts[k]):
                volume.append(v)
                alpha.append(a)
                labels.append(f"{e.id}[{j}]")

    tails, heads, flow = [], [], []
    for ke in range(g.n_edges):
        k = int(g.origin[ke])
        t, h = g.edges[ke]
        chain = list(cells[k])
        if g.reverse[ke]:
            chain = chain[::-1]
        path = [t] + chain + [h]
        for a, b in zip(path[:-1], path[1:]):
            tails.append(a)
            heads.append(b)
            flow.append(ke)
    return ThermalGraph(g, counts, n_j, np.array(volume), np.array(alpha), np.array(tails),
                        np.array(heads), np.array(flow), tuple(cells), tuple(labels), rho, cp,
                        ambient)


def advection_matrix(incidence, q):
    """1/2 E Q (|E| - E)^T; works on floats and on symbolic object arrays."""
    e = np.asarray(incidence)
    q = np.asarray(q)
    dtype = object if object in (e.dtype, q.dtype) else float
    e = e.astype(dtype)
    # (|E| - E) / 2 is the 0/1 tail indicator, exact for integer entries
    upstream = (np.abs(e) - e) // 2 if dtype is object else (np.abs(e) - e) / 2
    return e @ np.diag(q.astype(dtype)) @ upstream.T


class MatrixAssembler:
    """Sparse A(q) with structure fixed once; only values change with q."""

    def __init__(self, tg: ThermalGraph):
        self.tg = tg
        n = tg.n_nodes
        m = len(tg.tails)
        rows = np.concatenate([tg.tails, tg.heads, np.arange(n)])
        cols = np.concatenate([tg.tails, tg.tails, np.arange(n)])
        # value = sign * q[flow_index] for the first 2m entries, -alpha for the diagonal
        pattern = sp.coo_matrix((np.arange(1, 2 * m + n + 1, dtype=float), (rows, cols)),
                                shape=(n, n))
        csr = pattern.tocsr()
        csr.sum_duplicates()
        self.indptr, self.indices = csr.indptr, csr.indices
        # map from raw entries to csr slots via a lookup on (row, col)
        slot = {}
        for r in range(n):
            for s in range(csr.indptr[r], csr.indptr[r + 1]):
                slot[(r, csr.indices[s])] = s
        raw_slot = np.array([slot[(r, c)] for r, c in zip(rows, cols)])
        nnz = len(csr.indices)
        sign = np.concatenate([-np.ones(m), np.ones(m)])
        flow_cols = np.concatenate([tg.flow_index, tg.flow_index])
        self.q_map = sp.csr_matrix((sign, (raw_slot[:2 * m], flow_cols)),
                                   shape=(nnz, tg.graph.n_edges))
        self.const = np.zeros(nnz)
        np.add.at(self.const, raw_slot[2 * m:], -tg.alpha)
        self.shape = (n, n)

    def values(self, q, alpha_scale: float = 1.0) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if np.any(q < 0):
            raise ValueError("edge flows must be nonnegative in the expanded graph")
        return self.q_map @ q + alpha_scale * self.const

    def matrix(self, q, alpha_scale: float = 1.0) -> sp.csr_matrix:
        return sp.csr_matrix((self.values(q, alpha_scale), self.indices, self.indptr),
                             shape=self.shape)


def assemble_A(tg: ThermalGraph, q, alpha_scale: float = 1.0) -> sp.csr_matrix:
    """A(q) = 1/2 E Q (|E| - E)^T - D_alpha on the refined graph."""
    return MatrixAssembler(tg).matrix(q, alpha_scale)


@dataclass(frozen=True)
class InjectionLayout:
    """Heat-exchanger columns of B.

    ``rows[j]`` and ``weights[j]`` give the cells that column ``j`` spreads
    over; the controller model uses one cell per exchanger.
    """

    names: tuple
    kinds: tuple
    rows: tuple
    weights: tuple
    n_nodes: int
    rho: float = RHO
    cp: float = CP

    def matrix(self) -> sp.csr_matrix:
        r, c, v = [], [], []
        for j, (rows, w) in enumerate(zip(self.rows, self.weights)):
            r.extend(rows)
            c.extend([j] * len(rows))
            v.extend(np.asarray(w) / (self.rho * self.cp))
        return sp.csr_matrix((v, (r, c)), shape=(self.n_nodes, len(self.names)))

    def index(self, name: str) -> int:
        return self.names.index(name)


def injection_layout(tg: ThermalGraph) -> InjectionLayout:
    """One column per producer, consumer and prosumer, ordered by first row."""
    spec = tg.graph.spec
    items = []
    for kind, group in (("producer", spec.producers), ("consumer", spec.consumers),
                        ("prosumer", spec.prosumers)):
        for name, eid in group.items():
            rows = tg.edge_cells(eid)
            if not rows:
                raise ValueError(f"heat exchanger {eid} needs at least one cell")
            vol = tg.volume[list(rows)]
            items.append((rows[0], name, kind, tuple(rows), tuple(vol / vol.sum())))
    items.sort()
    return InjectionLayout(tuple(i[1] for i in items), tuple(i[2] for i in items),
                           tuple(i[3] for i in items), tuple(i[4] for i in items), tg.n_nodes,
                           tg.rho, tg.cp)


class ImplicitEuler:
    """Implicit-Euler stepping of V x' = A(q) x + B w.

    Junction rows with no through-flow are held at their previous value
    (``regularize``) or rejected.
    """

    def __init__(self, tg: ThermalGraph, layout: InjectionLayout | None = None,
                 regularize: bool = True, eps: float = JUNCTION_EPS, alpha_scale: float = 1.0):
        self.tg = tg
        self.assembler = MatrixAssembler(tg)
        self.layout = layout or injection_layout(tg)
        self.B = self.layout.matrix()
        self.V = sp.diags(tg.volume)
        self.regularize = regularize
        self.eps = eps
        self.alpha_scale = alpha_scale
        self._key = None
        self._lu = None
        self._hold = None

    def factor(self, q, tau: float):
        q = np.asarray(q, dtype=float)
        key = (q.tobytes(), float(tau))
        if key == self._key:
            return
        a = self.assembler.matrix(q, self.alpha_scale)
        outflow = -a.diagonal()[: self.tg.n_junctions]
        dead = np.flatnonzero(outflow <= self.eps)
        if dead.size and not self.regularize:
            names = [self.tg.labels[i] for i in dead]
            raise DegenerateJunctionError(f"junctions without through-flow: {names}")
        hold = np.zeros(self.tg.n_nodes)
        hold[dead] = self.eps
        m = (self.V - tau * a + tau * sp.diags(hold)).tocsc()
        self._lu = spla.splu(m)
        self._hold = hold
        self._key = key

    def step(self, x, q, w, tau: float) -> np.ndarray:
        self.factor(q, tau)
        x = np.asarray(x, dtype=float)
        rhs = self.V @ x + tau * (self.B @ np.asarray(w, dtype=float)) + tau * self._hold * x
        return self._lu.solve(rhs)

    def run(self, x0, q, w, tau: float, steps: int) -> np.ndarray:
        xs = [np.asarray(x0, dtype=float)]
        for _ in range(steps):
            xs.append(self.step(xs[-1], q, w, tau))
        return np.array(xs)


def step_implicit_euler(tg: ThermalGraph, x, q, w, tau: float, layout=None, regularize=True):
    return ImplicitEuler(tg, layout, regularize).step(x, q, w, tau)


def dae_residuals(tg: ThermalGraph, x_next, x, q, w, tau: float, layout=None):
    """Split residuals of the implicit step.

    Returns ``(f, g)``: ``f`` on cell rows is ``V (x+ - x) - tau (A x+ + B w)``
    and ``g`` on junction rows is ``A x+ + B w``.
    """
    layout = layout or injection_layout(tg)
    a = assemble_A(tg, q)
    rate = a @ x_next + layout.matrix() @ np.asarray(w, dtype=float)
    cells = tg.cell_nodes
    f = tg.volume[cells] * (x_next[cells] - np.asarray(x)[cells]) - tau * rate[cells]
    return f, rate[: tg.n_junctions]


def mix_temperature(flows, temps, eps: float = 0.0, previous: float | None = None) -> float:
    """Flow-weighted mixing temperature; with ``eps`` it falls back to ``previous``."""
    flows = np.asarray(flows, dtype=float)
    temps = np.asarray(temps, dtype=float)
    num = float(flows @ temps) + (eps * previous if previous is not None else 0.0)
    den = float(flows.sum()) + (eps if previous is not None else 0.0)
    if den <= 0.0:
        raise DegenerateJunctionError("no inflow to mix")
    return num / den


@dataclass(frozen=True)
class CflReport:
    ratio: np.ndarray
    flagged: np.ndarray
    cells: np.ndarray

    @property
    def max_ratio(self) -> float:
        return float(self.ratio.max(initial=0.0))


def check_cfl(tg: ThermalGraph, q, tau: float) -> CflReport:
    """Courant number inflow * tau / V per cell; flagged above 1."""
    cells = tg.cell_nodes
    ratio = tg.node_inflow(q)[cells] * tau / tg.volume[cells]
    return CflReport(ratio, cells[ratio > 1.0], cells)


def write_state_csv(tg: ThermalGraph, x, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "kind", "temperature_C"])
        for i, label in enumerate(tg.labels):
            kind = "junction" if i < tg.n_junctions else "cell"
            w.writerow([label, kind, f"{x[i] + tg.ambient:.6f}"])
