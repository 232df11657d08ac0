"""Bundles the hydraulic and thermal views of one network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hydraulics import HydraulicModel
from .network import (ExpandedGraph, LoopStructure, NetworkSpec, ValveReport,
                      check_valve_assumption, expand_bidirectional, loop_structure, valve_columns)
from .thermal import RHO, CP, InjectionLayout, ThermalGraph, injection_layout, refine_mesh

HX_KINDS = ("producer", "consumer", "prosumer")


def default_cells(spec: NetworkSpec, pipe_cells: int = 4, storage_cells: int = 4) -> dict:
    """One cell per heat exchanger, ``pipe_cells`` per pipe, ``storage_cells`` layers."""
    out = {}
    for e in spec.edges:
        if e.kind in HX_KINDS:
            out[e.id] = 1
        elif e.kind == "storage":
            out[e.id] = storage_cells
        else:
            out[e.id] = pipe_cells
    return out


@dataclass
class DhnModel:
    spec: NetworkSpec
    graph: ExpandedGraph
    loops: LoopStructure
    valves: ValveReport
    hydraulics: HydraulicModel
    thermal: ThermalGraph
    layout: InjectionLayout
    cells: dict = field(default_factory=dict)

    @classmethod
    def build(cls, spec: NetworkSpec, cells: dict | None = None, pump_scale: float = 1.0,
              ambient: float = 10.0, rho: float = RHO, cp: float = CP, loops=None, valves=None):
        g = expand_bidirectional(spec)
        loops = loops or loop_structure(g)
        valves = valves or check_valve_assumption(loops, valve_columns(g))
        hm = HydraulicModel.build(g, loops, valves, rho=rho, pump_scale=pump_scale)
        cells = dict(cells or default_cells(spec))
        tg = refine_mesh(g, cells, rho=rho, cp=cp, ambient=ambient)
        return cls(spec, g, loops, valves, hm, tg, injection_layout(tg), cells)

    def refined(self, beta: int) -> "DhnModel":
        """Same network with every cell split into ``beta`` sub-cells."""
        cells = {k: v * beta for k, v in self.cells.items()}
        tg = refine_mesh(self.graph, cells, self.thermal.rho, self.thermal.cp, self.thermal.ambient)
        return DhnModel(self.spec, self.graph, self.loops, self.valves, self.hydraulics, tg,
                        injection_layout(tg), cells)

    @property
    def ambient(self) -> float:
        return self.thermal.ambient

    @property
    def n_states(self) -> int:
        return self.thermal.n_nodes

    @property
    def m_r(self) -> int:
        return self.loops.m_r

    def hx_edge(self, name: str) -> str:
        s = self.spec
        for group in (s.producers, s.consumers, s.prosumers, s.storages):
            if name in group:
                return group[name]
        raise KeyError(name)

    def hx_cell(self, name: str) -> int:
        return self.thermal.edge_cells(self.hx_edge(name))[0]

    def inlet_node(self, name: str) -> int:
        """Junction feeding a heat exchanger in its forward direction."""
        return self.graph.edges[self.graph.edge_index(self.hx_edge(name))][0]

    @property
    def consumer_names(self) -> list[str]:
        """Consumers followed by prosumers, in layout order."""
        return [n for n, k in zip(self.layout.names, self.layout.kinds) if k != "producer"]

    @property
    def storage_edges(self) -> tuple[int, int] | None:
        """Expanded indices of the storage edge (charge, discharge)."""
        if not self.spec.storages:
            return None
        eid = next(iter(self.spec.storages.values()))
        return self.graph.edge_index(eid), self.graph.edge_index(eid, reverse=True)

    @property
    def storage_cells(self) -> np.ndarray:
        if not self.spec.storages:
            return np.zeros(0, dtype=int)
        eid = next(iter(self.spec.storages.values()))
        return np.array(self.thermal.edge_cells(eid), dtype=int)

    @property
    def storage_volume(self) -> float:
        if not self.spec.storages:
            return 0.0
        return float(self.thermal.volume[self.storage_cells].sum())

    def loops_through(self, edges) -> np.ndarray:
        """Mask of reduced loops using any of the given expanded edges."""
        edges = list(edges)
        if not edges:
            return np.zeros(self.m_r, dtype=bool)
        return self.loops.reduced[:, edges].sum(axis=1) > 0

    def bidirectional_pairs(self) -> list[tuple[int, int]]:
        return [(self.graph.counterpart(k), k) for k in range(self.graph.n_edges)
                if self.graph.reverse[k]]

    def edge_flows(self, q_r) -> np.ndarray:
        return self.hydraulics.edge_flows(q_r)
