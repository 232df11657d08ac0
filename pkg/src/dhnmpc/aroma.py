"""The AROMA benchmark layout extended with a prosumer, a second producer and a storage tank.

Supply nodes ``s1``..``s9`` mirror return nodes ``r1``..``r9``. Dimensions
fall inside the usual AROMA ranges (pipe diameters 70-107 mm, lengths
300-600 m); the storage is a 2 m x 8 m tank.
"""

from __future__ import annotations

from .network import Edge, NetworkSpec, suggest_valve_placement, with_valves

# (id, tail, head, length m, diameter m, bidirectional)
SUPPLY_PIPES = (
    ("s1s7", "s1", "s7", 350.0, 0.107, False),
    ("s7s2", "s7", "s2", 300.0, 0.107, False),
    ("s2s3", "s2", "s3", 400.0, 0.090, False),
    ("s2s4", "s2", "s4", 450.0, 0.100, False),
    ("s3s5", "s3", "s5", 500.0, 0.080, False),
    ("s4s6", "s4", "s6", 350.0, 0.080, True),
    ("s4s8", "s4", "s8", 550.0, 0.090, False),
    ("s5s6", "s5", "s6", 300.0, 0.070, True),
    ("s8s9", "s8", "s9", 600.0, 0.070, False),
)

# participant -> (supply node, kind)
EXCHANGERS = {
    "P1": ("s1", "producer"),
    "C5": ("s3", "consumer"),
    "C3": ("s5", "consumer"),
    "C1": ("s6", "prosumer"),
    "C2": ("s8", "consumer"),
    "C4": ("s9", "consumer"),
    "S": ("s7", "storage"),
}

PUMP_P1 = 2.0e5
PUMP_P2 = 1.2e5
PUMP_STORAGE = 6.0e4
Q_PIPE = 0.02
Q_HX = 0.015


def aroma_network(pump_scale: float = 1.0, valves=None, q_pipe: float = Q_PIPE) -> NetworkSpec:
    """Network description; valves are placed by the rule set unless given."""
    nodes = [f"s{i}" for i in range(1, 10)] + [f"r{i}" for i in range(1, 10)]
    pairing = {f"s{i}": f"r{i}" for i in range(1, 10)}
    edges = []
    for eid, t, h, length, d, bidir in SUPPLY_PIPES:
        qmin = -q_pipe if bidir else 0.0
        edges.append(Edge(eid, t, h, length, d, q_min=qmin, q_max=q_pipe))
        # the return pipe runs the mirrored route backwards
        rt, rh = pairing[h], pairing[t]
        edges.append(Edge(f"r{h[1:]}r{t[1:]}", rt, rh, length, d, q_min=qmin, q_max=q_pipe))

    producers, consumers, prosumers, storages = {}, {}, {}, {}
    for name, (s, kind) in EXCHANGERS.items():
        r = pairing[s]
        if kind == "producer":
            edges.append(Edge(name, r, s, 10.0, 0.1, q_max=2 * Q_HX, pump=PUMP_P1 * pump_scale,
                              kind=kind))
            producers[name] = name
        elif kind == "consumer":
            edges.append(Edge(name, s, r, 10.0, 0.1, q_max=Q_HX, kind=kind))
            consumers[name] = name
        elif kind == "prosumer":
            # forward: C1 consumes, reverse: P2 injects with its own pump
            edges.append(Edge(name, s, r, 10.0, 0.1, q_min=-Q_HX, q_max=Q_HX,
                              reverse_pump=PUMP_P2 * pump_scale, kind=kind))
            prosumers[name] = name
        else:
            # forward: charging from supply, reverse: discharging with the tank pump
            edges.append(Edge(name, s, r, 8.0, 2.0, q_min=-Q_HX, q_max=Q_HX,
                              reverse_pump=PUMP_STORAGE * pump_scale, heat_transfer=0.4,
                              kind=kind))
            storages[name] = name
    spec = NetworkSpec(nodes, edges, pairing, producers, consumers, prosumers, storages)
    if valves is None:
        valves = suggest_valve_placement(spec)
    return with_valves(spec, valves)
