import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from dhnmpc.network import Edge, ExpandedGraph, NetworkSpec, expand_bidirectional
from dhnmpc.thermal import (DegenerateJunctionError, ImplicitEuler, advection_matrix, assemble_A,
                            check_cfl, dae_residuals, injection_layout, mix_temperature,
                            refine_mesh, step_implicit_euler, write_state_csv)

from conftest import chain_spec, hx, nodes, paired, pipe


def raw_graph(node_list, edges, directed):
    """Expanded graph built by hand, without the connectivity check."""
    spec = NetworkSpec(node_list, edges, {})
    idx = {n: i for i, n in enumerate(node_list)}
    pairs = [(idx[t], idx[h]) for t, h in directed]
    origin = []
    reverse = []
    for t, h in directed:
        k = next(i for i, e in enumerate(edges) if {e.tail, e.head} == {t, h})
        origin.append(k)
        reverse.append(edges[k].tail != t)
    inc = np.zeros((len(node_list), len(pairs)))
    adj = np.zeros((len(node_list), len(node_list)))
    for k, (t, h) in enumerate(pairs):
        inc[t, k], inc[h, k] = -1, 1
        adj[t, h] = 1
    return ExpandedGraph(spec, tuple(node_list), tuple(pairs), np.array(origin),
                         np.array(reverse), inc, adj)


def example_graph():
    # edges 1->2, 2->1 (one bidirectional pipe) and 1->3
    edges = [pipe("a", "n1", "n2", q_min=-0.01), pipe("b", "n1", "n3")]
    return raw_graph(["n1", "n2", "n3"], edges, [("n1", "n2"), ("n2", "n1"), ("n1", "n3")])


def test_example_matrix_symbolic():
    q12, q21, q13 = sympy.symbols("q12 q21 q13")
    e = np.array([[-1, 1, -1], [1, -1, 0], [0, 0, 1]], dtype=object)
    got = sympy.Matrix(advection_matrix(e, np.array([q12, q21, q13], dtype=object)))
    expected = sympy.Matrix([[-q12 - q13, q21, 0], [q12, -q21, 0], [q13, 0, 0]])
    assert sympy.simplify(got - expected) == sympy.zeros(3, 3)


def test_example_matrix_through_assembly():
    g = example_graph()
    tg = refine_mesh(g, 0)
    q = np.array([3.0, 5.0, 7.0])      # q12, q21, q13
    a = assemble_A(tg, q, alpha_scale=0.0).toarray()
    expected = np.array([[-3.0 - 7.0, 5.0, 0.0], [3.0, -5.0, 0.0], [7.0, 0.0, 0.0]])
    np.testing.assert_array_equal(a, expected)
    np.testing.assert_array_equal(advection_matrix(g.incidence, q), expected)


def test_refine_zero_keeps_topology():
    g = expand_bidirectional(chain_spec())
    tg = refine_mesh(g, 0)
    assert tg.n_cells == 0
    assert list(zip(tg.tails, tg.heads)) == list(g.edges)


def test_refine_directed_chain_pattern():
    g = raw_graph(["t", "h"], [pipe("e", "t", "h")], [("t", "h")])
    tg = refine_mesh(g, 3)
    order = [0, 2, 3, 4, 1]            # t, three cells, h
    block = tg.adjacency()[np.ix_(order, order)]
    np.testing.assert_array_equal(block, np.eye(5, k=1))


def test_refine_bidirectional_chain_pattern():
    g = raw_graph(["t", "h"], [pipe("e", "t", "h", q_min=-0.01)], [("t", "h"), ("h", "t")])
    tg = refine_mesh(g, 2)
    order = [0, 2, 3, 1]
    block = tg.adjacency()[np.ix_(order, order)]
    np.testing.assert_array_equal(block, np.eye(4, k=1) + np.eye(4, k=-1))


def test_cell_volume_and_loss_coefficient():
    e = pipe("e", "t", "h", length=400.0, diameter=0.1, heat_transfer=0.4)
    g = raw_graph(["t", "h"], [e], [("t", "h")])
    tg = refine_mesh(g, 4, rho=981.0, cp=4182.0)
    v = np.pi * 0.05**2 * 100.0
    np.testing.assert_allclose(tg.volume[2:], v)
    np.testing.assert_allclose(tg.alpha[2:], 4 * 0.4 * v / (981.0 * 4182.0 * 0.1))
    assert np.all(tg.volume[:2] == 0)


def test_storage_layer_volume(aroma_model):
    tg = aroma_model.thermal
    layers = tg.edge_cells("S")
    np.testing.assert_allclose(tg.volume[list(layers)], np.pi * 1.0**2 * 8.0 / len(layers))


def test_zero_flow_leaves_only_losses(aroma_model):
    tg = aroma_model.thermal
    a = assemble_A(tg, np.zeros(aroma_model.graph.n_edges)).toarray()
    np.testing.assert_array_equal(a, -np.diag(tg.alpha))


def test_assembly_against_stencil(aroma_model, rng):
    tg = aroma_model.thermal
    q = rng.uniform(0, 0.01, aroma_model.graph.n_edges)
    a = assemble_A(tg, q, alpha_scale=0.0).toarray()
    ref = np.zeros_like(a)
    for t, h, k in zip(tg.tails, tg.heads, tg.flow_index):
        ref[h, t] += q[k]
        ref[t, t] -= q[k]
    np.testing.assert_allclose(a, ref, atol=1e-15)
    np.testing.assert_allclose(a.sum(axis=0), 0.0, atol=1e-15)


def test_negative_flow_rejected(aroma_model):
    q = np.zeros(aroma_model.graph.n_edges)
    q[0] = -1e-3
    with pytest.raises(ValueError):
        assemble_A(aroma_model.thermal, q)


def single_cell():
    """One consumer cell fed by a big upstream cell, closed through a return pipe."""
    edges = [hx("P", "r1", "s1", "producer", pump=1e5), pipe("s1s2", "s1", "s2"),
             hx("C", "s2", "r2", "consumer"), pipe("r2r1", "r2", "r1")]
    spec = NetworkSpec(nodes(2), edges, paired(2), {"P": "P"}, {"C": "C"})
    g = expand_bidirectional(spec)
    return refine_mesh(g, {"P": 1, "s1s2": 0, "C": 1, "r2r1": 0})


def test_single_cell_step_by_hand():
    tg = single_cell()
    lay = injection_layout(tg)
    c = tg.edge_cells("C")[0]
    p = tg.edge_cells("P")[0]
    q = np.full(tg.graph.n_edges, 0.002)
    x = np.zeros(tg.n_nodes)
    x[p], x[c] = 60.0, 20.0
    w = np.zeros(len(lay.names))
    w[lay.index("C")] = -5e3
    tau = 300.0
    x1 = step_implicit_euler(tg, x, q, w, tau, lay)
    v, al = tg.volume[c], tg.alpha[c]
    # the inlet junction s2 follows x1[p] algebraically; cell C solves a scalar equation
    x_in = x1[tg.graph.node_index("s2")]
    expected = (v * x[c] + tau * (q[0] * x_in + w[lay.index("C")] / (tg.rho * tg.cp))) \
        / (v + tau * (q[0] + al))
    assert x1[c] == pytest.approx(expected, rel=1e-12)
    assert x_in == pytest.approx(x1[p], rel=1e-12)


def test_single_cell_fixed_point():
    tg = single_cell()
    lay = injection_layout(tg)
    c = tg.edge_cells("C")[0]
    p = tg.edge_cells("P")[0]
    q = np.full(tg.graph.n_edges, 0.002)
    # heat the producer cell enough to hold its own temperature, then look at C
    x = np.zeros(tg.n_nodes)
    w = np.zeros(len(lay.names))
    w[lay.index("C")] = -5e3
    w[lay.index("P")] = 5e3
    stepper = ImplicitEuler(tg, lay)
    for _ in range(2000):
        x = stepper.step(x, q, w, 3600.0)
    x_in = x[tg.graph.node_index("s2")]
    fixed = (q[0] * x_in + w[lay.index("C")] / (tg.rho * tg.cp)) / (q[0] + tg.alpha[c])
    assert x[c] == pytest.approx(fixed, rel=1e-9)
    assert x[p] > x[c]


def ring(n_cells):
    edges = [pipe("ab", "a", "b"), pipe("bc", "b", "c"), pipe("ca", "c", "a")]
    g = expand_bidirectional(NetworkSpec(["a", "b", "c"], edges, {}))
    per = n_cells // 3
    return g, refine_mesh(g, [per, per, n_cells - 2 * per])


def test_conservation_without_losses(rng):
    g, tg = ring(50)
    stepper = ImplicitEuler(tg, alpha_scale=0.0)
    x = rng.uniform(20, 80, tg.n_nodes)
    q = np.full(g.n_edges, 0.003)
    e0 = tg.volume @ x
    for _ in range(200):
        x = stepper.step(x, q, np.zeros(0), 900.0)
        assert abs(tg.volume @ x - e0) <= 1e-9 * abs(e0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=33, max_size=33), st.floats(1e-4, 0.02),
       st.floats(10.0, 3600.0))
def test_maximum_principle(vals, qv, tau):
    g, tg = ring(30)
    x = np.array(vals)
    x1 = step_implicit_euler(tg, x, np.full(g.n_edges, qv), np.zeros(0), tau)
    assert x1.min() >= -1e-9
    assert x1.max() <= x.max() + 1e-9


def test_junction_rows_are_algebraic(aroma_model, rng):
    tg = aroma_model.thermal
    assert np.all(tg.volume[: tg.n_junctions] == 0)
    assert np.all(tg.volume[tg.n_junctions:] > 0)
    q = aroma_model.edge_flows(rng.uniform(0, 2e-3, aroma_model.m_r))
    w = rng.normal(0, 1e4, len(aroma_model.layout.names))
    x = rng.uniform(20, 80, tg.n_nodes)
    x1 = ImplicitEuler(tg, aroma_model.layout, eps=0.0).step(x, q, w, 900.0) \
        if np.all(tg.node_inflow(q)[: tg.n_junctions] > 0) else None
    if x1 is None:
        pytest.skip("random flow left a junction dry")
    f, gres = dae_residuals(tg, x1, x, q, w, 900.0, aroma_model.layout)
    assert np.abs(f).max() <= 1e-9 * np.abs(tg.volume @ x).max()
    assert np.abs(gres).max() <= 1e-12
    # mixing: every junction is the flow-weighted mean of its inflows
    for j in range(tg.n_junctions):
        into = [(tg.refined_flows(q)[k], x1[t]) for k, (t, h) in enumerate(zip(tg.tails, tg.heads))
                if h == j]
        fl, tp = zip(*into)
        assert x1[j] == pytest.approx(mix_temperature(fl, tp), rel=1e-10)


def test_mixing_examples():
    assert mix_temperature([1.0, 1.0], [60.0, 80.0]) == pytest.approx(70.0)
    assert mix_temperature([2.0], [65.0]) == pytest.approx(65.0)
    assert mix_temperature([1.0, 2.0, 3.0], [60.0, 70.0, 80.0]) == pytest.approx(440.0 / 6.0)
    with pytest.raises(DegenerateJunctionError):
        mix_temperature([0.0, 0.0], [60.0, 70.0])
    assert mix_temperature([0.0], [60.0], eps=1e-9, previous=42.0) == pytest.approx(42.0)


def test_dead_junction_handling():
    g, tg = ring(9)
    x = np.linspace(10, 50, tg.n_nodes)
    q = np.zeros(g.n_edges)
    x1 = step_implicit_euler(tg, x, q, np.zeros(0), 900.0)
    np.testing.assert_allclose(x1[: tg.n_junctions], x[: tg.n_junctions])
    with pytest.raises(DegenerateJunctionError):
        step_implicit_euler(tg, x, q, np.zeros(0), 900.0, regularize=False)


def test_cfl_report():
    g = raw_graph(["t", "h"], [pipe("e", "t", "h", length=100.0, diameter=0.1)], [("t", "h")])
    tg = refine_mesh(g, 1)
    v = tg.volume[2]
    rep = check_cfl(tg, [v / 900.0], 900.0)
    assert rep.ratio[0] == pytest.approx(1.0) and rep.flagged.size == 0
    rep = check_cfl(tg, [2 * v / 900.0], 900.0)
    assert rep.max_ratio == pytest.approx(2.0) and rep.flagged.tolist() == [2]


def test_cfl_aroma_by_hand(aroma_model, rng):
    tg = aroma_model.thermal
    q = aroma_model.edge_flows(rng.uniform(0, 2e-3, aroma_model.m_r))
    rep = check_cfl(tg, q, 900.0)
    for i, c in enumerate(rep.cells):
        e = aroma_model.spec.edges[next(k for k, cells in enumerate(tg.cells) if c in cells)]
        inflow = sum(q[k] for k in range(aroma_model.graph.n_edges)
                     if aroma_model.graph.physical(k).id == e.id)
        v = e.volume / tg.l_x[[x.id for x in aroma_model.spec.edges].index(e.id)]
        assert rep.ratio[i] == pytest.approx(inflow * 900.0 / v)


def transit_error(l_x):
    # a huge upstream tank feeding one pipe; the outlet should jump after V/q
    edges = [Edge("P", "r1", "s1", 100.0, 2.0, kind="producer", pump=1e5, q_max=0.1),
             pipe("s1s2", "s1", "s2", length=300.0, diameter=0.08),
             Edge("C", "s2", "r2", 100.0, 2.0, kind="consumer", q_max=0.1),
             pipe("r2r1", "r2", "r1")]
    spec = NetworkSpec(nodes(2), edges, paired(2), {"P": "P"}, {"C": "C"})
    g = expand_bidirectional(spec)
    tg = refine_mesh(g, {"P": 1, "s1s2": l_x, "C": 1, "r2r1": 1})
    q = np.full(g.n_edges, 0.005)
    delay = edges[1].volume / 0.005
    x = np.zeros(tg.n_nodes)
    x[list(tg.edge_cells("P"))] = 1.0
    x[tg.graph.node_index("s1")] = 1.0
    stepper = ImplicitEuler(tg, alpha_scale=0.0)
    tau = delay / 400
    out = tg.graph.node_index("s2")
    for k in range(1, 1200):
        x = stepper.step(x, q, np.zeros(2), tau)
        if x[out] >= 0.5:
            return abs(k * tau - delay) / delay
    return 1.0


def test_refinement_sharpens_transport_delay():
    assert transit_error(32) < transit_error(4)


def test_state_csv(tmp_path, aroma_model):
    tg = aroma_model.thermal
    write_state_csv(tg, np.zeros(tg.n_nodes), tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "node,kind,temperature_C"
    assert len(lines) == tg.n_nodes + 1
    assert lines[1].endswith(f",junction,{tg.ambient:.6f}")
