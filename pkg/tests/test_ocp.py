import casadi as ca
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from dhnmpc.model import DhnModel, default_cells
from dhnmpc.network import suggest_valve_placement, with_valves
from dhnmpc.ocp import (JUNCTION_HOLD, OcpData, OcpInputError, OcpOptions, OcpProblem, Producer,
                        apply_move_blocking, derivative_check, eval_objective, free_indices,
                        solve_nlp)
from dhnmpc.thermal import ImplicitEuler, assemble_A

from conftest import chain_spec, fork_spec


def toy(spec, pipe_cells):
    spec = with_valves(spec, suggest_valve_placement(spec))
    return DhnModel.build(spec, default_cells(spec, pipe_cells=pipe_cells))


@pytest.fixture(scope="module")
def chain():
    return toy(chain_spec(), 2)


@pytest.fixture(scope="module")
def fork():
    return toy(fork_spec(), 3)


def demand(model, n, kw):
    dist = np.zeros((n, len(model.layout.names)))
    for j, kind in enumerate(model.layout.kinds):
        if kind != "producer":
            dist[:, j] = -kw
    return dist


def data_for(model, n, x0_c, kw, price=1.0):
    x0 = np.full(model.n_states, x0_c - model.ambient)
    return OcpData(x0, demand(model, n, kw), np.full(n, price))


def ie_with_hold(model, x0, q_edge, w, tau):
    """Implicit Euler with the small junction hold the NLP carries on every junction."""
    tg = model.thermal
    a = assemble_A(tg, q_edge).toarray()
    v = np.diag(tg.volume)
    h = np.zeros(tg.n_nodes)
    h[: tg.n_junctions] = 1e-3 * JUNCTION_HOLD
    b = model.layout.matrix().toarray()
    return np.linalg.solve(v - tau * a + tau * np.diag(h), v @ x0 + tau * b @ w + tau * h * x0)


# move blocking ---------------------------------------------------------------

def test_blocking_examples():
    assert free_indices(apply_move_blocking(8, block=4)).tolist() == [0, 4]
    np.testing.assert_array_equal(apply_move_blocking(8, block=1), np.arange(8))
    m = apply_move_blocking(10, 6, block=2)
    assert free_indices(m).tolist() == [0, 2, 4, 6]
    assert np.all(m[6:] == 6)
    with pytest.raises(ValueError):
        apply_move_blocking(4, block=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 8))
def test_blocking_properties(n, n_c, block):
    n_c = min(n_c, n)
    m = apply_move_blocking(n, n_c, block)
    assert m[0] == 0
    assert np.all(np.diff(m) >= 0)
    assert np.all(m <= np.minimum(np.arange(n), n_c))
    assert set(m) == set(free_indices(m))
    inside = np.arange(n) < n_c
    assert np.all(np.arange(n)[inside] - m[inside] < block)


def test_options_validation():
    with pytest.raises(ValueError):
        OcpOptions(horizon=0)
    with pytest.raises(ValueError):
        OcpOptions(horizon=8, control_horizon=9)
    with pytest.raises(ValueError):
        OcpOptions(w_slack=-1.0)
    with pytest.raises(ValueError):
        OcpOptions(temp_power=3)


# objective -------------------------------------------------------------------

def test_eval_objective_examples():
    o = OcpOptions(w_diff=2.0)
    _, t = eval_objective([[1.0], [3.0]], opts=o)
    assert t["diff"] == pytest.approx(8.0)
    _, t = eval_objective(np.full((5, 1), 4.0), opts=o)
    assert t["diff"] == 0.0
    _, t = eval_objective([[1.0]], opts=o, slacks={"s_in": np.zeros(3)})
    assert t["slack"] == 0.0
    total, t = eval_objective([[2.0, 5.0]], price=[3.0], opts=OcpOptions(), factors=[1.0, 0.0])
    assert t["price"] == pytest.approx(6.0)
    assert total == pytest.approx(sum(t.values()))


def test_solution_terms_match_eval_objective(chain):
    o = OcpOptions(horizon=4, block=2)
    pb = OcpProblem(chain, o, [Producer("P", "P", 300.0)])
    d = data_for(chain, 4, 72.0, 30.0)
    sol = pb.solve(d)
    assert sol.success
    sl = {k: sol.slacks[k] for k in ("s_in", "s_floor")}
    total, terms = eval_objective(sol.power / 1e3, sol.states[1:], d.price, o, sl)
    for k in ("price", "temperature", "diff", "slack"):
        assert sol.terms[k] == pytest.approx(terms[k], rel=1e-9, abs=1e-12)


# derivatives ------------------------------------------------------------------

def test_derivative_check_on_toy(fork):
    assert fork.n_states == 21
    pb = OcpProblem(fork, OcpOptions(horizon=4, block=2), [Producer("P", "P", 200.0)])
    rep = derivative_check(pb, data_for(fork, 4, 70.0, 20.0), points=100, seed=3)
    assert rep.points == 100
    assert rep.gradient_error <= 1e-6
    assert rep.jacobian_error <= 1e-6


def test_consistent_states_zero_dynamics(fork, rng):
    pb = OcpProblem(fork, OcpOptions(horizon=3, block=1), [Producer("P", "P", 200.0)])
    d = data_for(fork, 3, 70.0, 20.0)
    p = pb.params(d)
    z = pb.consistent_states(rng.uniform(0, 1, pb.n_z), p)
    assert np.abs(pb.constraints(z, p)[pb.constraint_rows("dyn")]).max() <= 1e-9


# optimality oracles -----------------------------------------------------------

def test_single_step_reproduces_implicit_euler(chain):
    o = OcpOptions(horizon=1, block=1)
    pb = OcpProblem(chain, o, [Producer("P", "P", 300.0)])
    d = data_for(chain, 1, 69.0, 30.0)
    sol = pb.solve(d)
    assert sol.success
    q = chain.edge_flows(sol.loop_flows[0])
    w = np.array([sol.power[0, 0], -30e3])
    x1 = ie_with_hold(chain, d.x0, q, w, o.tau)
    np.testing.assert_allclose(sol.states[1], x1, rtol=0, atol=1e-8)
    # the hold is tiny next to the through-flow
    plain = ImplicitEuler(chain.thermal, chain.layout).step(d.x0, q, w, o.tau)
    assert np.abs(plain - x1).max() <= 1e-3


@pytest.mark.parametrize("price,load", [(0.0, 30.0), (1.0, 0.0)])
def test_one_step_grid_oracle(chain, price, load):
    """Zero price drives temperatures to the lower bound; zero load leaves only losses."""
    o = OcpOptions(horizon=1, block=1, w_temp=1e-2)
    pb = OcpProblem(chain, o, [Producer("P", "P", 300.0)])
    d = data_for(chain, 1, 69.0, load, price)
    sol = pb.solve(d)
    assert sol.success
    amb = chain.ambient
    tmin = o.t_supply_min - amb
    floor = o.t_return_floor + o.floor_margin - amb
    inlet, cell = chain.inlet_node("C"), chain.hx_cell("C")

    def f(q_r, p_kw):
        x = ie_with_hold(chain, d.x0, chain.edge_flows([q_r]), np.array([p_kw, -load]) * 1e3,
                         o.tau)
        sl = {"in": max(0.0, tmin - x[inlet]), "fl": max(0.0, floor - x[cell])}
        return eval_objective([[p_kw]], [x], [price], o, sl)[0]

    def inner(q_r):
        return minimize_scalar(lambda p: f(q_r, p), bounds=(0.0, 300.0), method="bounded",
                               options={"xatol": 1e-10}).fun

    grid = np.linspace(1e-6, 1e-3 * pb.q_upper[0], 400)
    best = min(inner(v) for v in grid)
    assert sol.objective <= best * (1 + 1e-6)
    assert best - sol.objective <= 1e-4 * abs(best)
    assert sol.states[1][inlet] == pytest.approx(tmin, abs=1e-3)


def test_equality_qp_matches_kkt(rng):
    n, m = 5, 2
    a = rng.normal(size=(n, n))
    h = a @ a.T + n * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    x = ca.SX.sym("x", n)
    nlp = {"x": x, "f": 0.5 * ca.mtimes([x.T, ca.DM(h), x]) + ca.dot(ca.DM(c), x),
           "g": ca.mtimes(ca.DM(A), x)}
    res = solve_nlp(nlp, np.zeros(n), lbg=b, ubg=b)
    kkt = np.block([[h, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(kkt, np.concatenate([-c, b]))
    assert res.status == "optimal"
    np.testing.assert_allclose(res.z, sol[:n], atol=1e-6)
    np.testing.assert_allclose(res.lam_g, sol[n:], atol=1e-6)


def test_feasible_instance_needs_no_slack(fork):
    pb = OcpProblem(fork, OcpOptions(horizon=8), [Producer("P", "P", 400.0)])
    sol = pb.solve(data_for(fork, 8, 78.0, 20.0))
    assert sol.success
    for v in sol.slacks.values():
        assert np.abs(v).max(initial=0.0) <= 1e-6


def test_box_slacks_are_state_violations(fork):
    o = OcpOptions(horizon=4, block=2, t_box=(70.0, 90.0))
    pb = OcpProblem(fork, o, [Producer("P", "P", 400.0)])
    sol = pb.solve(data_for(fork, 4, 72.0, 40.0))
    assert sol.success
    x = sol.states[1:] + fork.ambient
    expected = np.maximum(0.0, np.maximum(70.0 - x, x - 90.0))
    np.testing.assert_allclose(sol.slacks["s_box"], expected, atol=1e-12)
    # consumer outlets sit below the band; everything else stays inside it
    cells = [fork.hx_cell(c) for c in ("CA", "CB")]
    others = np.setdiff1d(np.arange(fork.n_states), cells)
    assert sol.slacks["s_box"][:, others].max() <= 1e-3


def test_blocked_inputs_constant_within_blocks(fork):
    pb = OcpProblem(fork, OcpOptions(horizon=8, block=4), [Producer("P", "P", 400.0)])
    sol = pb.solve(data_for(fork, 8, 72.0, 25.0))
    assert sol.success
    for blk in (slice(0, 4), slice(4, 8)):
        assert np.all(sol.loop_flows[blk] == sol.loop_flows[blk][0])
        assert np.all(sol.power[blk] == sol.power[blk][0])


def test_solution_flows_are_realizable(fork):
    pb = OcpProblem(fork, OcpOptions(horizon=8), [Producer("P", "P", 400.0)])
    sol = pb.solve(data_for(fork, 8, 72.0, 25.0))
    hm = fork.hydraulics
    for q_r in sol.loop_flows:
        assert np.all(hm.loop_feasibility(q_r) <= 1e-6 * hm.pump.max())
        state = hm.recover_actuators(fork.edge_flows(q_r))
        assert np.all(state.nu >= 0)
        assert np.abs(hm.loop_equality_residual(fork.edge_flows(q_r), state)).max() \
            <= 1e-6 * hm.pump.max()


# solver contract --------------------------------------------------------------

def test_crossed_bounds_report_infeasible(chain):
    pb = OcpProblem(chain, OcpOptions(horizon=2, block=1), [Producer("P", "P", 10.0, 20.0)])
    sol = pb.solve(data_for(chain, 2, 70.0, 10.0))
    assert sol.status == "infeasible" and not sol.success


def test_bad_inputs_raise(chain):
    pb = OcpProblem(chain, OcpOptions(horizon=4, block=1), [Producer("P", "P", 100.0)])
    d = data_for(chain, 4, 70.0, 10.0)
    with pytest.raises(OcpInputError):
        pb.solve(OcpData(d.x0, d.disturbance[:2], d.price))
    with pytest.raises(OcpInputError):
        pb.solve(OcpData(d.x0[:-1], d.disturbance, d.price))
    with pytest.raises(OcpInputError):
        pb.solve(OcpData(d.x0, d.disturbance, d.price[:3]))
    with pytest.raises(ValueError):
        OcpProblem(chain, OcpOptions(horizon=4), [])


def test_deterministic(fork):
    pb = OcpProblem(fork, OcpOptions(horizon=6, block=2), [Producer("P", "P", 400.0)])
    d = data_for(fork, 6, 72.0, 25.0)
    a, b = pb.solve(d), pb.solve(d)
    np.testing.assert_array_equal(a.z, b.z)


def test_warm_start_shift(fork):
    o = OcpOptions(horizon=6, block=1)
    pb = OcpProblem(fork, o, [Producer("P", "P", 400.0)])
    d = data_for(fork, 6, 72.0, 25.0)
    cold = pb.solve(d)
    guess = pb.warm_start(cold, d)
    a, b = pb.offsets["x"]
    x_prev = cold.z[a:b].reshape(6, -1)
    x_new = guess[a:b].reshape(6, -1)
    np.testing.assert_array_equal(x_new[:-1], x_prev[1:])
    np.testing.assert_array_equal(x_new[-1], x_prev[-1])
    # lifted edge flows stay consistent with the shifted loop flows
    p = pb.params(d)
    assert np.abs(pb.constraints(guess, p)[pb.constraint_rows("lift")]).max() <= 1e-12
    assert pb.warm_start(None, d).tolist() == pb.cold_start(d).tolist()
    # the shifted optimum is a better start than the cold guess
    again = pb.solve(d, pb.warm_start(cold, d))
    assert again.success and again.iterations <= cold.iterations


def test_storage_rows_on_aroma(aroma_model):
    o = OcpOptions(horizon=8, block=4)
    prod = [Producer("P1", "P1", 1200.0)]
    pb = OcpProblem(aroma_model, o, prod)
    assert pb.storage_rows is not None
    d = OcpData(np.full(aroma_model.n_states, 60.0), demand(aroma_model, 8, 50.0), np.ones(8),
                steps_to_day_end=5)
    _, _, lbg, ubg = pb.bounds(d)
    a, b = pb.storage_rows
    vol = aroma_model.storage_volume
    np.testing.assert_allclose(ubg[a:b][[0, 1, 2, 3, 5, 6, 7]], 0.5 * vol)
    assert ubg[a + 4] == pytest.approx(o.balance_tol * vol)
    assert lbg[a + 4] == pytest.approx(-o.balance_tol * vol)
    pinned = aroma_model.loops_through(aroma_model.storage_edges)
    assert OcpProblem(aroma_model, o, prod, pinned).storage_rows is None
