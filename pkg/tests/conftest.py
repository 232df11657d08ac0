import numpy as np
import pytest

from dhnmpc.aroma import aroma_network
from dhnmpc.model import DhnModel
from dhnmpc.network import Edge, NetworkSpec, suggest_valve_placement, with_valves
from dhnmpc.ocp import OcpOptions
from dhnmpc.scenario import Scenario


def pipe(eid, tail, head, length=300.0, diameter=0.08, **kw):
    return Edge(eid, tail, head, length, diameter, **kw)


def hx(eid, tail, head, kind, **kw):
    kw.setdefault("q_max", 0.015)
    return Edge(eid, tail, head, 10.0, 0.1, kind=kind, **kw)


def paired(n):
    return {f"s{i}": f"r{i}" for i in range(1, n + 1)}


def nodes(n):
    return [f"s{i}" for i in range(1, n + 1)] + [f"r{i}" for i in range(1, n + 1)]


def fork_spec(pump=1e5):
    """Producer at s1, consumer A at s2, consumer B at the end of the line."""
    edges = [
        hx("P", "r1", "s1", "producer", pump=pump, q_max=0.03),
        pipe("s1s2", "s1", "s2"), pipe("s2s3", "s2", "s3"),
        hx("CA", "s2", "r2", "consumer"), hx("CB", "s3", "r3", "consumer"),
        pipe("r3r2", "r3", "r2"), pipe("r2r1", "r2", "r1"),
    ]
    return NetworkSpec(nodes(3), edges, paired(3), {"P": "P"}, {"CA": "CA", "CB": "CB"})


def chain_spec(pump=1e5):
    edges = [hx("P", "r1", "s1", "producer", pump=pump, q_max=0.03), pipe("s1s2", "s1", "s2"),
             hx("C", "s2", "r2", "consumer"), pipe("r2r1", "r2", "r1")]
    return NetworkSpec(nodes(2), edges, paired(2), {"P": "P"}, {"C": "C"})


def toy_scenario(steps=4, horizon=4, load_kw=30.0, **kw):
    """Chain network, one consumer, flat load, a price step halfway."""
    spec = chain_spec()
    spec = with_valves(spec, suggest_valve_placement(spec))
    n = steps + horizon
    price = np.where(np.arange(n) < n // 2, 40.0, 80.0)
    kw.setdefault("options", OcpOptions(horizon=horizon, block=1))
    return Scenario("toy", spec, {"C": 1.0}, np.full(n, load_kw * 1e3), price, np.full(n, 5.0),
                    steps=steps, p_max={"P": 3e5}, prosumer=None, warmup_steps=2,
                    cells={"P": 1, "s1s2": 2, "C": 1, "r2r1": 2}, **kw)


@pytest.fixture(scope="session")
def aroma_spec():
    return aroma_network()


@pytest.fixture(scope="session")
def aroma_model(aroma_spec):
    return DhnModel.build(aroma_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)
