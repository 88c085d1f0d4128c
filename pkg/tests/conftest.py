import itertools

import pytest

from models.experiment import PolicyConfig, PolicyKind
from simulator.engine import Engine
from simulator.metrics import MetricsCollector, Stage, export_csv
from simulator.netgraph import Edge
from simulator.relay import Cell, Channel, Circuit, CircuitQueue, Relay, RelayCircuit, connect_hosts
from simulator.tcp import TcpParams

MBIT = 1_000_000


@pytest.fixture
def engine():
    return Engine(seed=3)


@pytest.fixture
def metrics(engine):
    return MetricsCollector(engine)


@pytest.fixture
def cell_ids():
    return itertools.count()


def make_relay(engine: Engine, metrics: MetricsCollector, node_id: str, policy: PolicyKind = PolicyKind.KIST,
               rate_mbit: int = 100, tcp_params: TcpParams = TcpParams(), **policy_options) -> Relay:
    config = PolicyConfig(policy=policy, **policy_options)
    return Relay(engine, node_id, 0, rate_mbit * MBIT, metrics, config, tcp_params=tcp_params)


def link(engine: Engine, a: Relay, b: Relay, latency_ms: float = 5.0, params: TcpParams | None = None) -> Channel:
    channel, _ = connect_hosts(engine, a, b, Edge(int(latency_ms * 1000), 0.0), params)
    return channel


def open_circuit(relay: Relay, circuit_id: int, next_: Channel | None, prev: Channel) -> RelayCircuit:
    circuit = Circuit(circuit_id, [relay.node_id], client_id=prev.peer_id)
    return relay.add_circuit(circuit, prev, next_)


def fill(relay: Relay, queue: CircuitQueue, n: int, ids) -> list[Cell]:
    cells = [Cell(next(ids), queue.circuit_id, queue.direction) for _ in range(n)]
    for cell in cells:
        relay.enqueue_cell(queue, cell)
    return cells


def exported_run(directory, policy: str, values: list[int], seed: int = 1, goodput: int = 1000,
                 setup: str = "0123456789abcdef"):
    """Export a run with the given TTLB samples (and half of each as kernel queue time), without simulating."""
    metrics = MetricsCollector(Engine())
    for value in values:
        metrics.record(Stage.TTLB, None, value)
        metrics.record(Stage.WIRE, None, value // 2)
    metrics.record(Stage.GOODPUT, None, goodput)
    manifest = {"run_id": directory.name, "policy": policy, "seed": seed, "loss_model": "base",
                "load_factor": 1.0, "duration_s": 600.0, "n_relays": 20, "web_clients": 480, "bulk_clients": 15,
                "shadowperf_clients": 3, "circuit_hops": 3, "setup_hash": setup}
    export_csv(metrics, manifest, directory)
    return directory
