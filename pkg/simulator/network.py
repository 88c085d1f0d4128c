import itertools
import logging
from typing import Hashable

from models.experiment import ClientKind, ExperimentSpec
from simulator.engine import SECOND, Engine, RunSummary, seconds
from simulator.errors import ConfigError
from simulator.metrics import MetricsCollector
from simulator.netgraph import Graph, LatencyLaw, build_graph, load_graph
from simulator.relay import Channel, Circuit, OnionHost, Relay, connect_hosts
from simulator.tcp import TcpParams
from simulator.traffic import CLIENT_MODELS, Client, RelayPicker

logger = logging.getLogger(__name__)

MBIT = 1_000_000
CLIENT_PREFIX = {ClientKind.WEB: "web", ClientKind.BULK: "bulk", ClientKind.SHADOWPERF: "perf"}


class Network:
    """One simulation instance built from an ExperimentSpec: graph, relays, clients and their channels."""

    def __init__(self, spec: ExperimentSpec, trace_events: bool = False):
        self.spec = spec
        self.engine = Engine(spec.seed, trace_events=trace_events)
        self.metrics = MetricsCollector(self.engine, spec.trace_every)
        self.graph = self._graph()
        self.tcp_params = TcpParams(send_buffer_initial=spec.send_buffer_initial,
                                    send_buffer_max=spec.send_buffer_max)
        self.halflife = seconds(spec.ewma_halflife_s)
        self.hosts: dict[Hashable, OnionHost] = {}
        self.relays: list[Relay] = []
        self.clients: list[Client] = []
        self.circuits: dict[int, Circuit] = {}
        self._cell_ids = itertools.count()
        self._circuit_ids = itertools.count(1)
        self._download_ids = itertools.count(1)
        self._placement = self.engine.rng("placement")
        self._build_relays()
        self.picker = RelayPicker(
            [r.node_id for r in self.relays],
            [float(r.rate_bps) for r in self.relays],
            pinned_exit=self.relays[spec.pinned_exit].node_id if spec.pinned_exit is not None else None,
        )
        self._build_clients()

    def _graph(self) -> Graph:
        spec = self.spec
        if spec.graph_file:
            return load_graph(spec.graph_file, spec.loss_model, spec.intra_vertex_latency_ms)
        law = LatencyLaw(spec.latency_min_ms, spec.latency_max_ms, spec.latency_tail_fraction)
        return build_graph(spec.graph_vertices, law, spec.loss_model, self.engine.rng("graph"),
                           spec.intra_vertex_latency_ms)

    def _host_kwargs(self) -> dict:
        return dict(halflife=self.halflife, nic_queue_limit=self.spec.nic_queue_limit,
                    tcp_params=self.tcp_params, cell_ids=self._cell_ids)

    def _vertex(self) -> int:
        return self._placement.integers(0, self.graph.n_vertices)

    def _build_relays(self):
        spec = self.spec
        for i in range(spec.n_relays):
            mbit = self.engine.rng(f"relay-bw:{i}").uniform(spec.relay_bw_min_mbit, spec.relay_bw_max_mbit)
            relay = Relay(self.engine, f"relay-{i}", self._vertex(), int(mbit * MBIT), self.metrics,
                          spec.policy_config, **self._host_kwargs())
            self.hosts[relay.node_id] = relay
            self.relays.append(relay)

    def _build_clients(self):
        spec = self.spec
        for kind, count in spec.client_counts().items():
            for i in range(count):
                client = Client(self.engine, f"{CLIENT_PREFIX[kind]}-{i}", self._vertex(),
                                int(spec.client_bw_mbit * MBIT), self.metrics, CLIENT_MODELS[kind], self,
                                self.picker, hops=spec.circuit_hops,
                                download_timeout=seconds(spec.download_timeout_s),
                                start_window=seconds(spec.client_start_window_s), **self._host_kwargs())
                self.hosts[client.node_id] = client
                self.clients.append(client)

    # CircuitDirectory

    def next_circuit_id(self) -> int:
        return next(self._circuit_ids)

    def next_download_id(self) -> int:
        return next(self._download_ids)

    def leg_latency(self, a: Hashable, b: Hashable) -> int:
        return self.graph.edge(self.hosts[a].vertex, self.hosts[b].vertex).latency

    def channel(self, a: Hashable, b: Hashable) -> Channel:
        host_a = self.hosts[a]
        channel = host_a.channels.get(b)
        if channel is None:
            host_b = self.hosts[b]
            edge = self.graph.edge(host_a.vertex, host_b.vertex)
            channel, _ = connect_hosts(self.engine, host_a, host_b, edge, self.tcp_params)
        return channel

    def install_circuit(self, circuit: Circuit):
        if len(set(circuit.hops)) != len(circuit.hops):
            raise ConfigError(f"circuit {circuit.circuit_id} repeats a relay: {circuit.hops}")
        self.circuits[circuit.circuit_id] = circuit
        path = [circuit.client_id, *circuit.hops]
        client = self.hosts[circuit.client_id]
        client.attach_circuit(circuit, self.channel(path[0], path[1]))
        for i, relay_id in enumerate(circuit.hops):
            relay = self.hosts[relay_id]
            prev = self.channel(relay_id, path[i])
            next_ = self.channel(relay_id, path[i + 2]) if i + 2 < len(path) else None
            relay.add_circuit(circuit, prev, next_)

    def destroy_circuit(self, circuit: Circuit):
        circuit.destroyed = True
        self.circuits.pop(circuit.circuit_id, None)
        for relay_id in circuit.hops:
            self.hosts[relay_id].destroy_circuit(circuit.circuit_id)
        self.hosts[circuit.client_id].release_circuit(circuit)

    # running

    def start(self):
        for relay in self.relays:
            relay.start()
        for client in self.clients:
            client.start()

    def run(self) -> RunSummary:
        spec = self.spec
        logger.info("running %s for %.0f s: %d relays, %d clients, seed %d", spec.policy.value, spec.duration_s,
                    len(self.relays), len(self.clients), spec.seed)
        self.start()
        summary = self.engine.run_until(seconds(spec.duration_s))
        logger.info("finished at t=%.1f s after %d events", summary.clock / SECOND, summary.events)
        return summary

    def cells_queued(self) -> int:
        return sum(host.queued_cells() for host in self.hosts.values())

    def conservation(self) -> dict[str, int]:
        counters = self.metrics.counters
        return {
            "cells_created": counters["cells_created"],
            "cells_delivered": counters["cells_delivered"],
            "cells_queued": self.cells_queued(),
            "cells_dropped": counters["cells_dropped"],
        }
