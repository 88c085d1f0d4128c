import itertools
import logging
from dataclasses import dataclass, field
from typing import Hashable, Protocol

from models.experiment import ClientKind, PolicyConfig, PolicyKind
from simulator.engine import SECOND, Engine, RngStream, seconds
from simulator.errors import ConfigError
from simulator.metrics import MetricsCollector, Stage
from simulator.relay import Cell, Channel, Circuit, CircuitQueue, Direction, OnionHost
from simulator.tcp import KiB, MiB

logger = logging.getLogger(__name__)

CLIENT_POLICY = PolicyConfig(policy=PolicyKind.AMAP)


@dataclass(frozen=True, slots=True)
class ClientModel:
    kind: ClientKind
    sizes: tuple[int, ...]
    pause_s: tuple[float, float] | None
    new_circuit_per_download: bool = False


CLIENT_MODELS = {
    ClientKind.WEB: ClientModel(ClientKind.WEB, (320 * KiB,), (1.0, 60.0)),
    ClientKind.BULK: ClientModel(ClientKind.BULK, (5 * MiB,), None),
    ClientKind.SHADOWPERF: ClientModel(ClientKind.SHADOWPERF, (50 * KiB, 1 * MiB, 5 * MiB), (60.0, 120.0),
                                       new_circuit_per_download=True),
}


@dataclass(eq=False)
class Download:
    download_id: int
    circuit_id: int
    kind: ClientKind
    size: int
    t_request: int
    t_first_byte: int | None = None
    t_last_byte: int | None = None
    received: int = 0
    failed: bool = False

    @property
    def complete(self) -> bool:
        return self.t_last_byte is not None

    @property
    def ttfb(self) -> int:
        return self.t_first_byte - self.t_request

    @property
    def ttlb(self) -> int:
        return self.t_last_byte - self.t_request


class CircuitDirectory(Protocol):
    """What clients need from the network they live in."""

    def next_circuit_id(self) -> int: ...

    def next_download_id(self) -> int: ...

    def leg_latency(self, a: Hashable, b: Hashable) -> int: ...

    def install_circuit(self, circuit: Circuit) -> None: ...

    def destroy_circuit(self, circuit: Circuit) -> None: ...


@dataclass
class RelayPicker:
    """Capacity-weighted choice of distinct relays, with an optional fixed exit."""
    relays: list[Hashable]
    weights: list[float]
    pinned_exit: Hashable | None = None
    _others: list = field(init=False, repr=False)

    def __post_init__(self):
        pairs = [(r, w) for r, w in zip(self.relays, self.weights) if r != self.pinned_exit]
        self._others = pairs

    def pick(self, hops: int, rng: RngStream) -> list[Hashable]:
        needed = hops - 1 if self.pinned_exit is not None else hops
        if len(self._others) < needed:
            raise ConfigError(f"a {hops}-hop circuit needs {hops} distinct relays, only {len(self.relays)} available")
        population = [r for r, _ in self._others]
        path = rng.sample_weighted(population, needed, [w for _, w in self._others])
        if self.pinned_exit is not None:
            path.append(self.pinned_exit)
        return path


def build_circuit(client: "Client", hops: int, picker: RelayPicker, rng: RngStream) -> Circuit:
    """Pick a path and install it; the client hears `circuit_ready` after one round trip per hop."""
    if hops not in (3, 6):
        raise ConfigError(f"circuits have 3 or 6 hops, not {hops}")
    directory = client.directory
    circuit = Circuit(directory.next_circuit_id(), picker.pick(hops, rng), client.node_id)
    directory.install_circuit(circuit)
    legs = zip([client.node_id, *circuit.hops[:-1]], circuit.hops)
    delay = sum(2 * directory.leg_latency(a, b) for a, b in legs)
    client.engine.schedule(delay, client.node_id, "circuit_ready", circuit)
    return circuit


def start_download(client: "Client", size: int) -> Download:
    if client.circuit is None or client.queue is None:
        raise ConfigError(f"{client.node_id} has no ready circuit")
    now = client.engine.now
    download = Download(client.directory.next_download_id(), client.circuit.circuit_id, client.model.kind, size, now)
    client.download = download
    client.downloads.append(download)
    if size == 0:
        download.t_first_byte = download.t_last_byte = now
        client.finish(download)
        return download
    request = client.new_cell(download.circuit_id, Direction.FORWARD, download_id=download.download_id,
                              request_size=size)
    client.enqueue_cell(client.queue, request)
    client.timeout_event = client.engine.schedule(client.download_timeout, client.node_id,
                                                  "download_timeout", download.download_id)
    return download


def next_action(client: "Client", rng: RngStream) -> int:
    """Schedule whatever the client does after a download ends; returns the event id."""
    model = client.model
    delay = seconds(rng.uniform(*model.pause_s)) if model.pause_s else 0
    if client.circuit is None or model.new_circuit_per_download:
        if client.circuit is not None:
            client.directory.destroy_circuit(client.circuit)
        return client.engine.schedule(delay, client.node_id, "client_start")
    return client.engine.schedule(delay, client.node_id, "next_download")


class Client(OnionHost):
    """A client running one download model over its own circuits, with the file servers behind the exits."""

    def __init__(self, engine: Engine, node_id: Hashable, vertex: int, rate_bps: int, metrics: MetricsCollector,
                 model: ClientModel, directory: CircuitDirectory, picker: RelayPicker, hops: int = 3,
                 download_timeout: int = 120 * SECOND, start_window: int = 0, **kwargs):
        super().__init__(engine, node_id, vertex, rate_bps, metrics, CLIENT_POLICY, **kwargs)
        self.model = model
        self.directory = directory
        self.picker = picker
        self.hops = hops
        self.download_timeout = download_timeout
        self.start_window = start_window
        self.rng = engine.rng(f"client:{node_id}")
        self.circuit: Circuit | None = None
        self.queue: CircuitQueue | None = None
        self.download: Download | None = None
        self.downloads: list[Download] = []
        self.timeout_event: int | None = None
        self._sizes = itertools.cycle(model.sizes)

    def start(self):
        offset = self.rng.integers(0, self.start_window + 1) if self.start_window else 0
        self.engine.schedule(offset, self.node_id, "client_start")

    def attach_circuit(self, circuit: Circuit, channel: Channel):
        self.queue = CircuitQueue(circuit, Direction.FORWARD, channel, self.engine.now)

    def release_circuit(self, circuit: Circuit):
        queue = self.queue
        if queue is None or queue.circuit is not circuit:
            return
        self.deactivate(queue)
        while queue.cells:
            self.drop(queue.cells.popleft())
        self.queue = None
        if self.circuit is circuit:
            self.circuit = None

    def finish(self, download: Download):
        if self.timeout_event is not None:
            self.engine.cancel(self.timeout_event)
            self.timeout_event = None
        self.download = None
        metrics, kind = self.metrics, download.kind.value
        for key in (None, kind):
            metrics.record(Stage.TTFB, key, download.ttfb)
            metrics.record(Stage.TTLB, key, download.ttlb)
        metrics.count("downloads_completed")
        next_action(self, self.rng)

    # events

    def handle_client_start(self):
        self.circuit = build_circuit(self, self.hops, self.picker, self.rng)

    def handle_circuit_ready(self, circuit: Circuit):
        if circuit is not self.circuit or circuit.destroyed:
            return
        start_download(self, next(self._sizes))

    def handle_next_download(self):
        if self.circuit is None or self.circuit.destroyed:
            self.handle_client_start()
            return
        start_download(self, next(self._sizes))

    def handle_download_timeout(self, download_id: int):
        download = self.download
        if download is None or download.download_id != download_id:
            return
        download.failed = True
        self.timeout_event = None
        self.download = None
        self.metrics.count("downloads_failed")
        logger.info("%s: download %d (%d of %d bytes) timed out, tearing down circuit %d", self.node_id,
                    download_id, download.received, download.size, download.circuit_id)
        if self.circuit is not None:
            self.directory.destroy_circuit(self.circuit)
        self.circuit = None
        next_action(self, self.rng)

    def on_cell_arrival(self, channel: Channel, cell: Cell):
        download = self.download
        if (download is None or cell.download_id != download.download_id
                or cell.direction is not Direction.BACKWARD):
            self.drop(cell)
            return
        now, metrics = self.engine.now, self.metrics
        metrics.count("cells_delivered")
        metrics.count("payload_bytes_delivered", cell.payload_len)
        metrics.record(Stage.GOODPUT, None, cell.payload_len)
        download.received += cell.payload_len
        if download.t_first_byte is None:
            download.t_first_byte = now
        if download.received >= download.size:
            download.t_last_byte = now
            self.finish(download)
