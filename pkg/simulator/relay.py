import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterator

from models.experiment import PolicyConfig
from simulator.engine import SECOND, Engine
from simulator.errors import ModelFault, UnknownCircuitError
from simulator.metrics import MetricsCollector, Stage
from simulator.netgraph import Edge
from simulator.sched import make_policy
from simulator.tcp import CELL_SIZE, Segment, TcpConnection, TcpHost, TcpParams, open_connection

logger = logging.getLogger(__name__)

CELL_PAYLOAD = 498
# cells an exit keeps packaged ahead of its scheduler for each server stream
PACKAGE_AHEAD = 1


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(slots=True, eq=False)
class Cell:
    cell_id: int
    circuit_id: int
    direction: Direction
    payload_len: int = CELL_PAYLOAD
    download_id: int | None = None
    request_size: int | None = None
    enqueued_to_circuit: int | None = None
    written_to_outbuf: int | None = None
    flushed_to_kernel: int | None = None
    first_transmitted: int | None = None

    size = CELL_SIZE

    def trace(self) -> tuple:
        return (self.enqueued_to_circuit, self.written_to_outbuf, self.flushed_to_kernel, self.first_transmitted)


@dataclass(eq=False)
class Circuit:
    circuit_id: int
    hops: list[Hashable]
    client_id: Hashable
    destroyed: bool = False

    @property
    def exit_id(self) -> Hashable:
        return self.hops[-1]


class CircuitQueue:
    """One circuit's cell FIFO at one host, draining into one channel, with its EWMA activity counter."""

    def __init__(self, circuit: Circuit, direction: Direction, channel: "Channel", now: int = 0):
        self.circuit = circuit
        self.direction = direction
        self.channel = channel
        self.cells: deque[Cell] = deque()
        self.ewma = 0.0
        self.last_decay_at = now
        self.stream: "ServerStream | None" = None

    @property
    def circuit_id(self) -> int:
        return self.circuit.circuit_id

    def __len__(self):
        return len(self.cells)

    def decayed(self, now: int, halflife: int) -> float:
        return self.ewma * 2.0 ** (-(now - self.last_decay_at) / halflife)


def ewma_update(queue: CircuitQueue, now: int, cells_sent: int, halflife: int) -> float:
    if now < queue.last_decay_at:
        raise ModelFault(f"ewma update at {now} before last decay {queue.last_decay_at}")
    queue.ewma = queue.decayed(now, halflife) + cells_sent
    queue.last_decay_at = now
    return queue.ewma


class CircuitScheduler:
    """Per-channel set of circuit queues that hold at least one cell.

    Decay scales every EWMA by the same factor, so `log2(ewma) + last_decay_at / halflife` orders the
    queues the same way at any instant. The heap keeps one entry per circuit keyed by that rank; an
    entry whose rank went stale is pushed back with the current one when it reaches the top.
    """

    def __init__(self, halflife: int):
        self.halflife = halflife
        self.active: dict[int, CircuitQueue] = {}
        self._heap: list[tuple[float, int, CircuitQueue]] = []
        self._in_heap: set[int] = set()

    def __len__(self):
        return len(self.active)

    def __bool__(self):
        return bool(self.active)

    def _rank(self, queue: CircuitQueue) -> float:
        if queue.ewma <= 0.0:
            return -math.inf
        return math.log2(queue.ewma) + queue.last_decay_at / self.halflife

    def attach(self, queue: CircuitQueue):
        circuit_id = queue.circuit_id
        self.active[circuit_id] = queue
        if circuit_id not in self._in_heap:
            self._in_heap.add(circuit_id)
            heapq.heappush(self._heap, (self._rank(queue), circuit_id, queue))

    def detach(self, queue: CircuitQueue):
        self.active.pop(queue.circuit_id, None)

    def _top(self) -> CircuitQueue:
        heap = self._heap
        while heap:
            rank, circuit_id, queue = heap[0]
            if self.active.get(circuit_id) is not queue:
                heapq.heappop(heap)
                self._in_heap.discard(circuit_id)
                continue
            current = self._rank(queue)
            if current != rank:
                heapq.heapreplace(heap, (current, circuit_id, queue))
                continue
            return queue
        raise ModelFault("pop_best_circuit on an empty circuit scheduler")

    def best_key(self, now: int) -> tuple[float, int]:
        queue = self._top()
        return queue.decayed(now, self.halflife), queue.circuit_id

    def pop_best_circuit(self, now: int) -> CircuitQueue:
        if not self.active:
            raise ModelFault("pop_best_circuit on an empty circuit scheduler")
        return self._top()


@dataclass
class ConnectionBuffers:
    outbuf: deque[Cell] = field(default_factory=deque)
    outbuf_head_written: int = 0
    inbuf_bytes: int = 0

    @property
    def outbuf_bytes(self) -> int:
        return len(self.outbuf) * CELL_SIZE - self.outbuf_head_written


class Channel:
    """A host's side of a connection to a peer: TCP endpoint, application buffers and circuit scheduler."""

    def __init__(self, host: "OnionHost", tcp: TcpConnection, halflife: int):
        self.host = host
        self.tcp = tcp
        self.peer_id = tcp.peer_id
        self.buffers = ConnectionBuffers()
        self.scheduler = CircuitScheduler(halflife)
        self.is_open = True

    def __repr__(self):
        return f"<Channel {self.host.node_id}->{self.peer_id} pending={len(self.scheduler)}>"

    def flush_outbuf(self) -> int:
        """Write as much of the outbuf as the kernel accepts; returns bytes written."""
        buffers = self.buffers
        want = buffers.outbuf_bytes
        if not want or not self.is_open:
            return 0
        offset = self.tcp.write_seq
        accepted = self.tcp.write(want)
        remaining = accepted
        now = self.host.engine.now
        while remaining:
            take = min(CELL_SIZE - buffers.outbuf_head_written, remaining)
            buffers.outbuf_head_written += take
            remaining -= take
            offset += take
            if buffers.outbuf_head_written == CELL_SIZE:
                cell = buffers.outbuf.popleft()
                buffers.outbuf_head_written = 0
                cell.flushed_to_kernel = now
                self.tcp.track_cell(offset, cell)
                self.host.on_cell_flushed(self, cell)
        return accepted

    def close(self):
        self.is_open = False
        self.tcp.close()


@dataclass
class RelayCircuit:
    circuit: Circuit
    prev: Channel
    next: Channel | None
    forward: CircuitQueue | None
    backward: CircuitQueue


class ServerStream:
    """The file server behind an exit: packages the response into cells only as the scheduler takes them."""

    def __init__(self, queue: CircuitQueue, download_id: int, size: int):
        self.queue = queue
        self.download_id = download_id
        self.remaining = size
        queue.stream = self

    def refill(self, relay: "Relay"):
        while self.remaining > 0 and len(self.queue) < PACKAGE_AHEAD:
            payload = min(CELL_PAYLOAD, self.remaining)
            self.remaining -= payload
            cell = relay.new_cell(self.queue.circuit_id, Direction.BACKWARD, payload, self.download_id)
            if not relay.enqueue_cell(self.queue, cell):
                self.remaining = 0
        if self.remaining == 0:
            self.queue.stream = None


class OnionHost(TcpHost):
    """A host that exchanges cells over channels: relays and clients."""

    def __init__(self, engine: Engine, node_id: Hashable, vertex: int, rate_bps: int,
                 metrics: MetricsCollector, policy_config: PolicyConfig, halflife: int = 30 * SECOND,
                 nic_queue_limit: int = 1000, tcp_params: TcpParams = TcpParams(), cell_ids: Iterator[int] | None = None):
        super().__init__(engine, node_id, vertex, rate_bps, nic_queue_limit)
        self.metrics = metrics
        self.halflife = halflife
        self.tcp_params = tcp_params
        self.channels: dict[Hashable, Channel] = {}
        # channels whose circuit scheduler holds at least one queue
        self.active_channels: dict[Hashable, Channel] = {}
        self.write_log: list[tuple[Hashable, int]] | None = None
        self._cell_ids = cell_ids if cell_ids is not None else itertools.count()
        self.policy = make_policy(self, policy_config)

    def new_cell(self, circuit_id: int, direction: Direction, payload_len: int = CELL_PAYLOAD,
                 download_id: int | None = None, request_size: int | None = None) -> Cell:
        cell = Cell(next(self._cell_ids), circuit_id, direction, payload_len, download_id, request_size)
        self.metrics.count("cells_created")
        return cell

    def add_channel(self, tcp: TcpConnection) -> Channel:
        channel = self.channels[tcp.peer_id] = Channel(self, tcp, self.halflife)
        return channel

    def activate(self, queue: CircuitQueue):
        channel = queue.channel
        channel.scheduler.attach(queue)
        self.active_channels[channel.peer_id] = channel

    def deactivate(self, queue: CircuitQueue):
        channel = queue.channel
        channel.scheduler.detach(queue)
        if not channel.scheduler:
            self.active_channels.pop(channel.peer_id, None)

    def enqueue_cell(self, queue: CircuitQueue, cell: Cell) -> bool:
        if queue.circuit.destroyed:
            raise UnknownCircuitError(cell.circuit_id)
        if not queue.channel.is_open:
            logger.warning("%s: dropping cell for circuit %d, channel to %s is closed",
                           self.node_id, cell.circuit_id, queue.channel.peer_id)
            self.drop(cell)
            return False
        now = self.engine.now
        cell.enqueued_to_circuit = now
        cell.written_to_outbuf = cell.flushed_to_kernel = cell.first_transmitted = None
        queue.cells.append(cell)
        if self.metrics.traced(cell):
            self.metrics.record(Stage.ENQUEUE, None, 1)
        self.activate(queue)
        self.policy.on_cell_enqueued(queue.channel)
        return True

    def circ_flush(self, channel: Channel, n_cells: int) -> int:
        now = self.engine.now
        queue = channel.scheduler.pop_best_circuit(now)
        moved = 0
        traced = self.metrics.traced
        while moved < n_cells and queue.cells:
            cell = queue.cells.popleft()
            cell.written_to_outbuf = now
            channel.buffers.outbuf.append(cell)
            moved += 1
            if traced(cell):
                self.metrics.record(Stage.OUTBUF, None, now - cell.enqueued_to_circuit)
        ewma_update(queue, now, moved, self.halflife)
        if not queue.cells:
            self.deactivate(queue)
        if queue.stream is not None:
            queue.stream.refill(self)
        return moved

    def drop(self, cell: Cell):
        self.metrics.count("cells_dropped")

    def queued_cells(self) -> int:
        total = 0
        for channel in self.channels.values():
            total += sum(len(q) for q in channel.scheduler.active.values())
            total += len(channel.buffers.outbuf) + len(channel.tcp.inbound_cells)
        return total

    # transport hooks

    def on_data(self, conn: TcpConnection, nbytes: int):
        channel = self.channels[conn.peer_id]
        channel.buffers.inbuf_bytes += nbytes
        while channel.buffers.inbuf_bytes >= CELL_SIZE:
            channel.buffers.inbuf_bytes -= CELL_SIZE
            _, cell = conn.inbound_cells.popleft()
            self.on_cell_arrival(channel, cell)

    def on_writable(self, conn: TcpConnection):
        channel = self.channels[conn.peer_id]
        channel.flush_outbuf()
        self.policy.on_writable(channel)

    def on_cell_flushed(self, channel: Channel, cell: Cell):
        if self.write_log is not None:
            self.write_log.append((channel.peer_id, cell.circuit_id))

    def on_cell_arrival(self, channel: Channel, cell: Cell):
        raise NotImplementedError

    # scheduler events

    def handle_amap_run(self, channel: Channel, trigger: str):
        self.policy.amap_run(channel, trigger)

    def handle_kist_tick(self):
        self.policy.kist_tick()


class Relay(OnionHost):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.circuits: dict[int, RelayCircuit] = {}

    def add_circuit(self, circuit: Circuit, prev: Channel, next_: Channel | None) -> RelayCircuit:
        now = self.engine.now
        forward = CircuitQueue(circuit, Direction.FORWARD, next_, now) if next_ is not None else None
        backward = CircuitQueue(circuit, Direction.BACKWARD, prev, now)
        rc = self.circuits[circuit.circuit_id] = RelayCircuit(circuit, prev, next_, forward, backward)
        return rc

    def circuit(self, circuit_id: int) -> RelayCircuit:
        rc = self.circuits.get(circuit_id)
        if rc is None:
            raise UnknownCircuitError(circuit_id)
        return rc

    def destroy_circuit(self, circuit_id: int):
        rc = self.circuits.pop(circuit_id, None)
        if rc is None:
            return
        for queue in (rc.forward, rc.backward):
            if queue is None:
                continue
            queue.stream = None
            self.deactivate(queue)
            while queue.cells:
                self.drop(queue.cells.popleft())

    def on_cell_arrival(self, channel: Channel, cell: Cell):
        try:
            rc = self.circuit(cell.circuit_id)
        except UnknownCircuitError:
            logger.debug("%s: cell for unknown circuit %d dropped", self.node_id, cell.circuit_id)
            self.drop(cell)
            return
        if cell.direction is Direction.BACKWARD:
            self.enqueue_cell(rc.backward, cell)
        elif rc.next is not None:
            self.enqueue_cell(rc.forward, cell)
        else:
            self.deliver_to_server(rc, cell)

    def deliver_to_server(self, rc: RelayCircuit, cell: Cell):
        self.metrics.count("cells_delivered")
        if cell.request_size is None:
            return
        stream = ServerStream(rc.backward, cell.download_id, cell.request_size)
        stream.refill(self)

    def on_cell_flushed(self, channel: Channel, cell: Cell):
        super().on_cell_flushed(channel, cell)
        if self.metrics.traced(cell):
            self.metrics.record(Stage.KERNEL, None, cell.flushed_to_kernel - cell.enqueued_to_circuit)

    def on_first_transmission(self, conn: TcpConnection, segment: Segment):
        self.metrics.record(Stage.WIRE, None, conn.kernel_queue_time(segment))
        self.metrics.record(Stage.RELAY_GOODPUT, None, segment.length)

    def start(self):
        self.policy.start()


def connect_hosts(engine: Engine, a: OnionHost, b: OnionHost, edge: Edge,
                  params: TcpParams | None = None) -> tuple[Channel, Channel]:
    """Open a connection between two onion hosts and wrap both ends in channels."""
    if b.node_id in a.channels:
        raise ModelFault(f"{a.node_id} and {b.node_id} are already connected")
    a_end, b_end = open_connection(engine, a, b, edge, params or a.tcp_params)
    return a.add_channel(a_end), b.add_channel(b_end)

