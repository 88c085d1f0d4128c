import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Hashable

from simulator.engine import MS, SECOND, Engine, EventTarget, RngStream
from simulator.errors import ConnectionClosedError, ModelFault
from simulator.netgraph import Edge, transmit

logger = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB
HEADER_BYTES = 52
CELL_SIZE = 512
# free space a connection needs before it reports itself writable again
WRITABLE_THRESHOLD = CELL_SIZE


class TcpState(str, Enum):
    SLOW_START = "slow_start"
    CONGESTION_AVOIDANCE = "congestion_avoidance"
    RECOVERY = "recovery"


class LossKind(str, Enum):
    TRIPLE_DUPACK = "triple_dupack"
    TIMEOUT = "timeout"


@dataclass(frozen=True, slots=True)
class TcpInfo:
    cwnd: int
    una: int
    mss: int
    notsent: int


@dataclass(frozen=True, slots=True)
class TcpParams:
    mss: int = 1448
    initial_cwnd: int = 10
    send_buffer_initial: int = 64 * KiB
    send_buffer_max: int = 4 * MiB
    autotune: bool = True
    initial_rto: int = 1 * SECOND
    min_rto: int = 200 * MS
    max_rto: int = 60 * SECOND


@dataclass(slots=True, eq=False)
class Segment:
    seq: int
    length: int
    entered_at: int
    cells: list = field(default_factory=list)
    first_tx: int | None = None
    sent_at: int = 0
    retransmitted: bool = False

    @property
    def end(self) -> int:
        return self.seq + self.length


class Interface:
    """One direction of a host's link: a FIFO drained at `rate_bps` with a drop-tail segment limit.

    Departure times are computed at enqueue time, so the queue never needs its own events.
    """

    def __init__(self, rate_bps: int, limit: int):
        self.rate_bps = rate_bps
        self.limit = limit
        self.drops = 0
        self.bytes_out = 0
        self._free_at = 0
        self._departures: deque[int] = deque()

    def backlog(self, now: int) -> int:
        departures = self._departures
        while departures and departures[0] <= now:
            departures.popleft()
        return len(departures)

    def enqueue(self, now: int, size: int) -> int | None:
        if self.backlog(now) >= self.limit:
            self.drops += 1
            return None
        start = max(now, self._free_at)
        done = start + -(-size * 8 * SECOND // self.rate_bps)
        self._free_at = done
        self._departures.append(done)
        self.bytes_out += size
        return done


class TcpHost(EventTarget):
    """A host with a symmetric-rate uplink/downlink and the TCP endpoints it owns."""

    def __init__(self, engine: Engine, node_id: Hashable, vertex: int, rate_bps: int, nic_queue_limit: int = 1000):
        self.engine = engine
        self.node_id = node_id
        self.vertex = vertex
        self.rate_bps = rate_bps
        self.uplink = Interface(rate_bps, nic_queue_limit)
        self.downlink = Interface(rate_bps, nic_queue_limit)
        self.connections: dict[Hashable, "TcpConnection"] = {}
        engine.register(self)

    def handle_transmit(self, conn: "TcpConnection"):
        conn.transmit_pending = False
        conn.try_send()

    def handle_segment_arrival(self, conn: "TcpConnection", segment: Segment):
        now = self.engine.now
        done = self.downlink.enqueue(now, segment.length + HEADER_BYTES)
        if done is not None:
            self.engine.schedule(done - now, self.node_id, "segment_delivered", conn, segment)

    def handle_segment_delivered(self, conn: "TcpConnection", segment: Segment):
        conn.receive(segment)

    def handle_ack_arrival(self, conn: "TcpConnection", ack_no: int):
        conn.ack_received(ack_no)

    def handle_rto(self, conn: "TcpConnection"):
        conn.rto_fired()

    def handle_writable(self, conn: "TcpConnection"):
        if not conn.closed:
            self.on_writable(conn)

    # hooks for the application layer

    def on_data(self, conn: "TcpConnection", nbytes: int):
        pass

    def on_writable(self, conn: "TcpConnection"):
        pass

    def on_first_transmission(self, conn: "TcpConnection", segment: Segment):
        pass


class TcpConnection:
    """One endpoint of a simplified Reno connection. Data flows both ways; each end owns its send side."""

    def __init__(self, engine: Engine, host: TcpHost, peer_id: Hashable, edge: Edge, rng: RngStream,
                 params: TcpParams = TcpParams()):
        self.engine = engine
        self.host = host
        self.peer_id = peer_id
        self.peer: TcpConnection | None = None
        self.edge = edge
        self.rng = rng
        self.params = params
        self.mss = params.mss
        self.closed = False

        self.state = TcpState.SLOW_START
        self.cwnd: float = float(params.initial_cwnd)
        self.ssthresh: float = float("inf")
        self.send_buffer_capacity = params.send_buffer_initial
        self.writable = True
        self.transmit_pending = False
        self.info_calls = 0

        # send side, in stream byte offsets
        self.write_seq = 0
        self.snd_nxt = 0
        self.snd_una = 0
        self.in_flight: dict[int, Segment] = {}
        self.retransmit_queue: deque[Segment] = deque()
        # every unacked segment by seq; together they tile [snd_una, snd_nxt)
        self._outstanding: dict[int, Segment] = {}
        self._entry_times: deque[tuple[int, int]] = deque()
        self._cell_marks: deque[tuple[int, Any]] = deque()
        self._dupacks = 0
        self._recover = 0
        self._srtt: int | None = None
        self._rttvar = 0
        self.rto = params.initial_rto
        self._rto_event: int | None = None

        # receive side
        self.rcv_nxt = 0
        self._out_of_order: dict[int, int] = {}
        self.inbound_cells: deque[tuple[int, Any]] = deque()

    def __repr__(self):
        return f"<TcpConnection {self.host.node_id}->{self.peer_id} cwnd={self.cwnd:.1f} {self.state.value}>"

    # accounting

    @property
    def notsent(self) -> int:
        return self.write_seq - self.snd_nxt

    @property
    def occupancy(self) -> int:
        return self.write_seq - self.snd_una

    @property
    def free_space(self) -> int:
        return self.send_buffer_capacity - self.occupancy

    @property
    def una(self) -> int:
        return len(self._outstanding)

    @property
    def flight_bytes(self) -> int:
        return sum(s.length for s in self.in_flight.values())

    @property
    def retransmit_bytes(self) -> int:
        return sum(s.length for s in self.retransmit_queue)

    def info(self) -> TcpInfo:
        if self.closed:
            raise ConnectionClosedError(f"tcp_info on closed connection {self!r}")
        self.info_calls += 1
        return TcpInfo(cwnd=int(self.cwnd), una=self.una, mss=self.mss, notsent=self.notsent)

    # application side

    def write(self, nbytes: int) -> int:
        if self.closed:
            raise ConnectionClosedError(f"write on closed connection {self!r}")
        accepted = max(0, min(nbytes, self.free_space))
        if accepted:
            self.write_seq += accepted
            self._entry_times.append((self.write_seq, self.engine.now))
            if not self.transmit_pending:
                self.transmit_pending = True
                self.engine.schedule(0, self.host.node_id, "transmit", self)
        if self.params.autotune and self.occupancy >= self.send_buffer_capacity:
            self.autotune()
        self._refresh_writable()
        return accepted

    def track_cell(self, end_offset: int, cell):
        """Associate a cell with the stream offset of its last byte, for tracing and receiver framing."""
        self._cell_marks.append((end_offset, cell))
        self.peer.inbound_cells.append((end_offset, cell))

    def autotune(self) -> int:
        if self.occupancy >= self.send_buffer_capacity:
            self.send_buffer_capacity = min(self.send_buffer_capacity * 2, self.params.send_buffer_max)
        return self.send_buffer_capacity

    def close(self):
        self.closed = True
        if self._rto_event is not None:
            self.engine.cancel(self._rto_event)
            self._rto_event = None

    def _refresh_writable(self):
        writable = self.free_space >= WRITABLE_THRESHOLD
        if writable and not self.writable and not self.closed:
            self.engine.schedule(0, self.host.node_id, "writable", self)
        self.writable = writable

    # congestion control

    def on_ack(self, acked_segments: int):
        if acked_segments > self.una:
            raise ModelFault(f"ack for {acked_segments} segments but only {self.una} unacked on {self!r}")
        if acked_segments <= 0:
            return
        seq = self.snd_una
        for _ in range(acked_segments):
            segment = self._outstanding[seq]
            self._forget(segment)
            seq = segment.end
        self.snd_una = seq
        self._grow_window(acked_segments)
        self._refresh_writable()

    def _grow_window(self, acked_segments: int):
        if self.state is TcpState.SLOW_START:
            self.cwnd += acked_segments
            if self.cwnd >= self.ssthresh:
                self.state = TcpState.CONGESTION_AVOIDANCE
        elif self.state is TcpState.CONGESTION_AVOIDANCE:
            self.cwnd += acked_segments / self.cwnd

    def on_loss(self, kind: LossKind):
        self.ssthresh = float(max(int(self.cwnd) // 2, 1))
        if kind is LossKind.TRIPLE_DUPACK:
            self.cwnd = self.ssthresh
            self.state = TcpState.RECOVERY
            self._recover = self.snd_nxt
            self._retransmit_lowest()
        else:
            self.cwnd = float(self.params.initial_cwnd)
            self.state = TcpState.SLOW_START
            self.rto = min(self.rto * 2, self.params.max_rto)
            lost = sorted(self.in_flight.values(), key=lambda s: s.seq)
            self.in_flight.clear()
            self.retransmit_queue = deque(sorted([*lost, *self.retransmit_queue], key=lambda s: s.seq))
            self._dupacks = 0
        logger.debug("%s loss %s -> cwnd=%.1f ssthresh=%.1f", self, kind.value, self.cwnd, self.ssthresh)

    def _retransmit_lowest(self):
        """Fast retransmit of the first hole; it stays counted in flight, bypassing the window."""
        lowest = self._outstanding.get(self.snd_una)
        if lowest is None or lowest.seq not in self.in_flight:
            return
        lowest.retransmitted = True
        self._transmit(lowest)

    def _forget(self, segment: Segment):
        del self._outstanding[segment.seq]
        if self.in_flight.pop(segment.seq, None) is None:
            self.retransmit_queue.remove(segment)

    def _acked_by(self, ack_no: int) -> list[Segment]:
        acked, seq = [], self.snd_una
        while seq < ack_no:
            segment = self._outstanding[seq]
            acked.append(segment)
            seq = segment.end
        return acked

    # send path

    def try_send(self):
        if self.closed:
            return
        window = max(1, int(self.cwnd))
        while len(self.in_flight) < window:
            if self.retransmit_queue:
                segment = self.retransmit_queue.popleft()
                segment.retransmitted = True
            elif self.notsent > 0:
                segment = self._next_segment()
                self._outstanding[segment.seq] = segment
            else:
                break
            self.in_flight[segment.seq] = segment
            self._transmit(segment)

    def _next_segment(self) -> Segment:
        length = min(self.mss, self.notsent)
        end = self.snd_nxt + length
        entries = self._entry_times
        while entries[0][0] < end:
            entries.popleft()
        # queued from the moment its last byte was written
        segment = Segment(seq=self.snd_nxt, length=length, entered_at=entries[0][1])
        self.snd_nxt = end
        marks = self._cell_marks
        while marks and marks[0][0] <= segment.end:
            segment.cells.append(marks.popleft()[1])
        return segment

    def _transmit(self, segment: Segment):
        now = self.engine.now
        segment.sent_at = now
        if self._rto_event is None:
            self._arm_rto()
        done = self.host.uplink.enqueue(now, segment.length + HEADER_BYTES)
        if done is None:
            return
        if segment.first_tx is None:
            segment.first_tx = done
            for cell in segment.cells:
                cell.first_transmitted = done
            self.host.on_first_transmission(self, segment)
        arrival = transmit(self.edge, done, self.rng)
        if arrival is not None:
            self.engine.schedule(arrival - now, self.peer.host.node_id, "segment_arrival", self.peer, segment)

    def kernel_queue_time(self, segment: Segment) -> int:
        if segment.first_tx is None:
            raise ModelFault(f"segment {segment.seq} has not been transmitted")
        return segment.first_tx - segment.entered_at

    # receive path

    def receive(self, segment: Segment):
        if self.closed:
            return
        if segment.seq == self.rcv_nxt:
            before = self.rcv_nxt
            self.rcv_nxt = segment.end
            while self.rcv_nxt in self._out_of_order:
                self.rcv_nxt += self._out_of_order.pop(self.rcv_nxt)
            self.host.on_data(self, self.rcv_nxt - before)
        elif segment.seq > self.rcv_nxt:
            self._out_of_order[segment.seq] = segment.length
        self._send_ack()

    def _send_ack(self):
        arrival = transmit(self.edge, self.engine.now, self.rng)
        if arrival is not None:
            self.engine.schedule(arrival - self.engine.now, self.peer.host.node_id, "ack_arrival",
                                 self.peer, self.rcv_nxt)

    def ack_received(self, ack_no: int):
        if self.closed:
            return
        if ack_no > self.snd_nxt:
            raise ModelFault(f"ack {ack_no} beyond sent data {self.snd_nxt} on {self!r}")
        if ack_no > self.snd_una:
            acked = self._acked_by(ack_no)
            fresh = [s for s in acked if not s.retransmitted]
            if fresh:
                self._rtt_sample(self.engine.now - max(s.sent_at for s in fresh))
            self._dupacks = 0
            if self.state is TcpState.RECOVERY:
                for segment in acked:
                    self._forget(segment)
                self.snd_una = ack_no
                if ack_no >= self._recover:
                    self.state = TcpState.CONGESTION_AVOIDANCE
                    self.cwnd = self.ssthresh
                else:
                    self._retransmit_lowest()
                self._refresh_writable()
            else:
                self.on_ack(len(acked))
                self.snd_una = ack_no
            self._restart_rto()
            self.try_send()
        elif ack_no == self.snd_una and self.una:
            self._dupacks += 1
            if self._dupacks == 3 and self.state is not TcpState.RECOVERY:
                self.on_loss(LossKind.TRIPLE_DUPACK)
                self.try_send()

    # retransmission timer

    def _rtt_sample(self, rtt: int):
        if self._srtt is None:
            self._srtt = rtt
            self._rttvar = rtt // 2
        else:
            self._rttvar = (3 * self._rttvar + abs(self._srtt - rtt)) // 4
            self._srtt = (7 * self._srtt + rtt) // 8
        self.rto = min(max(self.params.min_rto, self._srtt + 4 * self._rttvar), self.params.max_rto)

    def _arm_rto(self):
        self._rto_event = self.engine.schedule(self.rto, self.host.node_id, "rto", self)

    def _restart_rto(self):
        if self._rto_event is not None:
            self.engine.cancel(self._rto_event)
            self._rto_event = None
        if self.una:
            self._arm_rto()

    def rto_fired(self):
        self._rto_event = None
        if self.closed or not self.una:
            return
        self.on_loss(LossKind.TIMEOUT)
        self.try_send()
        if self._rto_event is None and self.una:
            self._arm_rto()

    @property
    def rtt_estimate(self) -> int | None:
        return self._srtt


def open_connection(engine: Engine, a: TcpHost, b: TcpHost, edge: Edge,
                    params: TcpParams = TcpParams()) -> tuple[TcpConnection, TcpConnection]:
    """Both endpoints of an established connection between hosts a and b."""
    a_end = TcpConnection(engine, a, b.node_id, edge, engine.rng(f"tcp:{a.node_id}->{b.node_id}"), params)
    b_end = TcpConnection(engine, b, a.node_id, edge, engine.rng(f"tcp:{b.node_id}->{a.node_id}"), params)
    a_end.peer, b_end.peer = b_end, a_end
    a.connections[b.node_id] = a_end
    b.connections[a.node_id] = b_end
    return a_end, b_end
