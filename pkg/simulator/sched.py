"""Socket-writing policies: write-as-much-as-possible and the kernel-informed periodic scheduler."""
import heapq
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from models.experiment import PolicyConfig, PolicyKind
from simulator.engine import MS
from simulator.metrics import Stage
from simulator.tcp import CELL_SIZE, KiB, TcpInfo

if TYPE_CHECKING:
    from simulator.relay import Channel, OnionHost

logger = logging.getLogger(__name__)

OUTBUF_FLUSH_THRESHOLD = 32 * KiB
UNLIMITED = 2 ** 62


def socket_limit(info: TcpInfo) -> int:
    """Bytes the scheduler may write to a socket this tick: room in two windows minus what is queued."""
    return max(2 * info.cwnd * info.mss - info.una * info.mss - info.notsent, 0)


@dataclass
class PendingSet:
    channels: list["Channel"]
    info: dict["Channel", TcpInfo] = field(default_factory=dict)
    limit: dict["Channel", int] = field(default_factory=dict)
    written: dict["Channel", int] = field(default_factory=dict)
    flushed: dict["Channel", int] = field(default_factory=dict)

    def __len__(self):
        return len(self.channels)


class SocketPolicy:
    def __init__(self, host: "OnionHost", config: PolicyConfig):
        self.host = host
        self.config = config

    @property
    def kind(self) -> PolicyKind:
        return self.config.policy

    def start(self):
        pass

    def on_cell_enqueued(self, channel: "Channel"):
        pass

    def on_writable(self, channel: "Channel"):
        pass

    def amap_run(self, channel: "Channel", trigger: str):
        raise NotImplementedError

    def kist_tick(self):
        raise NotImplementedError


class AmapPolicy(SocketPolicy):
    """Move cells to the kernel as soon as they are queued, one channel at a time."""

    def __init__(self, host: "OnionHost", config: PolicyConfig):
        super().__init__(host, config)
        self._scheduled: set = set()

    def _schedule(self, channel: "Channel", trigger: str):
        if channel.peer_id in self._scheduled:
            return
        self._scheduled.add(channel.peer_id)
        self.host.engine.schedule(0, self.host.node_id, "amap_run", channel, trigger)

    def on_cell_enqueued(self, channel: "Channel"):
        self._schedule(channel, "cell_enqueued")

    def on_writable(self, channel: "Channel"):
        if channel.scheduler:
            self._schedule(channel, "socket_writable")

    def amap_run(self, channel: "Channel", trigger: str):
        self._scheduled.discard(channel.peer_id)
        if not channel.is_open:
            return
        host, tcp, buffers = self.host, channel.tcp, channel.buffers
        while channel.scheduler and tcp.writable:
            host.circ_flush(channel, 1)
            if buffers.outbuf_bytes >= OUTBUF_FLUSH_THRESHOLD or not channel.scheduler:
                channel.flush_outbuf()
        if buffers.outbuf_bytes and tcp.writable:
            channel.flush_outbuf()


class KistPolicy(SocketPolicy):
    """Every interval, write to pending sockets in global circuit-priority order, bounded per socket."""

    def __init__(self, host: "OnionHost", config: PolicyConfig):
        super().__init__(host, config)
        self.interval = max(1, int(config.kist_interval_ms * MS))
        self.ticks = 0

    def start(self):
        self.host.engine.schedule(self.interval, self.host.node_id, "kist_tick")

    def get_pending_sockets(self) -> PendingSet:
        return PendingSet([ch for ch in self.host.active_channels.values() if ch.is_open and ch.tcp.writable])

    def update_tcp_info(self, pending: PendingSet):
        config = self.config
        for channel in pending.channels:
            info = pending.info[channel] = channel.tcp.info()
            limit = socket_limit(info) if config.per_socket_limit_enabled else UNLIMITED
            if config.kist_use_socket_space:
                limit = min(limit, channel.tcp.free_space)
            pending.limit[channel] = limit
            pending.written[channel] = channel.buffers.outbuf_bytes
            pending.flushed[channel] = 0

    def can_write(self, channel: "Channel", pending: PendingSet) -> bool:
        return channel.tcp.writable and pending.written[channel] + CELL_SIZE <= pending.limit[channel]

    def _key(self, channel: "Channel") -> tuple[float, int]:
        return channel.scheduler.best_key(self.host.engine.now)

    def flush_outbuf_if_due(self, channel: "Channel", next_choice: "Channel | None", pending: PendingSet) -> int:
        if next_choice is channel:
            return 0
        flushed = channel.flush_outbuf()
        pending.flushed[channel] += flushed
        return flushed

    def kist_tick(self):
        host, metrics = self.host, self.host.metrics
        self.ticks += 1
        pending = self.get_pending_sockets()
        if pending:
            self.update_tcp_info(pending)
            metrics.record(Stage.PENDING_SOCKETS, None, len(pending))
            metrics.record(Stage.TCPINFO_SNAPSHOTS, None, len(pending.info))
            metrics.count("tcpinfo_snapshots", len(pending.info))
            self._write_round(pending)
            for channel in pending.channels:
                metrics.record(Stage.KIST_FLUSHED, None, pending.flushed[channel])
                metrics.record(Stage.KIST_LIMIT, None, min(pending.limit[channel], UNLIMITED))
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug("%s tick %d: %d pending, %d bytes flushed", host.node_id, self.ticks, len(pending),
                             sum(pending.flushed.values()))
        host.engine.schedule(self.interval, host.node_id, "kist_tick")

    def _write_round(self, pending: PendingSet):
        global_limit = self.config.kist_global_write_limit or UNLIMITED
        global_written = 0
        heap = []
        order = 0
        for channel in pending.channels:
            if self.can_write(channel, pending):
                heap.append((self._key(channel), order, channel))
                order += 1
        heapq.heapify(heap)
        while heap and global_written + CELL_SIZE <= global_limit:
            _, _, channel = heapq.heappop(heap)
            self.host.circ_flush(channel, 1)
            pending.written[channel] += CELL_SIZE
            global_written += CELL_SIZE
            if channel.scheduler and self.can_write(channel, pending) and global_written + CELL_SIZE <= global_limit:
                heapq.heappush(heap, (self._key(channel), order, channel))
                order += 1
            next_choice = heap[0][2] if heap else None
            self.flush_outbuf_if_due(channel, next_choice, pending)
        # sockets still queued when the global budget ran out keep their committed cells
        for _, _, channel in heap:
            self.flush_outbuf_if_due(channel, None, pending)


def make_policy(host: "OnionHost", config: PolicyConfig) -> SocketPolicy:
    if config.policy is PolicyKind.KIST:
        return KistPolicy(host, config)
    return AmapPolicy(host, config)
