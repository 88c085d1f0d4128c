import hashlib
import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Hashable

import numpy as np

from simulator.errors import ConfigError, EventFault, ModelFault

logger = logging.getLogger(__name__)

# SimTime is a plain int of nanoseconds since simulation start.
NS = 1
US = 1_000
MS = 1_000_000
SECOND = 1_000_000_000


def ms(value: float) -> int:
    return int(round(value * MS))


def seconds(value: float) -> int:
    return int(round(value * SECOND))


@dataclass(slots=True)
class Event:
    fire_at: int
    seq: int
    target: Hashable
    kind: str
    args: tuple = ()
    cancelled: bool = False

    def __str__(self):
        return f"Event(t={self.fire_at}ns seq={self.seq} target={self.target} kind={self.kind})"


@dataclass(frozen=True, slots=True)
class RunSummary:
    events: int
    clock: int


class EventTarget:
    """Anything registered with the engine. `kind` dispatches to `handle_<kind>(*args)`."""

    node_id: Hashable

    def handle_event(self, event: Event):
        handler = getattr(self, f"handle_{event.kind}", None)
        if handler is None:
            raise ModelFault(f"{type(self).__name__} {self.node_id} has no handler for {event.kind}")
        handler(*event.args)


class RngStream:
    """A named random stream; identical (seed, stream_id) pairs replay identical draws."""

    def __init__(self, seed: int, stream_id: str):
        self.stream_id = stream_id
        digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *words])))

    def uniform(self, lo: float, hi: float) -> float:
        if lo > hi:
            raise ConfigError(f"rng_uniform on stream {self.stream_id}: lo={lo} > hi={hi}")
        if lo == hi:
            return lo
        return lo + (hi - lo) * float(self._gen.random())

    def random(self) -> float:
        return float(self._gen.random())

    def bernoulli(self, p: float) -> bool:
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return float(self._gen.random()) < p

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return int(self._gen.integers(lo, hi))

    def sample_weighted(self, population: list, k: int, weights: list[float] | None = None) -> list:
        """k distinct members drawn without replacement, proportionally to weights."""
        p = None
        if weights is not None:
            total = float(sum(weights))
            p = np.asarray(weights, dtype=float) / total
        picks = self._gen.choice(len(population), size=k, replace=False, p=p)
        return [population[int(i)] for i in picks]


class Engine:
    """Deterministic discrete-event core with an integer-nanosecond clock."""

    def __init__(self, seed: int = 0, trace_events: bool = False):
        self.seed = seed
        self._now = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._next_seq = 0
        # events still queued, neither fired nor cancelled
        self._live: dict[int, Event] = {}
        self._targets: dict[Hashable, EventTarget] = {}
        self._streams: dict[str, RngStream] = {}
        self.processed = 0
        self.trace: list[tuple[int, int, Any, str]] | None = [] if trace_events else None

    @property
    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return len(self._live)

    def register(self, target: EventTarget):
        if target.node_id in self._targets:
            raise ConfigError(f"duplicate node id {target.node_id}")
        self._targets[target.node_id] = target

    def target(self, node_id: Hashable) -> EventTarget:
        return self._targets[node_id]

    def schedule(self, delay: int, target: Hashable, kind: str, *args) -> int:
        if delay < 0:
            raise ModelFault(f"cannot schedule {kind} for {target} in the past (delay={delay})")
        seq = self._next_seq
        self._next_seq += 1
        event = Event(self._now + int(delay), seq, target, kind, args)
        heapq.heappush(self._queue, (event.fire_at, seq, event))
        self._live[seq] = event
        return seq

    def cancel(self, event_id: int) -> bool:
        """Drop a queued event; returns False unless the event was still queued."""
        event = self._live.pop(event_id, None)
        if event is None:
            return False
        event.cancelled = True
        return True

    def rng(self, stream_id: str) -> RngStream:
        stream = self._streams.get(stream_id)
        if stream is None:
            stream = self._streams[stream_id] = RngStream(self.seed, stream_id)
        return stream

    def run_until(self, end: int) -> RunSummary:
        queue = self._queue
        while queue and queue[0][0] <= end:
            fire_at, seq, event = heapq.heappop(queue)
            if event.cancelled:
                continue
            del self._live[seq]
            self._now = fire_at
            if self.trace is not None:
                self.trace.append((fire_at, seq, event.target, event.kind))
            try:
                self._targets[event.target].handle_event(event)
            except Exception as exc:
                logger.error("aborting run at %s", event)
                raise EventFault(event, exc) from exc
            self.processed += 1
        self._now = max(self._now, end)
        return RunSummary(events=self.processed, clock=self._now)
