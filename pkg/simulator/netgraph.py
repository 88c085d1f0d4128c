import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from simulator.engine import US, RngStream
from simulator.errors import ConfigError

logger = logging.getLogger(__name__)

MAX_LATENCY_MS = 300
BASE_LOSS_AT_MAX = 0.015
HIGH_LOSS_CAP = 0.03


class LossModel(str, Enum):
    NONE = "none"
    BASE = "base"
    HIGH = "high"


def loss_rate(latency_ms: float, model: LossModel) -> float:
    """Packet loss probability of an edge, a linear function of its latency."""
    if not 0 < latency_ms <= MAX_LATENCY_MS:
        raise ConfigError(f"edge latency {latency_ms} ms outside (0, {MAX_LATENCY_MS}]")
    model = LossModel(model)
    if model is LossModel.NONE:
        return 0.0
    base = (latency_ms / MAX_LATENCY_MS) * BASE_LOSS_AT_MAX
    if model is LossModel.BASE:
        return base
    return min(2 * base, HIGH_LOSS_CAP)


@dataclass(frozen=True, slots=True)
class Edge:
    latency_us: int
    loss: float

    def __post_init__(self):
        if not 0 < self.latency_us <= MAX_LATENCY_MS * 1000:
            raise ConfigError(f"edge latency {self.latency_us} us outside (0, 300 ms]")
        if not 0.0 <= self.loss <= HIGH_LOSS_CAP:
            raise ConfigError(f"edge loss {self.loss} outside [0, {HIGH_LOSS_CAP}]")

    @property
    def latency_ms(self) -> float:
        return self.latency_us / 1000

    @property
    def latency(self) -> int:
        """One-way latency in SimTime nanoseconds."""
        return self.latency_us * US


@dataclass(frozen=True, slots=True)
class LatencyLaw:
    """Uniform on [min_ms, max_ms]; a tail_fraction of draws land uniformly in (max_ms, 300]."""
    min_ms: float = 5.0
    max_ms: float = 150.0
    tail_fraction: float = 0.0

    def sample_us(self, rng: RngStream) -> int:
        if self.tail_fraction > 0 and rng.bernoulli(self.tail_fraction):
            value = rng.uniform(self.max_ms, MAX_LATENCY_MS)
        else:
            value = rng.uniform(self.min_ms, self.max_ms)
        return min(max(1, int(value * 1000)), MAX_LATENCY_MS * 1000)


def transmit(edge: Edge, now: int, rng: RngStream) -> int | None:
    """Delivery time of one datagram over `edge`, or None when the path drops it."""
    if rng.bernoulli(edge.loss):
        return None
    return now + edge.latency


class Graph:
    """Complete graph of router vertices; immutable once built."""

    def __init__(self, n_vertices: int, edges: dict[tuple[int, int], Edge], loopback: Edge | None = None):
        self.n_vertices = n_vertices
        self._edges = edges
        self.loopback = loopback or Edge(latency_us=1000, loss=0.0)

    def __len__(self):
        return self.n_vertices

    @property
    def edge_count(self) -> int:
        return len(self._edges)

    def edges(self):
        return sorted(self._edges.items())

    def edge(self, u: int, v: int) -> Edge:
        """Path attributes between the vertices of two hosts; co-located hosts use the loopback edge."""
        if u == v:
            return self.loopback
        return self._edges[(u, v) if u < v else (v, u)]


def build_graph(n_vertices: int, latency_law: LatencyLaw, model: LossModel, rng: RngStream,
                intra_vertex_latency_ms: float = 1.0) -> Graph:
    if n_vertices < 2:
        raise ConfigError(f"a graph needs at least 2 vertices, got {n_vertices}")
    edges = {}
    for u in range(n_vertices):
        for v in range(u + 1, n_vertices):
            latency_us = latency_law.sample_us(rng)
            edges[(u, v)] = Edge(latency_us, loss_rate(latency_us / 1000, model))
    loopback_us = int(intra_vertex_latency_ms * 1000)
    loopback = Edge(loopback_us, loss_rate(loopback_us / 1000, model))
    logger.info("built synthetic graph: %d vertices, %d edges, loss model %s", n_vertices, len(edges), LossModel(model).value)
    return Graph(n_vertices, edges, loopback)


def load_graph(path: str | Path, model: LossModel | None = None, intra_vertex_latency_ms: float = 1.0) -> Graph:
    """Strict parse of the text graph format; `model` recomputes loss from latency when given."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read graph file {path}: {exc}") from exc

    def fault(lineno: int, message: str):
        return ConfigError(f"{path}:{lineno}: {message}")

    body = [(i + 1, line.split()) for i, line in enumerate(lines) if line.strip()]
    if not body or len(body[0][1]) != 2 or body[0][1][0] != "vertices":
        raise fault(body[0][0] if body else 1, "expected header 'vertices N'")
    try:
        n_vertices = int(body[0][1][1])
    except ValueError:
        raise fault(body[0][0], "vertex count is not an integer")
    if n_vertices < 2:
        raise fault(body[0][0], f"a graph needs at least 2 vertices, got {n_vertices}")

    edges = {}
    for lineno, fields in body[1:]:
        if len(fields) != 4:
            raise fault(lineno, "expected 'u v latency_us loss_ppm'")
        try:
            u, v, latency_us, loss_ppm = (int(f) for f in fields)
        except ValueError:
            raise fault(lineno, "edge fields must be integers")
        if u == v:
            raise fault(lineno, f"self-loop on vertex {u}")
        if not (0 <= u < n_vertices and 0 <= v < n_vertices):
            raise fault(lineno, f"vertex out of range 0..{n_vertices - 1}")
        key = (u, v) if u < v else (v, u)
        if key in edges:
            raise fault(lineno, f"duplicate edge {key[0]}-{key[1]}")
        if not 0 <= loss_ppm <= HIGH_LOSS_CAP * 1_000_000:
            raise fault(lineno, f"loss_ppm {loss_ppm} outside [0, 30000]")
        if not 0 < latency_us <= MAX_LATENCY_MS * 1000:
            raise fault(lineno, f"latency_us {latency_us} outside (0, 300000]")
        loss = loss_ppm / 1_000_000 if model is None else loss_rate(latency_us / 1000, model)
        edges[key] = Edge(latency_us, loss)

    expected = n_vertices * (n_vertices - 1) // 2
    if len(edges) != expected:
        raise ConfigError(f"{path}: graph is not complete ({len(edges)} of {expected} edges)")
    loopback_us = int(intra_vertex_latency_ms * 1000)
    loopback_loss = 0.0 if model is None else loss_rate(loopback_us / 1000, model)
    return Graph(n_vertices, edges, Edge(loopback_us, loopback_loss))


def write_graph(graph: Graph, path: str | Path):
    lines = [f"vertices {graph.n_vertices}"]
    for (u, v), edge in graph.edges():
        lines.append(f"{u} {v} {edge.latency_us} {int(round(edge.loss * 1_000_000))}")
    Path(path).write_text("\n".join(lines) + "\n")
