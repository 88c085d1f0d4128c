import logging
import math
from array import array
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from models.reports import ComparisonReport, MetricDelta
from simulator.engine import SECOND, Engine
from simulator.errors import ConfigError, EmptySeriesError, ModelFault, SpecMismatchError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
QUANTILES = (0.1, 0.5, 0.9)


class Stage(str, Enum):
    ENQUEUE = "enqueue"
    OUTBUF = "outbuf"
    KERNEL = "kernel"
    WIRE = "wire"
    TTFB = "ttfb"
    TTLB = "ttlb"
    GOODPUT = "goodput"
    RELAY_GOODPUT = "relay_goodput"
    PENDING_SOCKETS = "pending_sockets"
    TCPINFO_SNAPSHOTS = "tcpinfo_snapshots"
    KIST_FLUSHED = "kist_flushed"
    KIST_LIMIT = "kist_limit"


@dataclass(frozen=True, slots=True)
class SeriesSpec:
    name: str
    unit: str
    bucketed: bool = False


STAGE_SERIES = {
    Stage.ENQUEUE: SeriesSpec("cells_enqueued", "cells", bucketed=True),
    Stage.OUTBUF: SeriesSpec("circuit_queue_time", "ns"),
    Stage.KERNEL: SeriesSpec("tor_queue_time", "ns"),
    Stage.WIRE: SeriesSpec("kernel_queue_time", "ns"),
    Stage.TTFB: SeriesSpec("ttfb", "ns"),
    Stage.TTLB: SeriesSpec("ttlb", "ns"),
    Stage.GOODPUT: SeriesSpec("goodput", "bytes", bucketed=True),
    Stage.RELAY_GOODPUT: SeriesSpec("relay_goodput", "bytes", bucketed=True),
    Stage.PENDING_SOCKETS: SeriesSpec("pending_sockets", "sockets"),
    Stage.TCPINFO_SNAPSHOTS: SeriesSpec("tcpinfo_snapshots", "calls"),
    Stage.KIST_FLUSHED: SeriesSpec("kist_flushed", "bytes"),
    Stage.KIST_LIMIT: SeriesSpec("kist_limit", "bytes"),
}

# distributions worth comparing between a pair of runs
COMPARED_SERIES = ("ttfb", "ttlb", "ttlb_web", "ttlb_bulk", "ttlb_shadowperf",
                   "tor_queue_time", "kernel_queue_time", "circuit_queue_time")


class Series:
    """Integer samples (t_ns, value) with non-decreasing timestamps."""

    def __init__(self, name: str, unit: str):
        self.name = name
        self.unit = unit
        self.times = array("q")
        self.values = array("q")

    def __len__(self):
        return len(self.values)

    def append(self, t: int, value: int):
        if self.times and t < self.times[-1]:
            raise ModelFault(f"series {self.name}: sample at {t} precedes {self.times[-1]}")
        self.times.append(t)
        self.values.append(int(value))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t_ns": np.array(self.times, dtype=np.int64),
                             "value": np.array(self.values, dtype=np.int64)})


class BucketSeries(Series):
    """Per-second sums; exported as one row per non-empty second."""

    def __init__(self, name: str, unit: str, width: int = SECOND):
        super().__init__(name, unit)
        self.width = width
        self._buckets: dict[int, int] = defaultdict(int)

    def __len__(self):
        return len(self._buckets)

    def add(self, t: int, value: int):
        self._buckets[t // self.width] += int(value)

    def to_frame(self) -> pd.DataFrame:
        keys = sorted(self._buckets)
        return pd.DataFrame({"t_ns": np.array([k * self.width for k in keys], dtype=np.int64),
                             "value": np.array([self._buckets[k] for k in keys], dtype=np.int64)})

    @property
    def total(self) -> int:
        return sum(self._buckets.values())


@dataclass
class CdfTable:
    values: np.ndarray

    def __len__(self):
        return len(self.values)

    def quantile(self, q: float) -> int:
        if not 0.0 <= q <= 1.0:
            raise ConfigError(f"quantile {q} outside [0, 1]")
        n = len(self.values)
        index = min(max(math.ceil(q * n) - 1, 0), n - 1)
        return int(self.values[index])

    def fraction_at_most(self, x: int) -> float:
        return float(np.searchsorted(self.values, x, side="right")) / len(self.values)

    def summary(self) -> dict:
        return {"n": len(self.values), "min": int(self.values[0]), "max": int(self.values[-1]),
                **{f"q{int(q * 100)}": self.quantile(q) for q in (0.1, 0.25, 0.5, 0.75, 0.9, 0.99)}}


def cdf(values) -> CdfTable:
    if isinstance(values, Series):
        name, values = values.name, values.to_frame()["value"].to_numpy()
    else:
        name, values = "<values>", np.asarray(values)
    if len(values) == 0:
        raise EmptySeriesError(f"cannot build a CDF from empty series {name}")
    return CdfTable(np.sort(values, kind="stable"))


class MetricsCollector:
    """One per simulation: sample series plus the conservation counters."""

    def __init__(self, engine: Engine, trace_every: int = 1):
        if trace_every < 1:
            raise ConfigError(f"trace_every must be >= 1, got {trace_every}")
        self.engine = engine
        self.trace_every = trace_every
        self.series: dict[str, Series] = {}
        self.counters: dict[str, int] = defaultdict(int)
        self._routes: dict[tuple, tuple[Series, bool]] = {}
        for spec in STAGE_SERIES.values():
            self._series(spec.name, spec.unit, spec.bucketed)

    def _series(self, name: str, unit: str, bucketed: bool) -> Series:
        series = self.series.get(name)
        if series is None:
            series = self.series[name] = BucketSeries(name, unit) if bucketed else Series(name, unit)
        return series

    def traced(self, cell) -> bool:
        return cell.cell_id % self.trace_every == 0

    def record(self, stage: Stage, key: str | None, value: int):
        route = self._routes.get((stage, key))
        if route is None:
            spec = STAGE_SERIES[Stage(stage)]
            name = f"{spec.name}_{key}" if key else spec.name
            route = self._routes[(stage, key)] = (self._series(name, spec.unit, spec.bucketed), spec.bucketed)
        series, bucketed = route
        if bucketed:
            series.add(self.engine.now, value)
        else:
            series.append(self.engine.now, value)

    def count(self, counter: str, amount: int = 1):
        self.counters[counter] += amount

    def get(self, name: str) -> Series:
        try:
            return self.series[name]
        except KeyError:
            raise EmptySeriesError(f"no series named {name}") from None


def write_manifest(manifest: dict, directory: Path):
    lines = [f"{key}={value}" for key, value in manifest.items()]
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(directory: str | Path) -> dict[str, str]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"{directory} has no {MANIFEST_NAME}")
    manifest = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        manifest[key] = value
    return manifest


def export_csv(metrics: MetricsCollector, manifest: dict, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {directory}: {exc}") from exc
    written = []
    for name in sorted(metrics.series):
        path = directory / f"{name}.csv"
        metrics.series[name].to_frame().to_csv(path, index=False, lineterminator="\n")
        written.append(path)
    write_manifest({**manifest, "series": ",".join(sorted(metrics.series))}, directory)
    written.append(directory / MANIFEST_NAME)
    logger.info("exported %d series to %s", len(metrics.series), directory)
    return written


@dataclass
class StoredRun:
    """An exported run read back from disk."""
    directory: Path
    manifest: dict[str, str]
    frames: dict[str, pd.DataFrame] = field(default_factory=dict)

    def values(self, name: str) -> np.ndarray:
        frame = self.frames.get(name)
        if frame is None:
            path = self.directory / f"{name}.csv"
            frame = pd.read_csv(path, dtype="int64") if path.is_file() else pd.DataFrame({"t_ns": [], "value": []})
            self.frames[name] = frame
        return frame["value"].to_numpy()


def load_run(directory: str | Path) -> StoredRun:
    directory = Path(directory)
    return StoredRun(directory, read_manifest(directory))


SPEC_KEYS = ("seed", "loss_model", "load_factor", "duration_s", "n_relays", "web_clients",
             "bulk_clients", "shadowperf_clients", "circuit_hops")
# hash of every spec field except the policy ones
SETUP_HASH_KEY = "setup_hash"


def compare(run_a: StoredRun, run_b: StoredRun) -> ComparisonReport:
    """Quantile deltas between two runs that differ only in policy, oriented AMAP minus KIST."""
    mismatched = [key for key in SPEC_KEYS if run_a.manifest.get(key) != run_b.manifest.get(key)]
    if not mismatched and run_a.manifest.get(SETUP_HASH_KEY) != run_b.manifest.get(SETUP_HASH_KEY):
        mismatched = [SETUP_HASH_KEY]
    if mismatched:
        raise SpecMismatchError(f"runs differ beyond the policy: {', '.join(mismatched)}")
    if run_a.manifest.get("policy") == "kist" and run_b.manifest.get("policy") == "amap":
        run_a, run_b = run_b, run_a

    deltas = []
    for name in COMPARED_SERIES:
        a, b = run_a.values(name), run_b.values(name)
        if len(a) == 0 or len(b) == 0:
            continue
        cdf_a, cdf_b = cdf(a), cdf(b)
        deltas.append(MetricDelta(
            series=name,
            **{f"q{int(q * 100)}": cdf_a.quantile(q) - cdf_b.quantile(q) for q in QUANTILES},
        ))
    goodput_delta = int(run_a.values("goodput").sum()) - int(run_b.values("goodput").sum())
    return ComparisonReport(
        run_a=run_a.manifest.get("run_id", str(run_a.directory)),
        run_b=run_b.manifest.get("run_id", str(run_b.directory)),
        policy_a=run_a.manifest.get("policy", ""),
        policy_b=run_b.manifest.get("policy", ""),
        deltas=deltas,
        goodput_delta=goodput_delta,
    )
