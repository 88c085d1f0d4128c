"""Experiment front-end shared by the command line and the HTTP API."""
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path

import orjson
from pydantic import ValidationError

from models.experiment import ClientKind, ExperimentSpec, PolicyConfig, PolicyKind
from models.reports import ComparisonReport, RunRecord, SweepCell, SweepReport
from simulator import metrics
from simulator.errors import ConfigError, EventFault, SimulationError
from simulator.netgraph import LossModel
from simulator.network import Network

logger = logging.getLogger(__name__)

SPEC_FILE = "spec.txt"
REPORT_FILE = "report.json"
SWEEP_LOADS = (0.6, 1.0, 1.4)
SWEEP_EXTRA_LOSS = (LossModel.NONE, LossModel.HIGH)
OPTIONAL_KEYS = {"graph_file", "pinned_exit"}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    return str(value)


def dump_spec(spec: ExperimentSpec) -> str:
    """Every field as `key=value`, in declaration order."""
    return "".join(f"{key}={_format(getattr(spec, key))}\n" for key in ExperimentSpec.model_fields)


def spec_hash(spec: ExperimentSpec) -> str:
    return hashlib.sha256(dump_spec(spec).encode("utf-8")).hexdigest()[:16]


def setup_hash(spec: ExperimentSpec) -> str:
    """Hash of the spec with the policy fields blanked; equal for runs that may be compared."""
    blank = ExperimentSpec.model_construct(**{**spec.model_dump(), **dict.fromkeys(PolicyConfig.model_fields)})
    return spec_hash(blank)


def parse_spec_text(text: str, source: str = "<spec>", **overrides) -> ExperimentSpec:
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        if key not in ExperimentSpec.model_fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: {key} already set on line {lines[key]}")
        values[key] = value
        lines[key] = lineno

    data: dict = {k: (None if k in OPTIONAL_KEYS and v.lower() in ("", "none") else v) for k, v in values.items()}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else None
        where = f"{source}:{lines[key]}" if key in lines else source
        label = f"{key}: " if key else ""
        raise ConfigError(f"{where}: {label}{error['msg']}") from None


def parse_spec(path: str | Path, **overrides) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    return parse_spec_text(text, str(path), **overrides)


def build_manifest(run_id: str, spec: ExperimentSpec, network: Network, status: str) -> dict:
    counters = network.metrics.counters
    engine = network.engine
    counts = spec.client_counts()
    return {
        "run_id": run_id,
        "spec_hash": spec_hash(spec),
        metrics.SETUP_HASH_KEY: setup_hash(spec),
        "seed": spec.seed,
        "policy": spec.policy.value,
        "kist_interval_ms": spec.kist_interval_ms,
        "per_socket_limit_enabled": _format(spec.per_socket_limit_enabled),
        "loss_model": spec.loss_model.value,
        "load_factor": spec.load_factor,
        "duration_s": spec.duration_s,
        "n_relays": spec.n_relays,
        "web_clients": counts[ClientKind.WEB],
        "bulk_clients": counts[ClientKind.BULK],
        "shadowperf_clients": counts[ClientKind.SHADOWPERF],
        "circuit_hops": spec.circuit_hops,
        "events": engine.processed,
        "clock_ns": engine.now,
        "status": status,
        **network.conservation(),
        "downloads_completed": counters["downloads_completed"],
        "downloads_failed": counters["downloads_failed"],
        "payload_bytes_delivered": counters["payload_bytes_delivered"],
        "tcpinfo_snapshots": counters["tcpinfo_snapshots"],
    }


def default_run_id(spec: ExperimentSpec) -> str:
    return f"{spec.policy.value}-{spec_hash(spec)[:12]}"


def run(spec: ExperimentSpec, out: str | Path, run_id: str | None = None) -> RunRecord:
    """Build and run one simulation, then export its series under `out/<run_id>`.

    A run that faults mid-timeline still exports what it measured, with status=failed, before the
    fault propagates.
    """
    run_id = run_id or default_run_id(spec)
    directory = Path(out) / run_id
    network = Network(spec)
    fault: SimulationError | None = None
    try:
        network.run()
    except EventFault as exc:
        logger.error("run %s failed: %s", run_id, exc)
        fault = exc
    manifest = build_manifest(run_id, spec, network, "failed" if fault else "complete")
    metrics.export_csv(network.metrics, manifest, directory)
    (directory / SPEC_FILE).write_text(dump_spec(spec))
    if fault is not None:
        raise fault
    logger.info("run %s: %s", run_id, ", ".join(f"{k}={manifest[k]}" for k in
                                                  ("cells_created", "cells_delivered", "downloads_completed")))
    return RunRecord(
        run_id=run_id,
        directory=str(directory),
        events=network.engine.processed,
        clock_ns=network.engine.now,
        counters={k: int(v) for k, v in manifest.items() if k.startswith(("cells_", "downloads_", "payload_"))},
    )


def sweep_cells(base: ExperimentSpec) -> list[tuple[str, ExperimentSpec]]:
    """Both policies for each load factor on the base loss model, plus the no-loss and high-loss variants."""
    variants = [(load, LossModel.BASE) for load in SWEEP_LOADS]
    variants += [(1.0, loss) for loss in SWEEP_EXTRA_LOSS]
    cells = []
    for load, loss in variants:
        for policy in (PolicyKind.AMAP, PolicyKind.KIST):
            spec = base.model_copy(update={"load_factor": load, "loss_model": loss, "policy": policy})
            cells.append((f"load{load:g}-loss_{loss.value}-{policy.value}", spec))
    return cells


def _run_cell(label: str, spec_data: dict, out: str) -> RunRecord:
    return run(ExperimentSpec.model_validate(spec_data), out, run_id=label)


def sweep(base: ExperimentSpec, out: str | Path, jobs: int = 1) -> SweepReport:
    """Run the whole policy/load/loss matrix; failed cells are reported and the rest still run."""
    out = Path(out)
    cells = sweep_cells(base)
    results: dict[str, RunRecord | Exception] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {label: pool.submit(_run_cell, label, spec.model_dump(), str(out)) for label, spec in cells}
            for label, future in futures.items():
                try:
                    results[label] = future.result()
                except Exception as exc:
                    results[label] = exc
    else:
        for label, spec in cells:
            try:
                results[label] = run(spec, out, run_id=label)
            except Exception as exc:
                results[label] = exc

    report = SweepReport()
    for label, spec in cells:
        result = results[label]
        cell = SweepCell(label=label, policy=spec.policy.value, load_factor=spec.load_factor,
                         loss_model=spec.loss_model.value)
        if isinstance(result, Exception):
            logger.warning("sweep cell %s failed: %s", label, result)
            cell.error = str(result)
        else:
            cell.run = result
        report.cells.append(cell)

    for amap_cell, kist_cell in zip(report.cells[::2], report.cells[1::2]):
        if amap_cell.run is None or kist_cell.run is None:
            continue
        report.comparisons.append(compare(amap_cell.run.directory, kist_cell.run.directory))

    write_report(report.model_dump(mode="json"), out / REPORT_FILE)
    logger.info("sweep finished: %d cells, %d failed, %d comparisons", len(report.cells), len(report.failures),
                len(report.comparisons))
    return report


def compare(run_a: str | Path, run_b: str | Path) -> ComparisonReport:
    return metrics.compare(metrics.load_run(run_a), metrics.load_run(run_b))


def write_report(data: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(data, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
