import numpy as np
import pandas as pd
import pytest

from conftest import exported_run
from simulator.engine import MS, SECOND, Engine
from simulator.errors import ConfigError, EmptySeriesError, ModelFault, SpecMismatchError
from simulator.metrics import (MANIFEST_NAME, MetricsCollector, Series, Stage, cdf, compare, export_csv, load_run,
                               read_manifest)


def test_cdf_quantiles():
    table = cdf([4, 1, 3, 2])
    assert table.quantile(0.5) == 2
    assert table.quantile(0.0) == 1 and table.quantile(1.0) == 4
    assert table.fraction_at_most(2) == 0.5


def test_cdf_of_identical_values():
    table = cdf([7] * 10)
    assert {table.quantile(q) for q in (0.1, 0.5, 0.9)} == {7}


def test_cdf_of_uniform_samples():
    values = np.random.default_rng(1).integers(0, 1_000_000, 100_000)
    assert cdf(values).quantile(0.9) == pytest.approx(900_000, rel=0.01)


def test_cdf_of_empty_series_raises():
    with pytest.raises(EmptySeriesError):
        cdf([])
    with pytest.raises(EmptySeriesError):
        cdf(Series("ttfb", "ns"))
    with pytest.raises(ConfigError):
        cdf([1]).quantile(1.5)


def test_series_rejects_time_going_backwards():
    series = Series("x", "ns")
    series.append(10, 1)
    with pytest.raises(ModelFault):
        series.append(5, 1)


def test_record_keys_and_buckets():
    engine = Engine()
    metrics = MetricsCollector(engine)
    metrics.record(Stage.TTLB, None, 5)
    metrics.record(Stage.TTLB, "web", 5)
    metrics.record(Stage.GOODPUT, None, 100)
    engine.run_until(1500 * MS)
    metrics.record(Stage.GOODPUT, None, 50)
    metrics.record(Stage.GOODPUT, None, 25)
    assert len(metrics.get("ttlb")) == len(metrics.get("ttlb_web")) == 1
    goodput = metrics.get("goodput")
    assert goodput.total == 175
    frame = goodput.to_frame()
    assert frame["t_ns"].tolist() == [0, SECOND]
    assert frame["value"].tolist() == [100, 75]
    with pytest.raises(EmptySeriesError):
        metrics.get("nope")


def test_trace_sampling():
    metrics = MetricsCollector(Engine(), trace_every=4)

    class Traced:
        def __init__(self, cell_id):
            self.cell_id = cell_id

    assert [metrics.traced(Traced(i)) for i in range(5)] == [True, False, False, False, True]
    with pytest.raises(ConfigError):
        MetricsCollector(Engine(), trace_every=0)


def test_export_without_samples_still_writes_manifest(tmp_path):
    metrics = MetricsCollector(Engine())
    export_csv(metrics, {"run_id": "empty", "policy": "kist"}, tmp_path / "run")
    manifest = read_manifest(tmp_path / "run")
    assert manifest["run_id"] == "empty"
    assert "ttfb" in manifest["series"].split(",")
    assert pd.read_csv(tmp_path / "run" / "ttfb.csv").empty


def test_compare_identical_runs_gives_zero_deltas(tmp_path):
    a = exported_run(tmp_path / "a", "amap", list(range(1, 101)))
    b = exported_run(tmp_path / "b", "kist", list(range(1, 101)))
    report = compare(load_run(a), load_run(b))
    assert report.deltas
    assert all((d.q10, d.q50, d.q90) == (0, 0, 0) for d in report.deltas)
    assert report.goodput_delta == 0


def test_compare_is_oriented_amap_minus_kist(tmp_path):
    kist = exported_run(tmp_path / "k", "kist", [10] * 10, goodput=900)
    amap = exported_run(tmp_path / "a", "amap", [30] * 10, goodput=1000)
    report = compare(load_run(kist), load_run(amap))
    assert (report.policy_a, report.policy_b) == ("amap", "kist")
    assert report.delta("ttlb").q90 == 20
    assert report.delta("kernel_queue_time").q50 == 10
    assert report.goodput_delta == 100
    assert report.delta("ttfb") is None


def test_compare_refuses_runs_with_different_setups(tmp_path):
    a = exported_run(tmp_path / "a", "amap", [1, 2], seed=1)
    b = exported_run(tmp_path / "b", "kist", [1, 2], seed=2)
    with pytest.raises(SpecMismatchError, match="seed"):
        compare(load_run(a), load_run(b))


def test_compare_refuses_runs_whose_setups_differ_outside_the_manifest(tmp_path):
    a = exported_run(tmp_path / "a", "amap", [1, 2], setup="aaaa")
    b = exported_run(tmp_path / "b", "kist", [1, 2], setup="bbbb")
    with pytest.raises(SpecMismatchError, match="setup_hash"):
        compare(load_run(a), load_run(b))


def test_loading_a_directory_without_manifest_fails(tmp_path):
    with pytest.raises(ConfigError, match=MANIFEST_NAME):
        load_run(tmp_path)
