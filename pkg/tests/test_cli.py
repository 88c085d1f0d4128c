import orjson
import pytest

from cli import main
from conftest import exported_run
from simulator.netgraph import load_graph


def test_graph_command_writes_a_loadable_graph(tmp_path, capsys):
    path = tmp_path / "g.txt"
    assert main(["graph", str(path), "--vertices", "6", "--seed", "3"]) == 0
    assert load_graph(path).n_vertices == 6
    assert capsys.readouterr().out.strip() == str(path)


def test_compare_command_prints_the_report(tmp_path, capsys):
    exported_run(tmp_path / "a", "amap", [30] * 10)
    exported_run(tmp_path / "k", "kist", [10] * 10)
    assert main(["compare", str(tmp_path / "k"), str(tmp_path / "a")]) == 0
    report = orjson.loads(capsys.readouterr().out)
    assert report["policy_a"] == "amap"


def test_bad_spec_exits_with_one(tmp_path, capsys):
    spec = tmp_path / "bad.spec"
    spec.write_text("seed=1\nduration_s=0\n")
    assert main(["run", str(spec), "--out", str(tmp_path)]) == 1
    assert "bad.spec:2: duration_s" in capsys.readouterr().err


def test_usage_errors_exit_with_two():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2
