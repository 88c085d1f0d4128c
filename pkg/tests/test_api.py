import pytest
from fastapi.testclient import TestClient

from conftest import exported_run
from utils.config import Config


@pytest.fixture
def results(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "results_dir", str(tmp_path))
    return tmp_path


@pytest.fixture
def client(results):
    from main import app
    with TestClient(app) as test_client:
        yield test_client


def test_socket_limit_endpoint(client):
    response = client.get("/network/socket-limit", params={"cwnd": 10, "una": 4, "mss": 1448, "notsent": 2000})
    assert response.status_code == 200
    assert response.json()["limit"] == 21168


def test_loss_rate_endpoint(client):
    response = client.get("/network/loss-rate", params={"latency_ms": 300, "model": "high"})
    assert response.json()["loss"] == pytest.approx(0.03)
    assert client.get("/network/loss-rate", params={"latency_ms": 0}).status_code == 422


def test_parse_endpoint(client):
    response = client.post("/experiments/parse", content="seed=3\npolicy=amap\n",
                           headers={"Content-Type": "text/plain"})
    assert response.status_code == 200
    assert response.json()["seed"] == 3 and response.json()["policy"] == "amap"
    bad = client.post("/experiments/parse", content="turbo=1\n", headers={"Content-Type": "text/plain"})
    assert bad.status_code == 400
    assert "unknown key" in bad.json()["detail"]


def test_listing_and_reading_runs(client, results):
    exported_run(results / "api-amap", "amap", [30] * 10)
    exported_run(results / "api-kist", "kist", [10] * 10)
    assert client.get("/experiments").json() == {"items": ["api-amap", "api-kist"]}
    manifest = client.get("/experiments/api-kist").json()
    assert manifest["policy"] == "kist"
    assert client.get("/experiments/nothing-here").status_code == 404
    assert client.get("/experiments/bad id!").status_code == 400


def test_cdf_endpoint(client, results):
    exported_run(results / "api-cdf", "kist", [1, 2, 3, 4])
    response = client.get("/experiments/api-cdf/cdf/ttlb", params={"at_most": [2, 4]})
    assert response.status_code == 200
    body = response.json()
    assert (body["n"], body["q50"], body["max"]) == (4, 2, 4)
    assert body["at_most"] == {"2": 0.5, "4": 1.0}
    assert client.get("/experiments/api-cdf/cdf/ttfb").status_code == 404
    assert client.get("/experiments/api-cdf/cdf/warp_speed").status_code == 404


def test_compare_endpoint(client, results):
    exported_run(results / "cmp-amap", "amap", [30] * 10)
    exported_run(results / "cmp-kist", "kist", [10] * 10)
    exported_run(results / "cmp-other", "kist", [10] * 10, seed=5)
    report = client.get("/experiments/compare", params={"run_a": "cmp-kist", "run_b": "cmp-amap"}).json()
    assert report["policy_a"] == "amap"
    assert {d["series"]: d["q90"] for d in report["deltas"]}["ttlb"] == 20
    mismatch = client.get("/experiments/compare", params={"run_a": "cmp-amap", "run_b": "cmp-other"})
    assert mismatch.status_code == 409


def test_run_endpoint(client, results):
    spec = {"seed": 2, "duration_s": 2, "n_relays": 3, "web_clients": 1, "bulk_clients": 0,
            "shadowperf_clients": 0, "graph_vertices": 3, "client_start_window_s": 0}
    response = client.post("/experiments/run", json=spec, params={"policy": "amap"})
    assert response.status_code == 200
    record = response.json()
    assert record["run_id"].startswith("amap-")
    assert record["status"] == "complete"
    assert (results / record["run_id"] / "manifest.txt").is_file()
    bad = client.post("/experiments/run", json={**spec, "circuit_hops": 4})
    assert bad.status_code == 422
