import numpy as np
import pytest

from conftest import fill, link, make_relay, open_circuit
from models.experiment import PolicyKind
from simulator.engine import MS, SECOND, Engine
from simulator.metrics import MetricsCollector
from simulator.sched import UNLIMITED, PendingSet, socket_limit
from simulator.tcp import CELL_SIZE, KiB, MiB, TcpInfo, TcpParams


@pytest.mark.parametrize("info, expected", [
    (TcpInfo(cwnd=10, una=0, mss=1000, notsent=0), 20000),
    (TcpInfo(cwnd=10, una=4, mss=1448, notsent=2000), 21168),
    (TcpInfo(cwnd=2, una=5, mss=1000, notsent=0), 0),
])
def test_socket_limit(info, expected):
    assert socket_limit(info) == expected


def test_socket_limit_matches_vectorised_formula():
    rng = np.random.default_rng(2024)
    n = 100_000
    cwnd = rng.integers(1, 2000, n)
    una = rng.integers(0, 2000, n)
    mss = rng.integers(500, 9000, n)
    notsent = rng.integers(0, 8 * MiB, n)
    expected = np.maximum(2 * cwnd * mss - una * mss - notsent, 0)
    got = [socket_limit(TcpInfo(*row)) for row in zip(cwnd.tolist(), una.tolist(), mss.tolist(), notsent.tolist())]
    assert np.array_equal(np.array(got), expected)


def relay_with_channels(engine, metrics, policy, peers, tcp_params=TcpParams(), **options):
    relay = make_relay(engine, metrics, "r", policy, tcp_params=tcp_params, **options)
    back = link(engine, relay, make_relay(engine, metrics, "p"), params=tcp_params)
    outs = [link(engine, relay, make_relay(engine, metrics, peer), params=tcp_params) for peer in peers]
    relay.write_log = []
    return relay, back, outs


def test_can_write_respects_limit_and_writable_flag(engine, metrics):
    relay, _, (out,) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"])
    pending = PendingSet([out], limit={out: 20000}, written={out: 0})
    assert relay.policy.can_write(out, pending)
    pending.written[out] = 20480
    assert not relay.policy.can_write(out, pending)
    pending.written[out] = 0
    out.tcp.writable = False
    assert not relay.policy.can_write(out, pending)


def test_kist_writes_lowest_ewma_circuit_first_across_sockets(engine, metrics, cell_ids):
    relay, back, (x, y) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["x", "y"])
    web = open_circuit(relay, 1, x, back)
    bulk = open_circuit(relay, 2, y, back)
    fill(relay, web.forward, 5, cell_ids)
    fill(relay, bulk.forward, 5, cell_ids)
    web.forward.ewma, bulk.forward.ewma = 1.0, 90.0
    relay.policy.kist_tick()
    assert relay.write_log[0] == ("x", 1)
    assert relay.write_log == [("x", 1)] * 5 + [("y", 2)] * 5


def test_kist_web_burst_overtakes_backlogged_bulk_circuit(engine, metrics, cell_ids):
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"],
                                              tcp_params=TcpParams(send_buffer_initial=4 * MiB))
    bulk = open_circuit(relay, 1, out, back)
    web = open_circuit(relay, 2, out, back)
    fill(relay, bulk.forward, 400, cell_ids)
    relay.start()
    engine.run_until(25 * MS)
    assert bulk.forward.cells
    before = len(relay.write_log)
    fill(relay, web.forward, 10, cell_ids)
    engine.run_until(200 * MS)
    after = relay.write_log[before:]
    web_positions = [i for i, (_, circuit_id) in enumerate(after) if circuit_id == 2]
    assert len(web_positions) == 10
    assert max(web_positions) < 12


def test_kist_stops_at_the_socket_limit(engine, metrics, cell_ids):
    params = TcpParams(mss=800, initial_cwnd=1)
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"], tcp_params=params)
    rc = open_circuit(relay, 1, out, back)
    fill(relay, rc.forward, 10, cell_ids)
    relay.policy.kist_tick()
    assert list(metrics.get("kist_limit").values) == [1600]
    assert list(metrics.get("kist_flushed").values) == [3 * CELL_SIZE]
    assert out.tcp.write_seq == 3 * CELL_SIZE
    assert len(rc.forward) == 7


def test_kist_tick_with_nothing_pending_only_reschedules(engine, metrics):
    relay, _, _ = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"])
    relay.start()
    engine.run_until(35 * MS)
    assert relay.policy.ticks == 3
    assert len(metrics.get("pending_sockets")) == 0
    assert metrics.counters["tcpinfo_snapshots"] == 0


def test_unwritable_socket_is_left_out_of_the_pending_set(engine, metrics, cell_ids):
    params = TcpParams(send_buffer_initial=4 * KiB, send_buffer_max=4 * KiB, autotune=False)
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"], tcp_params=params)
    rc = open_circuit(relay, 1, out, back)
    fill(relay, rc.forward, 4, cell_ids)
    out.tcp.write(out.tcp.free_space)
    assert not out.tcp.writable
    assert len(relay.policy.get_pending_sockets()) == 0
    relay.policy.kist_tick()
    assert len(rc.forward) == 4
    assert out.tcp.info_calls == 0


def test_tcp_info_is_only_read_for_pending_sockets(engine, metrics, cell_ids):
    peers = [f"s{i}" for i in range(1000)]
    relay, back, outs = relay_with_channels(engine, metrics, PolicyKind.KIST, peers)
    for circuit_id, out in enumerate(outs[::20], start=1):
        rc = open_circuit(relay, circuit_id, out, back)
        fill(relay, rc.forward, 1, cell_ids)
    relay.policy.kist_tick()
    assert metrics.counters["tcpinfo_snapshots"] == 50
    assert list(metrics.get("pending_sockets").values) == [50]
    assert sum(ch.tcp.info_calls for ch in relay.channels.values()) == 50


def test_global_write_limit_caps_a_tick_across_sockets(engine, metrics, cell_ids):
    relay, back, (x, y) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["x", "y"],
                                              kist_global_write_limit=4 * CELL_SIZE)
    for circuit_id, out in ((1, x), (2, y)):
        fill(relay, open_circuit(relay, circuit_id, out, back).forward, 10, cell_ids)
    relay.policy.kist_tick()
    assert sum(metrics.get("kist_flushed").values) == 4 * CELL_SIZE
    assert relay.write_log == [("x", 1), ("y", 2), ("x", 1), ("y", 2)]


def test_socket_space_knob_bounds_the_limit_by_free_buffer(engine, metrics, cell_ids):
    params = TcpParams(send_buffer_initial=2 * KiB, send_buffer_max=2 * KiB, autotune=False)
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"], tcp_params=params,
                                              kist_use_socket_space=True)
    fill(relay, open_circuit(relay, 1, out, back).forward, 10, cell_ids)
    relay.policy.kist_tick()
    assert list(metrics.get("kist_limit").values) == [2 * KiB]
    assert list(metrics.get("kist_flushed").values) == [2 * KiB]


def test_disabling_the_per_socket_limit_writes_everything(engine, metrics, cell_ids):
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.KIST, ["s"],
                                              per_socket_limit_enabled=False)
    rc = open_circuit(relay, 1, out, back)
    fill(relay, rc.forward, 100, cell_ids)
    relay.policy.kist_tick()
    assert list(metrics.get("kist_limit").values) == [UNLIMITED]
    assert out.tcp.write_seq == 100 * CELL_SIZE
    assert not rc.forward.cells


def test_amap_drains_sockets_one_after_another(engine, metrics, cell_ids):
    relay, back, (a, b) = relay_with_channels(engine, metrics, PolicyKind.AMAP, ["a", "b"])
    fill(relay, open_circuit(relay, 1, a, back).forward, 50, cell_ids)
    fill(relay, open_circuit(relay, 2, b, back).forward, 10, cell_ids)
    engine.run_until(0)
    assert relay.write_log == [("a", 1)] * 50 + [("b", 2)] * 10


def test_amap_stops_when_the_kernel_buffer_fills(engine, metrics, cell_ids):
    params = TcpParams(send_buffer_initial=10 * KiB, send_buffer_max=10 * KiB, autotune=False)
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.AMAP, ["s"], tcp_params=params)
    rc = open_circuit(relay, 1, out, back)
    fill(relay, rc.forward, 100, cell_ids)
    engine.run_until(0)
    assert out.tcp.write_seq == 10 * KiB
    assert not out.tcp.writable
    assert rc.forward.cells


def test_amap_resumes_on_writable(engine, metrics, cell_ids):
    params = TcpParams(send_buffer_initial=10 * KiB, send_buffer_max=10 * KiB, autotune=False)
    relay, back, (out,) = relay_with_channels(engine, metrics, PolicyKind.AMAP, ["s"], tcp_params=params)
    rc = open_circuit(relay, 1, out, back)
    fill(relay, rc.forward, 100, cell_ids)
    engine.run_until(2 * SECOND)
    assert not rc.forward.cells
    assert out.tcp.write_seq == 100 * CELL_SIZE


@pytest.mark.parametrize("policy", list(PolicyKind))
def test_single_cell_is_delivered_the_same_under_both_policies(policy):
    engine = Engine(seed=5)
    metrics = MetricsCollector(engine)
    relay = make_relay(engine, metrics, "r", policy)
    exit_relay = make_relay(engine, metrics, "e", policy)
    back = link(engine, relay, make_relay(engine, metrics, "p"))
    out = link(engine, relay, exit_relay)
    rc = open_circuit(relay, 1, out, back)
    open_circuit(exit_relay, 1, None, exit_relay.channels["r"])
    relay.start()
    fill(relay, rc.forward, 1, iter(range(1)))
    engine.run_until(SECOND)
    assert metrics.counters["cells_delivered"] == 1
    assert exit_relay.channels["r"].tcp.rcv_nxt == CELL_SIZE
    assert metrics.counters["cells_dropped"] == 0
