from __future__ import annotations

import pytest

from sa_gateway.frame_codec import BROADCAST, SaMessageType, make_frame
from sa_gateway.harness import SimRadio
from sa_gateway.mesh_sim import (
    ChannelModel,
    ScenarioError,
    SimError,
    Simulator,
    Topology,
    TopologyError,
    UnknownNode,
    load_scenario,
    network_scan,
    parse_scenario,
    rssi_weight,
)

A, B, C, D = 0xA, 0xB, 0xC, 0xD


def _diamond() -> Topology:
    topo = Topology()
    for n in (A, B, C, D):
        topo.add_node(n)
    for a, b in ((A, B), (A, C), (B, D), (C, D)):
        topo.add_link(a, b)
    return topo


def test_routes():
    assert Topology.line([A, B, C]).route(A, C) == [A, B, C]
    assert Topology.full_mesh([A, B, C, D]).route(A, C) == [A, C]
    assert _diamond().route(A, D) == [A, B, D]


def test_route_errors():
    topo = Topology.line([A, B])
    topo.add_node(C)
    assert topo.route(A, C) == []
    with pytest.raises(SimError):
        topo.route(A, A)
    with pytest.raises(UnknownNode):
        topo.route(A, 0x99)


def test_link_validation():
    topo = Topology.line([A, B])
    with pytest.raises(TopologyError):
        topo.add_link(A, B)
    with pytest.raises(SimError):
        topo.add_link(A, A)
    with pytest.raises(SimError):
        Topology.line([A, B], loss_prob=1.5)


def _unicast(loss: float):
    sim = Simulator(Topology.line([A, B], loss_prob=loss), ChannelModel(0.73))
    sim.send_unicast(make_frame(SaMessageType.TEXT, A, B, 1, b"x"))
    sim.run()
    return sim


def test_one_hop_unicast_latency():
    sim = _unicast(0.0)
    assert [(d.time, d.node, d.hops) for d in sim.deliveries] == [(pytest.approx(0.73), B, 1)]


def test_total_loss_drops_frame():
    sim = _unicast(1.0)
    assert sim.deliveries == [] and sim.lost == 1


def test_broadcast_flood_on_a_line():
    sim = Simulator(Topology.line([A, B, C]), ChannelModel(0.73))
    sim.send_broadcast(make_frame(SaMessageType.LOCATION, A, BROADCAST, 1, bytes(32)))
    sim.run()
    times = {d.node: d.time for d in sim.deliveries}
    assert times == {B: pytest.approx(0.73), C: pytest.approx(1.46)}


def test_broadcast_suppression_in_a_mesh():
    topo = Topology.full_mesh([1, 2, 3, 4, 5])
    topo.add_node(6)
    topo.add_link(5, 6)
    sim = Simulator(topo, ChannelModel(0.5))
    sim.send_broadcast(make_frame(SaMessageType.LOCATION, 1, BROADCAST, 1, bytes(32)))
    sim.run()
    nodes = [d.node for d in sim.deliveries]
    assert sorted(nodes) == [2, 3, 4, 5, 6]


def test_per_hop_delay_adds_per_hop():
    sim = Simulator(Topology.line([A, B, C]), ChannelModel(0.5, per_hop_delay=0.1))
    sim.send_unicast(make_frame(SaMessageType.TEXT, A, C, 1, b"x"))
    sim.run()
    assert sim.deliveries[0].time == pytest.approx(1.2)


def test_serialized_transfer_is_linear_in_frames():
    sim = Simulator(Topology.line([A, B]), ChannelModel(0.7))
    for i in range(10):
        sim.send_unicast(make_frame(SaMessageType.BULK_DATA, A, B, 1, b"x", frag_index=i, frag_total=10))
    sim.run()
    assert sim.deliveries[-1].time == pytest.approx(7.0)
    assert sim.max_queue_depth() == 10


def test_run_until_and_event_ordering():
    sim = Simulator(Topology.line([A, B]), ChannelModel(1.0))
    assert sim.run_until(5.0) == []
    seen = []
    sim.schedule(6.0, seen.append, "first")
    sim.schedule(6.0, seen.append, "second")
    sim.run_until(6.0)
    assert seen == ["first", "second"]


def _traced(seed: int) -> str:
    topo = Topology.line([A, B, C, D], loss_prob=0.2)
    sim = Simulator(topo, ChannelModel(0.7, seed=seed))
    tx, rx = SimRadio(sim, A), SimRadio(sim, D)
    tx.send_payload(SaMessageType.BULK_DATA, bytes(range(256)) * 8, D, compressed=False)
    sim.run()
    return sim.log_csv()


def test_same_seed_same_trace():
    assert _traced(4) == _traced(4)
    assert _traced(4) != _traced(5)


def test_scan_two_nodes():
    r = network_scan(Topology.line([A, B]), A, ChannelModel(0.7))
    assert [(e.address, e.hop_count) for e in r.entries] == [(B, 1)]
    assert r.health_score == 1.0


def test_scan_line_of_five():
    r = network_scan(Topology.line([1, 2, 3, 4, 5]), 1, ChannelModel(0.7))
    assert [e.hop_count for e in r.entries] == [1, 2, 3, 4]
    # each relay answers before re-flooding the ping, so hop k hears it at
    # (2k - 1) airtimes and the reply needs k more: rtt = (3k - 1) * airtime
    assert [e.rtt_seconds for e in r.entries] == pytest.approx([1.4, 3.5, 5.6, 7.7])
    assert "health 1.000" in r.table()


def test_scan_partitioned_node():
    topo = Topology.line([A, B])
    topo.add_node(C)
    r = network_scan(topo, A, ChannelModel(0.7))
    assert [e.address for e in r.entries] == [B]
    assert r.health_score < 1.0


def test_rssi_weight_clamps():
    assert rssi_weight(-120) == 0.0 and rssi_weight(-50) == 1.0
    assert rssi_weight(-90) == pytest.approx(0.5)


def test_topology_file_roundtrip(tmp_path):
    topo = _diamond()
    path = tmp_path / "t.topo"
    path.write_text("# diamond\n" + topo.dumps())
    again = Topology.load(path)
    assert again.dumps() == topo.dumps()
    with pytest.raises(TopologyError):
        Topology.parse("node zz 0 0\n")


def test_scenario_file(tmp_path):
    (tmp_path / "blob.bin").write_bytes(b"\x01\x02")
    path = tmp_path / "s.scn"
    path.write_text("# two sends\nat 2 send TEXT a b hi there\nat 1 send 8 a b blob.bin\n")
    steps = load_scenario(path)
    assert [(s.at, s.message_type, s.payload) for s in steps] == [
        (1.0, SaMessageType.BULK_DATA, b"\x01\x02"),
        (2.0, SaMessageType.TEXT, b"hi there"),
    ]
    with pytest.raises(ScenarioError):
        parse_scenario("send TEXT a b x")


def test_log_csv_columns():
    sim = _unicast(0.0)
    lines = sim.log_csv().splitlines()
    assert lines[0] == "time,event,src,dst,messageUid,fragIndex,detail"
    assert lines[1].startswith("0.000000,tx,000000000000000A,000000000000000B,1,,")
