from __future__ import annotations

import threading
import time

import pytest

from sa_gateway import corpus
from sa_gateway.cot import CotElement, to_xml
from sa_gateway.frame_codec import (
    BROADCAST,
    LocationPayload,
    SaMessageType,
    decode_frame,
    encode_frame,
    encode_location,
    make_frame,
)
from sa_gateway.gateway import (
    AckHandled,
    AckSent,
    ConfigError,
    DestinationRegistry,
    Dropped,
    Forwarded,
    Gateway,
    GatewayConfig,
    Pending,
    PoolExhausted,
    Rejected,
    RouterConnector,
    SessionPool,
    TakUnreachable,
    TlsConnector,
    Transmitted,
    decode_stream,
    destination_resolve,
    encode_stream,
    virtual_credentials,
)
from sa_gateway.reliability import Outcome, TransferAgent, fragment
from sa_gateway.tak_stub import TakRouter, TakServer
from sa_gateway.provisioning import server_context
from sa_gateway.translator import operational_view

GW, RADIO = 0x01, 0x0A


class Rig:
    def __init__(self, **config):
        self.submitted: list = []
        self.tx: list = []
        self.now = 0.0
        self.gw = Gateway(
            GatewayConfig(gateway_address=GW, **config),
            lambda sender, e: self.submitted.append((sender, e)),
            self.tx.append,
            clock=lambda: self.now,
        )


def _location_frame(uid: int = 1):
    p = encode_location(LocationPayload(45.677, -111.0429, 1461.0, 1_714_564_800_000))
    return make_frame(SaMessageType.LOCATION, RADIO, BROADCAST, uid, p)


def test_location_frame_is_forwarded():
    rig = Rig()
    out = rig.gw.ingest_radio_bytes(encode_frame(_location_frame()))
    assert isinstance(out, Forwarded)
    assert out.event.uid == "BT-000000000000000A-1"
    assert (out.event.point.lat, out.event.point.lon, out.event.point.hae) == (45.677, -111.0429, 1461.0)
    assert rig.submitted == [(RADIO, out.event)]


def test_fragment_three_of_28_is_pending():
    rig = Rig()
    frames = fragment(5, SaMessageType.BULK_DATA, RADIO, GW, bytes(6144))
    out = rig.gw.ingest_radio_frame(frames[3])
    assert out == Pending(1, 28)


def test_bad_magic_is_dropped():
    rig = Rig()
    assert rig.gw.ingest_radio_bytes(b"\x00" * 30) == Dropped("BadMagic")
    assert rig.gw.metrics.counters["radio.Dropped.BadMagic"] == 1


def test_frame_for_another_node_is_dropped():
    rig = Rig()
    f = make_frame(SaMessageType.TEXT, RADIO, 0x77, 1, b"\x01a\x01b")
    assert rig.gw.ingest_radio_frame(f) == Dropped("NotAddressed")


def test_corrupt_compressed_payload_is_dropped():
    rig = Rig()
    f = make_frame(SaMessageType.MARKER, RADIO, GW, 1, b"\x01garbage", compressed=True)
    out = rig.gw.ingest_radio_frame(f)
    assert isinstance(out, Dropped) and out.reason == "PayloadDecodeError"


def test_bulk_from_radio_acks_and_forwards():
    rig = Rig()
    e = corpus.bulk_package(6144)
    sender = TransferAgent(RADIO, frame_airtime=0.7)
    from sa_gateway.translator import extract_sa_payload

    frames = sender.send(SaMessageType.BULK_DATA, GW, extract_sa_payload(e, SaMessageType.BULK_DATA), 0.0, compressed=True)
    outcomes = [rig.gw.ingest_radio_frame(f, 0.7 * (i + 1)) for i, f in enumerate(frames)]
    assert isinstance(outcomes[-1], Forwarded)
    assert sum(isinstance(o, AckSent) for o in outcomes) == 1
    assert operational_view(outcomes[-1].event) == operational_view(e)
    acks = [f for f in rig.tx if f.header.message_type is SaMessageType.ACK]
    assert sender.receive(acks[-1], 30.0).finished is not None


def test_gateway_answers_netscan_ping():
    rig = Rig()
    ping = make_frame(SaMessageType.NET_SCAN_PING, RADIO, BROADCAST, 3)
    assert rig.gw.ingest_radio_frame(ping) == Dropped("NotForwardable")
    assert [(f.header.message_type, f.header.destination_uid) for f in rig.tx] == [
        (SaMessageType.NET_SCAN_REPLY, RADIO)
    ]


def test_every_byte_string_yields_one_outcome():
    import random

    rig = Rig()
    rng = random.Random(11)
    seeds = [encode_frame(_location_frame()), encode_frame(fragment(2, SaMessageType.MARKER, RADIO, GW, bytes(500))[0])]
    for _ in range(3000):
        data = bytearray(rng.choice(seeds))
        for _ in range(rng.randint(1, 4)):
            data[rng.randrange(len(data))] = rng.randrange(256)
        out = rig.gw.ingest_radio_bytes(bytes(data))
        assert isinstance(out, (Forwarded, Pending, AckSent, AckHandled, Dropped))


# -- IP to radio --------------------------------------------------------------


def test_location_to_all_is_one_broadcast_frame():
    rig = Rig()
    out = rig.gw.ingest_tak_event(to_xml(corpus.location("ECHO", 1.0, 2.0, 3.0)))
    assert out == Transmitted(1, BROADCAST, SaMessageType.LOCATION, 1)
    assert rig.tx[0].header.broadcast


def test_bulk_to_radio_is_28_unicast_frames_with_acks():
    rig = Rig()
    e = corpus.bulk_package(6144)
    e.detail.children.append(CotElement("marti", children=[CotElement("dest", {"uid": "BT-000000000000000A-9"})]))
    out = rig.gw.ingest_tak_event(e, 0.0)
    assert isinstance(out, Transmitted) and out.frame_count == 28 and out.dest == RADIO
    assert all(f.header.ack_requested and not f.header.broadcast for f in rig.tx)
    radio = TransferAgent(RADIO, frame_airtime=0.7)
    replies = []
    for i, f in enumerate(list(rig.tx)):
        r = radio.receive(decode_frame(encode_frame(f)), 0.7 * (i + 1))
        replies += r.replies
    assert r.outcome is Outcome.DELIVERED
    results = [rig.gw.ingest_radio_frame(a, 25.0) for a in replies]
    assert results[-1] == AckHandled(True, 0)
    assert not rig.gw.agent.outbound


def test_30k_package_is_rejected():
    rig = Rig()
    assert rig.gw.ingest_tak_event(corpus.bulk_package(30 * 1024)) == Rejected("PayloadTooLarge")


def test_malformed_tak_input_is_rejected():
    rig = Rig()
    assert rig.gw.ingest_tak_event(b"<event") == Rejected("MalformedDocument")


def test_own_radio_traffic_is_not_echoed():
    rig = Rig()
    fwd = rig.gw.ingest_radio_frame(_location_frame())
    assert rig.gw.ingest_tak_event(fwd.event) == Rejected("Loop")


# -- destinations -----------------------------------------------------------------


def test_destination_resolve_rules():
    reg = DestinationRegistry()
    direct = corpus.chat("ALPHA", "x")
    direct.detail.children.append(CotElement("marti", children=[CotElement("dest", {"uid": "BT-000000000000000A-7"})]))
    assert destination_resolve(direct, reg) == 0x0A
    assert destination_resolve(corpus.chat("ALPHA", "x", "NOBODY"), reg) == BROADCAST
    assert destination_resolve(corpus.chat("ALPHA", "x"), reg) == BROADCAST


def test_registry_learns_callsigns_from_radio_traffic():
    rig = Rig()
    from sa_gateway.translator import TextPayload, encode_text

    rig.gw.ingest_radio_frame(make_frame(SaMessageType.TEXT, 0x0B, BROADCAST, 1, encode_text(TextPayload("BRAVO", "hi"))))
    assert rig.gw.destination_resolve(corpus.chat("ALPHA", "x", "BRAVO")) == 0x0B


# -- config -----------------------------------------------------------------------


def test_config_parse(tmp_path):
    path = tmp_path / "gw.conf"
    path.write_text(
        "# gateway\ntak_endpoint = tak.local:8089\npool_ttl_seconds = 30\npool_size = 4\n"
        "compress_types = marker, route\nmin_gain_bytes = 8\ngateway_address = 0x2\n"
    )
    c = GatewayConfig.load(path)
    assert c.tak_host_port == ("tak.local", 8089)
    assert (c.pool_ttl_seconds, c.pool_size, c.gateway_address) == (30.0, 4, 2)
    assert c.compression_policy.apply_to == {SaMessageType.MARKER, SaMessageType.ROUTE}
    assert c.compression_policy.min_gain_bytes == 8


@pytest.mark.parametrize(
    "text",
    ["bogus = 1", "pool_size = many", "no equals sign", "unicast_types = ack", "compress_types = text", "pool_size = 0"],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        GatewayConfig.parse(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        GatewayConfig.load(tmp_path / "absent.conf")


def test_length_prefixed_stream():
    frames = fragment(1, SaMessageType.BULK_DATA, 1, 2, bytes(1000))
    data = encode_stream(frames)
    assert [decode_frame(b) for b in decode_stream(data)] == frames
    with pytest.raises(Exception):
        decode_stream(data[:-1])


# -- session pool -----------------------------------------------------------------


def _router_pool(clock, n: int = 4, **kw):
    router = TakRouter("stub", clock=clock)
    return router, SessionPool(RouterConnector(router), virtual_credentials(n), clock=clock, **kw)


def test_pool_reuses_within_ttl(clock):
    _, pool = _router_pool(clock)
    e = corpus.location("A", 1, 2, 3)
    pool.submit(1, e)
    clock.advance(1.0)
    assert not pool.submit(1, e).handshake
    clock.advance(61.0)
    assert pool.submit(1, e).handshake
    assert pool.handshakes == 2


def test_pool_is_sticky_per_sender(clock):
    _, pool = _router_pool(clock)
    e = corpus.location("A", 1, 2, 3)
    first = {s: pool.submit(s, e).certificate_id for s in (1, 2, 3)}
    clock.advance(100.0)
    again = {s: pool.submit(s, e).certificate_id for s in (3, 2, 1)}
    assert first == again


def test_pool_exhaustion_and_steal(clock):
    _, pool = _router_pool(clock, n=2)
    e = corpus.location("A", 1, 2, 3)
    pool.submit(1, e)
    pool.submit(2, e)
    with pytest.raises(PoolExhausted):
        pool.submit(3, e)
    clock.advance(5.0)
    r = pool.submit(3, e)
    assert r.handshake and r.certificate_id == pool.history[0][1]


def test_pool_exhausted_surfaces_as_drop(clock):
    router = TakRouter("stub", clock=clock)
    pool = SessionPool(RouterConnector(router), virtual_credentials(1), clock=clock)
    gw = Gateway(GatewayConfig(gateway_address=GW), pool.submit, lambda f: None, clock=clock)
    gw.ingest_radio_frame(_location_frame())
    other = make_frame(SaMessageType.LOCATION, 0x0B, BROADCAST, 1, _location_frame().payload)
    assert gw.ingest_radio_frame(other) == Dropped("PoolExhausted")


def test_unreachable_endpoint(certs):
    pool = SessionPool(TlsConnector("127.0.0.1", 1, certs), certs.clients, retry_delay=0.0)
    with pytest.raises(TakUnreachable):
        pool.submit(1, corpus.location("A", 1, 2, 3))


def _wait(pred, timeout: float = 5.0) -> None:
    end = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > end:
            raise AssertionError("condition not reached")
        time.sleep(0.01)


def test_tls_handshakes_counted_by_stub(certs, clock):
    router = TakRouter("stub")
    seen = []
    router.connect("watcher", seen.append)
    with TakServer(router, server_context(certs)) as server:
        pool = SessionPool(TlsConnector("127.0.0.1", server.port, certs), certs.clients, clock=clock)
        # distinct uids: the router drops repeats of one event
        events = [corpus.location(f"A{i}", 1, 2, 3) for i in range(3)]
        pool.submit(7, events[0])
        clock.advance(1.0)
        pool.submit(7, events[1])
        _wait(lambda: len(seen) == 2)
        assert server.handshakes == 1
        clock.advance(61.0)
        pool.submit(7, events[2])
        _wait(lambda: len(seen) == 3)
        assert server.handshakes == 2
        assert server.peer_names == ["client-00", "client-00"]
        pool.close()


def test_concurrent_submits_never_share_a_session(clock):
    router = TakRouter("stub", clock=clock)
    pool = SessionPool(RouterConnector(router), virtual_credentials(8), clock=clock)
    e = corpus.location("A", 1, 2, 3)
    errors = []

    def run(sender: int) -> None:
        try:
            for _ in range(50):
                pool.submit(sender, e)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(s,)) for s in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert pool.handshakes == 8
    assert len({cid for _, cid in pool.history}) == 8
