from __future__ import annotations

import socket
import ssl
import time

import pytest

from sa_gateway import corpus
from sa_gateway.cot import parse_cot, to_xml
from sa_gateway.provisioning import client_context, server_context
from sa_gateway.tak_stub import (
    BACKOFF_CAP,
    FederationLink,
    FilterKind,
    InProcessPeer,
    LinkState,
    TakRouter,
    TakServer,
    TlsFederationTransport,
    add_flow_tag,
    federate,
    federation_reconnect,
    flow_tags,
    parse_control,
    subscription_line,
)


def _loc(i: int):
    return corpus.location(f"U{i:04d}", 40.0 + i * 1e-4, -105.0, 1600.0)


def _wait(pred, timeout: float = 5.0) -> None:
    end = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > end:
            raise AssertionError("condition not reached")
        time.sleep(0.01)


# -- routing ------------------------------------------------------------------


def test_all_subscription_excludes_sender():
    r = TakRouter()
    a, b, c = [], [], []
    ca = r.connect("a", a.append)
    r.connect("b", b.append)
    r.connect("c", c.append)
    delivered = r.accept_and_route(_loc(1), ca)
    assert len(delivered) == 2
    assert (len(a), len(b), len(c)) == (0, 1, 1)


def test_by_destination_uid_filter():
    r = TakRouter()
    bravo, charlie, everyone = [], [], []
    r.connect("bravo", bravo.append, FilterKind.BY_DESTINATION_UID, {"BRAVO"})
    r.connect("charlie", charlie.append, FilterKind.BY_DESTINATION_UID, {"CHARLIE"})
    r.connect("all", everyone.append)
    r.accept_and_route(corpus.chat("ALPHA", "hi", dest_callsign="BRAVO"))
    r.accept_and_route(corpus.chat("ALPHA", "to the room"))
    assert [e.detail.find("remarks").text for e in bravo] == ["hi"]
    assert charlie == []
    assert len(everyone) == 2


def test_resubscribe_narrows_filter():
    r = TakRouter()
    got = []
    cid = r.connect("x", got.append)
    r.resubscribe(cid, FilterKind.BY_DESTINATION_UID, {"NOBODY"})
    r.accept_and_route(_loc(1))
    assert got == []


def test_repeated_event_delivered_once_per_subscription():
    r = TakRouter()
    got = []
    r.connect("x", got.append)
    e = _loc(1)
    r.accept_and_route(e)
    r.accept_and_route(e.copy())
    assert len(got) == 1
    assert r.metrics["duplicates_suppressed"] == 1


def test_failing_consumer_does_not_stall_routing():
    r = TakRouter()
    got = []

    def broken(_):
        raise RuntimeError("consumer fault")

    r.connect("bad", broken)
    r.connect("good", got.append)
    r.accept_and_route(_loc(1))
    assert len(got) == 1
    assert r.metrics["delivery_errors"] == 1


def test_unknown_federation_mode_rejected():
    with pytest.raises(ValueError):
        FederationLink("peer", InProcessPeer(TakRouter()), mode="Everything")


def test_subscription_control_line_roundtrip():
    line = subscription_line(FilterKind.BY_DESTINATION_UID, {"B", "A"})
    assert parse_control(line) == (FilterKind.BY_DESTINATION_UID, frozenset({"A", "B"}))
    assert parse_control(to_xml(_loc(1))) is None


# -- federation ---------------------------------------------------------------


def test_two_stub_federation_delivers_once_and_never_echoes():
    a, b = TakRouter("A"), TakRouter("B")
    federate(a, b)
    at_a, at_b = [], []
    sender = a.connect("sender", lambda e: None)
    a.connect("peer-a", at_a.append)
    b.connect("peer-b", at_b.append)
    a.accept_and_route(_loc(1), sender)
    assert len(at_a) == 1 and len(at_b) == 1
    assert flow_tags(at_b[0]).keys() == {"A"}
    assert b.metrics["federated_out"] == 0
    assert a.metrics["federated_in"] == 0


def test_three_stub_mesh_is_loop_free():
    stubs = [TakRouter(n) for n in "ABC"]
    for i in range(3):
        for j in range(i + 1, 3):
            federate(stubs[i], stubs[j])
    inboxes = []
    for s in stubs:
        box = []
        s.connect("client", box.append)
        inboxes.append(box)
    for k, s in enumerate(stubs):
        s.accept_and_route(_loc(k))
    assert [len(b) for b in inboxes] == [3, 3, 3]
    assert sum(s.metrics["federated_in"] for s in stubs) == 6


def test_own_flow_tag_is_dropped():
    r = TakRouter("A")
    got = []
    r.connect("x", got.append)
    tagged = add_flow_tag(_loc(1), "A", "2024-05-01T12:00:00.000Z")
    assert r.accept_and_route(tagged, federated=True) == set()
    assert got == [] and r.metrics["loop_dropped"] == 1


def test_selected_mode_filters_by_type_prefix():
    a, b = TakRouter("A"), TakRouter("B")
    federate(a, b, "Selected", ("b-t-f",))
    got = []
    b.connect("x", got.append)
    a.accept_and_route(_loc(1))
    a.accept_and_route(corpus.chat("ALPHA", "relayed"))
    assert [e.event_type for e in got] == ["b-t-f"]


def test_outage_queue_drops_oldest_beyond_limit():
    a, b = TakRouter("A"), TakRouter("B")
    link, _ = federate(a, b)
    got = []
    b.connect("x", got.append)
    link.transport.up = False
    for i in range(1001):
        a.accept_and_route(_loc(i))
    assert link.state is LinkState.RECONNECTING
    assert len(link.queue) == 1000 and link.dropped == 1
    link.transport.up = True
    federation_reconnect(link, 100.0)
    assert link.reconnects == 1
    assert [e.uid for e in got] == [_loc(i).uid for i in range(1, 1001)]
    assert not link.queue


def test_reconnect_flushes_in_order_after_backoff():
    a, b = TakRouter("A"), TakRouter("B")
    link, _ = federate(a, b)
    got = []
    b.connect("x", got.append)
    link.transport.up = False
    for i in range(5):
        link.offer(_loc(i), 10.0)
    link.transport.up = True
    link.poll(10.5)
    assert got == [] and link.state is LinkState.RECONNECTING
    link.poll(11.0)
    assert link.state is LinkState.CONNECTED
    assert [e.uid for e in got] == [_loc(i).uid for i in range(5)]


def test_no_outage_means_no_reconnects():
    a, b = TakRouter("A"), TakRouter("B")
    link, back = federate(a, b)
    for i in range(50):
        a.accept_and_route(_loc(i))
        a.poll(float(i))
    assert link.reconnects == 0 and back.reconnects == 0
    assert link.sent == 50 and link.dropped == 0


def test_backoff_doubles_to_cap():
    peer = InProcessPeer(TakRouter("B"))
    peer.up = False
    link = FederationLink("B", peer)
    now, gaps = 0.0, []
    for _ in range(8):
        federation_reconnect(link, now)
        gaps.append(link.next_attempt - now)
        now = link.next_attempt
    assert gaps == [1, 2, 4, 8, 16, 30, 30, 30]
    assert link.backoff == BACKOFF_CAP
    peer.up = True
    federation_reconnect(link, now)
    assert link.state is LinkState.CONNECTED and link.backoff == 1


# -- TLS server ---------------------------------------------------------------


def _client(certs, server: TakServer, index: int = 0) -> ssl.SSLSocket:
    ctx = client_context(certs, certs.clients[index])
    raw = socket.create_connection(("127.0.0.1", server.port), timeout=5)
    return ctx.wrap_socket(raw, server_hostname="127.0.0.1")


def _read_events(sock: ssl.SSLSocket, n: int) -> list:
    buf = b""
    while buf.count(b"\n") < n:
        chunk = sock.recv(65536)
        if not chunk:
            break
        buf += chunk
    return [parse_cot(line) for line in buf.splitlines() if line.strip()]


def test_tls_malformed_line_is_skipped(certs):
    router = TakRouter("stub")
    got = []
    router.connect("watcher", got.append)
    with TakServer(router, server_context(certs)) as server:
        with _client(certs, server) as s:
            s.sendall(b"<event this is not xml\n" + to_xml(_loc(1)) + b"\n")
            _wait(lambda: len(got) == 1)
        assert server.malformed == 1
        assert server.peer_names == ["client-00"]


def test_tls_clients_exchange_events(certs):
    with TakServer(TakRouter("stub"), server_context(certs)) as server:
        with _client(certs, server, 0) as a, _client(certs, server, 1) as b:
            _wait(lambda: server.handshakes == 2)
            a.sendall(to_xml(_loc(7)) + b"\n")
            (e,) = _read_events(b, 1)
            assert e.uid == _loc(7).uid


def test_tls_rejects_client_without_certificate(certs):
    with TakServer(TakRouter("stub"), server_context(certs)) as server:
        ctx = client_context(certs, None)
        raw = socket.create_connection(("127.0.0.1", server.port), timeout=5)
        data = b""
        try:
            # TLS 1.3 reports the missing client certificate on first read
            with ctx.wrap_socket(raw, server_hostname="127.0.0.1") as s:
                s.sendall(to_xml(_loc(1)) + b"\n")
                data = s.recv(1)
        except (ssl.SSLError, OSError):
            pass
        assert data == b""
        assert server.handshakes == 0


def test_tls_federation_between_stubs(certs):
    ra, rb = TakRouter("A"), TakRouter("B")
    got = []
    rb.connect("watcher", got.append)
    with TakServer(rb, server_context(certs), federation_port=0) as sb:
        transport = TlsFederationTransport("127.0.0.1", sb.federation_port, client_context(certs, certs.clients[-1]))
        link = ra.add_link(FederationLink("B", transport))
        federation_reconnect(link, 0.0)
        assert link.state is LinkState.CONNECTED
        for i in range(3):
            ra.accept_and_route(_loc(i))
        _wait(lambda: len(got) == 3)
        assert [e.uid for e in got] == [_loc(i).uid for i in range(3)]
        assert all(flow_tags(e).keys() == {"A"} for e in got)
        transport.close()
