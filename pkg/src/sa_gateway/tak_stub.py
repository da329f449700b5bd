"""Minimal TAK server emulation.

:class:`TakRouter` is the transport-free routing core: connections register
a subscription and a delivery callback, and every accepted event is handed
to each other matching subscription at most once. Federation links relay
locally originated events to peer stubs, stamping a ``_flow-tags_`` hop
marker; events that arrived over federation are never federated again.

:class:`TakServer` puts the router behind a mutually authenticated TLS
listener speaking newline-delimited CoT XML, plus a second listener for
inbound federation traffic using the same framing.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import socket
import ssl
import threading
import time
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

from .cot import CotElement, CotError, CotEvent, destinations, format_time, parse_cot, parse_root, to_xml

log = logging.getLogger(__name__)

OUTAGE_QUEUE = 1000
BACKOFF_BASE = 1.0
BACKOFF_CAP = 30.0
MAX_LINE = 64 * 1024
FLOW_TAGS = "_flow-tags_"


class FilterKind(Enum):
    ALL = "All"
    BY_DESTINATION_UID = "ByDestinationUid"


@dataclass
class Subscription:
    connection_id: int
    client_uid: str
    filter: FilterKind = FilterKind.ALL
    uids: frozenset[str] = frozenset()

    def matches(self, e: CotEvent) -> bool:
        if self.filter is FilterKind.ALL:
            return True
        for d in destinations(e):
            if d.get("uid") in self.uids or d.get("callsign") in self.uids:
                return True
        return False


def event_key(e: CotEvent) -> tuple[str, str, str]:
    return (e.uid, e.event_type, format_time(e.time))


def flow_tags(e: CotEvent) -> dict[str, str]:
    node = e.detail.find(FLOW_TAGS)
    return dict(node.attrib) if node is not None else {}


def add_flow_tag(e: CotEvent, stub_id: str, stamp: str) -> CotEvent:
    out = e.copy()
    node = out.detail.find(FLOW_TAGS)
    if node is None:
        node = CotElement(FLOW_TAGS)
        out.detail.children.append(node)
    node.attrib[stub_id] = stamp
    return out


class LinkState(Enum):
    CONNECTED = "Connected"
    RECONNECTING = "Reconnecting"


class FederationTransport(Protocol):
    def connect(self) -> None: ...

    def send(self, e: CotEvent) -> None: ...

    def close(self) -> None: ...


@dataclass
class FederationLink:
    """Outbound relay to one peer stub.

    ``mode`` is ``"ForwardAll"`` or ``"Selected"``; in selected mode only
    events whose type starts with one of ``prefixes`` are relayed. While the
    peer is unreachable events wait in a queue of at most ``queue_limit``;
    the oldest is dropped beyond that. Reconnect attempts back off from 1 s,
    doubling to a 30 s cap.
    """

    peer_endpoint: str
    transport: FederationTransport
    mode: str = "ForwardAll"
    prefixes: tuple[str, ...] = ()
    queue_limit: int = OUTAGE_QUEUE
    state: LinkState = LinkState.RECONNECTING
    backoff: float = BACKOFF_BASE
    next_attempt: float = 0.0
    reconnects: int = 0
    attempts: int = 0
    dropped: int = 0
    sent: int = 0
    queue: deque = field(default_factory=deque)
    _ever_connected: bool = False
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in ("ForwardAll", "Selected"):
            raise ValueError(f"unknown federation mode {self.mode!r}")

    def selects(self, e: CotEvent) -> bool:
        return self.mode == "ForwardAll" or e.event_type.startswith(self.prefixes)

    def offer(self, e: CotEvent, now: float) -> bool:
        """Relay ``e`` now or queue it; False if the mode filters it out."""
        if not self.selects(e):
            return False
        with self._lock:
            if self.state is LinkState.CONNECTED and not self.queue:
                try:
                    self.transport.send(e)
                    self.sent += 1
                    return True
                except (ConnectionError, OSError):
                    self._lost(now)
            self.queue.append(e)
            while len(self.queue) > self.queue_limit:
                self.queue.popleft()
                self.dropped += 1
            return True

    def _lost(self, now: float) -> None:
        self.state = LinkState.RECONNECTING
        self.backoff = BACKOFF_BASE
        self.next_attempt = now + self.backoff
        try:
            self.transport.close()
        except OSError:
            pass

    def _flush(self, now: float) -> None:
        while self.queue:
            try:
                self.transport.send(self.queue[0])
            except (ConnectionError, OSError):
                self._lost(now)
                return
            self.queue.popleft()
            self.sent += 1

    def poll(self, now: float) -> None:
        with self._lock:
            if self.state is LinkState.RECONNECTING and now >= self.next_attempt:
                federation_reconnect(self, now)
            elif self.state is LinkState.CONNECTED and self.queue:
                self._flush(now)


def federation_reconnect(link: FederationLink, now: float | None = None) -> FederationLink:
    """One reconnect attempt; on success the outage queue is flushed in order."""
    now = time.monotonic() if now is None else now
    with link._lock:
        link.attempts += 1
        try:
            link.transport.connect()
        except (ConnectionError, OSError):
            link.next_attempt = now + link.backoff
            link.backoff = min(link.backoff * 2, BACKOFF_CAP)
            return link
        link.state = LinkState.CONNECTED
        if link._ever_connected:
            link.reconnects += 1
        link._ever_connected = True
        link.backoff = BACKOFF_BASE
        link._flush(now)
        return link


class TakRouter:
    """Subscription table and routing core shared by every transport."""

    def __init__(self, stub_id: str = "stub", clock: Callable[[], float] = time.monotonic):
        self.stub_id = stub_id
        self.clock = clock
        self.subscriptions: dict[int, Subscription] = {}
        self.links: list[FederationLink] = []
        self.metrics: Counter = Counter()
        self._deliver: dict[int, Callable[[CotEvent], None]] = {}
        self._seen: dict[int, OrderedDict] = {}
        self._ids = itertools.count(1)
        self._lock = threading.RLock()

    def connect(
        self,
        client_uid: str,
        deliver: Callable[[CotEvent], None],
        filter: FilterKind = FilterKind.ALL,
        uids: frozenset[str] | set[str] = frozenset(),
    ) -> int:
        with self._lock:
            cid = next(self._ids)
            self.subscriptions[cid] = Subscription(cid, client_uid, filter, frozenset(uids))
            self._deliver[cid] = deliver
            self._seen[cid] = OrderedDict()
            self.metrics["connections"] += 1
            return cid

    def resubscribe(self, cid: int, filter: FilterKind, uids: frozenset[str] | set[str] = frozenset()) -> None:
        with self._lock:
            sub = self.subscriptions[cid]
            self.subscriptions[cid] = Subscription(cid, sub.client_uid, filter, frozenset(uids))

    def disconnect(self, cid: int) -> None:
        with self._lock:
            self.subscriptions.pop(cid, None)
            self._deliver.pop(cid, None)
            self._seen.pop(cid, None)

    def add_link(self, link: FederationLink) -> FederationLink:
        with self._lock:
            self.links.append(link)
        return link

    def accept_and_route(self, e: CotEvent, from_cid: int | None = None, *, federated: bool = False) -> set[int]:
        """Deliver ``e`` to every other matching subscription; returns the delivery set."""
        if federated and self.stub_id in flow_tags(e):
            self.metrics["loop_dropped"] += 1
            return set()
        key = event_key(e)
        delivered = set()
        with self._lock:
            self.metrics["federated_in" if federated else "accepted"] += 1
            targets = []
            for cid, sub in self.subscriptions.items():
                if cid == from_cid or not sub.matches(e):
                    continue
                seen = self._seen[cid]
                if key in seen:
                    self.metrics["duplicates_suppressed"] += 1
                    continue
                seen[key] = True
                if len(seen) > 4096:
                    seen.popitem(last=False)
                targets.append((cid, self._deliver[cid]))
            for cid, deliver in targets:
                try:
                    deliver(e)
                    delivered.add(cid)
                except Exception:  # a failing consumer must not stall routing
                    log.exception("delivery to connection %d failed", cid)
                    self.metrics["delivery_errors"] += 1
            if not delivered:
                self.metrics["undeliverable"] += 1
            self.metrics["delivered"] += len(delivered)
            if not federated and self.links:
                tagged = add_flow_tag(e, self.stub_id, format_time(e.time))
                now = self.clock()
                for link in self.links:
                    if link.offer(tagged, now):
                        self.metrics["federated_out"] += 1
        return delivered

    def poll(self, now: float | None = None) -> None:
        now = self.clock() if now is None else now
        for link in list(self.links):
            link.poll(now)


class InProcessPeer:
    """Federation transport straight into another router (used by simulations)."""

    def __init__(self, peer: TakRouter, origin: str = ""):
        self.peer = peer
        self.origin = origin
        self.up = True
        self.connected = False

    def connect(self) -> None:
        if not self.up:
            raise ConnectionRefusedError("peer is down")
        self.connected = True

    def send(self, e: CotEvent) -> None:
        if not (self.up and self.connected):
            self.connected = False
            raise ConnectionResetError("peer is down")
        self.peer.accept_and_route(e, None, federated=True)

    def close(self) -> None:
        self.connected = False


def federate(a: TakRouter, b: TakRouter, mode: str = "ForwardAll", prefixes: tuple[str, ...] = ()) -> tuple[FederationLink, FederationLink]:
    """Link two in-process routers in both directions and connect the links."""
    ab = a.add_link(FederationLink(b.stub_id, InProcessPeer(b, a.stub_id), mode, prefixes))
    ba = b.add_link(FederationLink(a.stub_id, InProcessPeer(a, b.stub_id), mode, prefixes))
    federation_reconnect(ab, 0.0)
    federation_reconnect(ba, 0.0)
    return ab, ba


# -- TLS transport ----------------------------------------------------------


def subscription_line(filter: FilterKind, uids: set[str] | frozenset[str] = frozenset()) -> bytes:
    """Control line a client may send first to narrow its subscription."""
    return f'<subscription filter="{filter.value}" uids="{",".join(sorted(uids))}"/>\n'.encode()


def parse_control(line: bytes) -> tuple[FilterKind, frozenset[str]] | None:
    if not line.lstrip().startswith(b"<subscription"):
        return None
    root = parse_root(line)
    uids = frozenset(u for u in root.get("uids", "").split(",") if u)
    return FilterKind(root.get("filter", "All")), uids


class TlsFederationTransport:
    """Federation client: newline-delimited CoT over mutually authenticated TLS."""

    def __init__(self, host: str, port: int, context: ssl.SSLContext, timeout: float = 5.0):
        self.host, self.port = host, port
        self.context = context
        self.timeout = timeout
        self._sock: ssl.SSLSocket | None = None

    def connect(self) -> None:
        raw = socket.create_connection((self.host, self.port), timeout=self.timeout)
        try:
            self._sock = self.context.wrap_socket(raw, server_hostname=self.host)
        except (ssl.SSLError, OSError):
            raw.close()
            raise ConnectionError("federation handshake failed") from None

    def send(self, e: CotEvent) -> None:
        if self._sock is None:
            raise ConnectionError("not connected")
        self._sock.sendall(to_xml(e) + b"\n")

    def close(self) -> None:
        if self._sock is not None:
            # graceful TLS shutdown so the peer reads every queued line
            try:
                self._sock.unwrap()
            except (OSError, ValueError):
                pass
            self._sock.close()
            self._sock = None


class TakServer:
    """TLS front end for a :class:`TakRouter`, run on a background event loop.

    ``handshakes`` counts completed mutually authenticated TLS handshakes on
    the client port; tests use it to verify session reuse.
    """

    def __init__(
        self,
        router: TakRouter,
        context: ssl.SSLContext,
        host: str = "127.0.0.1",
        port: int = 0,
        federation_port: int | None = None,
        poll_interval: float = 0.2,
    ):
        self.router = router
        self.context = context
        self.host = host
        self.port = port
        self.federation_port = federation_port
        self.poll_interval = poll_interval
        self.handshakes = 0
        self.peer_names: list[str] = []
        self.malformed = 0
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()
        self._stop: asyncio.Event | None = None
        self._error: BaseException | None = None
        self._count_lock = threading.Lock()

    def start(self) -> TakServer:
        self._thread = threading.Thread(target=self._run, name=f"tak-{self.router.stub_id}", daemon=True)
        self._thread.start()
        self._ready.wait(10)
        if self._error is not None:
            raise self._error
        return self

    def stop(self) -> None:
        if self._loop is not None and self._stop is not None:
            self._loop.call_soon_threadsafe(self._stop.set)
        if self._thread is not None:
            self._thread.join(10)

    def __enter__(self) -> TakServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _run(self) -> None:
        try:
            asyncio.run(self._main())
        except BaseException as exc:  # surfaced to start()
            self._error = exc
            self._ready.set()

    async def _main(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stop = asyncio.Event()
        servers = [
            await asyncio.start_server(
                self._client, self.host, self.port, ssl=self.context, limit=MAX_LINE
            )
        ]
        self.port = servers[0].sockets[0].getsockname()[1]
        if self.federation_port is not None:
            fed = await asyncio.start_server(
                self._federation, self.host, self.federation_port, ssl=self.context, limit=MAX_LINE
            )
            self.federation_port = fed.sockets[0].getsockname()[1]
            servers.append(fed)
        self._ready.set()
        poller = asyncio.create_task(self._poll_links())
        await self._stop.wait()
        poller.cancel()
        for s in servers:
            s.close()

    async def _poll_links(self) -> None:
        while True:
            await asyncio.get_running_loop().run_in_executor(None, self.router.poll)
            await asyncio.sleep(self.poll_interval)

    def _peer_name(self, writer: asyncio.StreamWriter) -> str:
        cert = writer.get_extra_info("peercert") or {}
        for rdn in cert.get("subject", ()):
            for k, v in rdn:
                if k == "commonName":
                    return v
        return "?"

    async def _lines(self, reader: asyncio.StreamReader):
        while True:
            try:
                line = await reader.readuntil(b"\n")
            except asyncio.IncompleteReadError as exc:
                if exc.partial.strip():
                    yield exc.partial
                return
            except (asyncio.LimitOverrunError, ValueError):
                self.malformed += 1
                return
            except (ConnectionError, ssl.SSLError, OSError):
                return
            if line.strip():
                yield line

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        name = self._peer_name(writer)
        with self._count_lock:
            self.handshakes += 1
            self.peer_names.append(name)
        loop = asyncio.get_running_loop()

        def deliver(e: CotEvent) -> None:
            data = to_xml(e) + b"\n"
            loop.call_soon_threadsafe(self._write, writer, data)

        cid = self.router.connect(name, deliver)
        try:
            async for line in self._lines(reader):
                try:
                    control = parse_control(line)
                    if control is not None:
                        self.router.resubscribe(cid, *control)
                        continue
                    e = parse_cot(line)
                except CotError:
                    self.malformed += 1
                    continue
                self.router.accept_and_route(e, cid)
        finally:
            self.router.disconnect(cid)
            writer.close()

    @staticmethod
    def _write(writer: asyncio.StreamWriter, data: bytes) -> None:
        if not writer.is_closing():
            writer.write(data)

    async def _federation(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            async for line in self._lines(reader):
                try:
                    e = parse_cot(line)
                except CotError:
                    self.malformed += 1
                    continue
                self.router.accept_and_route(e, None, federated=True)
        finally:
            writer.close()
