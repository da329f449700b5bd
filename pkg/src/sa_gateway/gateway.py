"""The gateway translation service.

Radio to IP: decoded frames go through the reliability agent; completed
messages are rebuilt into CoT from templates and submitted to the TAK server
over a TLS session owned by the sending radio. IP to radio: CoT documents
are mirrored to JSON, classified, reduced to SA payloads and fragmented onto
the radio port, unicast when the destination resolves and the type calls
for it.

The core here is transport-agnostic. Sessions come from a
:class:`SessionPool` whose connector is either a real TLS client or an
in-process hand-off to a :class:`~sa_gateway.tak_stub.TakRouter`; frames
leave through a ``radio_tx`` callable.
"""

from __future__ import annotations

import logging
import socket
import ssl
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

from .compression import DEFAULT_POLICY, CompressionPolicy
from .cot import CotError, CotEvent, cot_to_json, destinations, json_to_cot, parse_cot, to_xml
from .frame_codec import (
    BROADCAST,
    FrameError,
    SaFrame,
    SaMessageType,
    SizeClass,
    decode_frame,
    encode_frame,
    is_broadcast,
    make_frame,
    parse_address,
)
from .provisioning import Credential, Provisioned, client_context
from .reliability import RETRY_LIMIT, Outcome, ReliabilityError, TransferAgent
from .tak_stub import FilterKind, TakRouter, subscription_line
from .translator import (
    ALL_CHAT,
    TemplateRegistry,
    TranslationError,
    classify_event,
    default_callsign,
    default_registry,
    extract_sa_payload,
    parse_bt_uid,
    rebuild_cot,
)

log = logging.getLogger(__name__)

POOL_TTL = 60.0
POOL_SIZE = 32
STEAL_GRACE = 5.0
CONNECT_ATTEMPTS = 3


class GatewayError(Exception):
    pass


class ConfigError(GatewayError, ValueError):
    pass


class PoolExhausted(GatewayError):
    pass


class TakUnreachable(GatewayError):
    pass


class TlsHandshakeFailed(GatewayError):
    pass


# -- configuration ----------------------------------------------------------


def _types(text: str) -> frozenset[SaMessageType]:
    out = set()
    for name in filter(None, (t.strip() for t in text.split(","))):
        try:
            out.add(SaMessageType(int(name)) if name.isdigit() else SaMessageType[name.upper()])
        except (KeyError, ValueError):
            raise ConfigError(f"unknown message type {name!r}") from None
    return frozenset(out)


@dataclass(frozen=True)
class GatewayConfig:
    """Gateway settings; :meth:`parse` reads the ``key = value`` file format.

    Recognised keys: ``tak_endpoint``, ``pool_ttl_seconds``, ``pool_size``,
    ``retry_limit``, ``compress_types``, ``min_gain_bytes``, ``template_dir``,
    ``radio_port``, ``unicast_types``, ``gateway_address``, ``frame_airtime``,
    ``cert_dir``. Type lists are comma-separated names (``bulk_data, ack``).
    """

    tak_endpoint: str = "127.0.0.1:8089"
    pool_ttl_seconds: float = POOL_TTL
    pool_size: int = POOL_SIZE
    retry_limit: int = RETRY_LIMIT
    compression_policy: CompressionPolicy = DEFAULT_POLICY
    template_dir: str | None = None
    radio_port: str = "listen://127.0.0.1:7001"
    unicast_types: frozenset[SaMessageType] = frozenset({SaMessageType.BULK_DATA, SaMessageType.ACK})
    gateway_address: int = 0x0000_0000_0000_0001
    frame_airtime: float = 0.70
    cert_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.pool_ttl_seconds > 0:
            raise ConfigError("pool_ttl_seconds must be positive")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be at least 1")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit must be non-negative")
        if not self.frame_airtime > 0:
            raise ConfigError("frame_airtime must be positive")
        missing = {SaMessageType.BULK_DATA, SaMessageType.ACK} - self.unicast_types
        if missing:
            raise ConfigError(f"unicast_types must include {sorted(t.name for t in missing)}")
        if is_broadcast(self.gateway_address):
            raise ConfigError("gateway_address cannot be the broadcast address")

    @property
    def tak_host_port(self) -> tuple[str, int]:
        host, _, port = self.tak_endpoint.rpartition(":")
        try:
            return host or "127.0.0.1", int(port)
        except ValueError:
            raise ConfigError(f"bad tak_endpoint {self.tak_endpoint!r}") from None

    @classmethod
    def parse(cls, text: str) -> GatewayConfig:
        kw: dict = {}
        compress: frozenset | None = None
        min_gain = 0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (p.strip() for p in line.partition("="))
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            try:
                if key in ("tak_endpoint", "template_dir", "radio_port", "cert_dir"):
                    kw[key] = value
                elif key in ("pool_ttl_seconds", "frame_airtime"):
                    kw[key] = float(value)
                elif key in ("pool_size", "retry_limit"):
                    kw[key] = int(value)
                elif key == "unicast_types":
                    kw[key] = _types(value)
                elif key == "compress_types":
                    compress = _types(value)
                elif key == "min_gain_bytes":
                    min_gain = int(value)
                elif key == "gateway_address":
                    kw[key] = parse_address(value)
                else:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"line {lineno}: {key}: {exc}") from None
        if compress is not None or min_gain:
            try:
                kw["compression_policy"] = CompressionPolicy(
                    compress if compress is not None else DEFAULT_POLICY.apply_to, min_gain
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> GatewayConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        return cls.parse(text)


# -- TLS sessions -------------------------------------------------------------


class Connection(Protocol):
    def submit(self, e: CotEvent) -> None: ...

    def close(self) -> None: ...


Connector = Callable[[Credential, int], Connection]


class SessionState(Enum):
    ACTIVE = "Active"
    IDLE = "Idle"
    CLOSED = "Closed"


@dataclass
class TlsSession:
    sender_key: int
    certificate_id: str
    established_at: float
    last_used_at: float
    connection: Connection
    state: SessionState = SessionState.IDLE
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def close(self) -> None:
        if self.state is not SessionState.CLOSED:
            self.state = SessionState.CLOSED
            try:
                self.connection.close()
            except OSError:
                pass


@dataclass(frozen=True)
class SubmissionReceipt:
    sender: int
    certificate_id: str
    handshake: bool
    submitted_at: float


class CertificatePool:
    """Client credentials plus the sticky sender-to-certificate assignment."""

    def __init__(self, credentials: list[Credential]):
        if not credentials:
            raise ConfigError("certificate pool is empty")
        self.credentials = {c.cert_id: c for c in credentials}
        self.order = [c.cert_id for c in credentials]
        self.assignment: dict[int, str] = {}
        self.last_released: dict[str, float] = {}

    def holder(self, cert_id: str) -> int | None:
        for sender, cid in self.assignment.items():
            if cid == cert_id:
                return sender
        return None


class SessionPool:
    """Per-sender TLS sessions over a bounded certificate pool.

    A sender's session is reused while it was last used within ``ttl``.
    A new session takes the sender's previous certificate when it is free,
    otherwise a never-used certificate, otherwise the least recently released
    one. With every certificate held by a live session, the least recently
    used session idle for at least ``grace`` seconds is closed and its
    certificate reassigned; failing that :class:`PoolExhausted` is raised.
    """

    def __init__(
        self,
        connector: Connector,
        credentials: list[Credential],
        ttl: float = POOL_TTL,
        grace: float = STEAL_GRACE,
        clock: Callable[[], float] = time.monotonic,
        connect_attempts: int = CONNECT_ATTEMPTS,
        retry_delay: float = 0.05,
    ):
        self.connector = connector
        self.certs = CertificatePool(credentials)
        self.ttl = ttl
        self.grace = grace
        self.clock = clock
        self.connect_attempts = connect_attempts
        self.retry_delay = retry_delay
        self.sessions: dict[int, TlsSession] = {}
        self.handshakes = 0
        self.history: list[tuple[int, str]] = []
        self._lock = threading.Lock()
        self._sender_locks: dict[int, threading.Lock] = defaultdict(threading.Lock)

    def _fresh(self, s: TlsSession, now: float) -> bool:
        return s.state is not SessionState.CLOSED and now - s.last_used_at <= self.ttl

    def expire(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        closed = 0
        with self._lock:
            for sender, s in list(self.sessions.items()):
                if s.state is SessionState.IDLE and not self._fresh(s, now):
                    self._release(sender, s, now)
                    closed += 1
        return closed

    def _release(self, sender: int, s: TlsSession, now: float) -> None:
        s.close()
        del self.sessions[sender]
        self.certs.last_released[s.certificate_id] = now

    def _pick_certificate(self, sender: int, now: float) -> str:
        live = {s.certificate_id for s in self.sessions.values()}
        sticky = self.certs.assignment.get(sender)
        if sticky is not None and sticky not in live:
            return sticky
        assigned = set(self.certs.assignment.values())
        for cid in self.certs.order:
            if cid not in assigned:
                return cid
        free = [cid for cid in self.certs.order if cid not in live]
        if free:
            return min(free, key=lambda c: (self.certs.last_released.get(c, -1.0), self.certs.order.index(c)))
        idle = [
            (s.last_used_at, k)
            for k, s in self.sessions.items()
            if s.state is SessionState.IDLE and now - s.last_used_at >= self.grace
        ]
        if not idle:
            raise PoolExhausted(f"all {len(self.certs.order)} certificates are serving other senders")
        _, victim = min(idle)
        s = self.sessions[victim]
        self._release(victim, s, now)
        return s.certificate_id

    def _open(self, sender: int, now: float) -> TlsSession:
        with self._lock:
            for k, s in list(self.sessions.items()):
                if s.state is SessionState.IDLE and not self._fresh(s, now):
                    self._release(k, s, now)
            cid = self._pick_certificate(sender, now)
            holder = self.certs.holder(cid)
            if holder is not None and holder != sender:
                del self.certs.assignment[holder]
            self.certs.assignment[sender] = cid
            # reserve the certificate while the handshake runs
            placeholder = TlsSession(sender, cid, now, now, _NullConnection(), SessionState.ACTIVE)
            self.sessions[sender] = placeholder
        try:
            conn = self._connect(self.certs.credentials[cid], sender)
        except BaseException:
            with self._lock:
                if self.sessions.get(sender) is placeholder:
                    del self.sessions[sender]
            raise
        with self._lock:
            session = TlsSession(sender, cid, now, now, conn, SessionState.ACTIVE)
            self.sessions[sender] = session
            self.handshakes += 1
            self.history.append((sender, cid))
            return session

    def _connect(self, cred: Credential, sender: int) -> Connection:
        last: Exception | None = None
        for attempt in range(self.connect_attempts):
            try:
                return self.connector(cred, sender)
            except ssl.SSLError as exc:
                raise TlsHandshakeFailed(str(exc)) from None
            except OSError as exc:
                last = exc
                if attempt + 1 < self.connect_attempts:
                    time.sleep(self.retry_delay * 2**attempt)
        raise TakUnreachable(f"TAK endpoint unreachable after {self.connect_attempts} attempts: {last}")

    def submit(self, sender: int, e: CotEvent) -> SubmissionReceipt:
        """Write ``e`` on ``sender``'s session, establishing one if needed."""
        with self._sender_locks[sender]:
            now = self.clock()
            with self._lock:
                s = self.sessions.get(sender)
                reuse = s is not None and s.state is SessionState.IDLE and self._fresh(s, now)
                if reuse:
                    s.state = SessionState.ACTIVE
            if not reuse:
                s = self._open(sender, now)
            try:
                s.connection.submit(e)
            except OSError:
                # stale socket: one fresh session, then give up
                with self._lock:
                    if self.sessions.get(sender) is s:
                        self._release(sender, s, now)
                if not reuse:
                    raise TakUnreachable("write failed on a new session") from None
                s = self._open(sender, now)
                reuse = False
                s.connection.submit(e)
            with self._lock:
                s.last_used_at = now
                s.state = SessionState.IDLE
            return SubmissionReceipt(sender, s.certificate_id, not reuse, now)

    def close(self) -> None:
        with self._lock:
            for k, s in list(self.sessions.items()):
                self._release(k, s, self.clock())


class _NullConnection:
    def submit(self, e: CotEvent) -> None:
        raise OSError("placeholder session")

    def close(self) -> None:
        pass


def submit_uid(sender: int) -> str:
    return f"GTL-{sender:016X}"


class TlsConnection:
    """Blocking TLS client stream carrying newline-delimited CoT."""

    def __init__(self, sock: ssl.SSLSocket):
        self.sock = sock

    def submit(self, e: CotEvent) -> None:
        self.sock.sendall(to_xml(e) + b"\n")

    def close(self) -> None:
        # Unread TLS 1.3 session tickets would make a bare close() send a TCP
        # reset, and the server would discard lines it has not read yet.
        try:
            self.sock.unwrap()
        except (OSError, ValueError):
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class TlsConnector:
    """Opens mutually authenticated TLS sessions to one TAK endpoint.

    Submission sessions subscribe by destination to a uid nobody targets, so
    the server never pushes traffic down them.
    """

    def __init__(self, host: str, port: int, provisioned: Provisioned, timeout: float = 5.0):
        self.host, self.port = host, port
        self.provisioned = provisioned
        self.timeout = timeout
        self._contexts: dict[str, ssl.SSLContext] = {}

    def context(self, cred: Credential | None) -> ssl.SSLContext:
        key = cred.cert_id if cred else ""
        if key not in self._contexts:
            self._contexts[key] = client_context(self.provisioned, cred)
        return self._contexts[key]

    def open(self, cred: Credential) -> ssl.SSLSocket:
        raw = socket.create_connection((self.host, self.port), timeout=self.timeout)
        try:
            return self.context(cred).wrap_socket(raw, server_hostname=self.host)
        except BaseException:
            raw.close()
            raise

    def __call__(self, cred: Credential, sender: int) -> TlsConnection:
        sock = self.open(cred)
        sock.sendall(subscription_line(FilterKind.BY_DESTINATION_UID, {submit_uid(sender)}))
        return TlsConnection(sock)


class RouterConnection:
    def __init__(self, router: TakRouter, sender: int, defer: Callable[[Callable[[], None]], None] | None):
        self.router = router
        self.defer = defer
        self.cid = router.connect(submit_uid(sender), lambda e: None, FilterKind.BY_DESTINATION_UID, {submit_uid(sender)})

    def submit(self, e: CotEvent) -> None:
        if self.defer is None:
            self.router.accept_and_route(e, self.cid)
        else:
            self.defer(lambda: self.router.accept_and_route(e, self.cid))

    def close(self) -> None:
        self.router.disconnect(self.cid)


class RouterConnector:
    """In-process sessions straight into a router; ``defer`` models IP transit."""

    def __init__(self, router: TakRouter, defer: Callable[[Callable[[], None]], None] | None = None):
        self.router = router
        self.defer = defer

    def __call__(self, cred: Credential, sender: int) -> RouterConnection:
        return RouterConnection(self.router, sender, self.defer)


def virtual_credentials(n: int = POOL_SIZE) -> list[Credential]:
    """Placeholder credentials for in-process sessions (no key material)."""
    return [Credential(f"client-{i:02d}", Path("/dev/null"), Path("/dev/null")) for i in range(n)]


# -- destination registry ---------------------------------------------------------


class DestinationRegistry:
    """uid/callsign to radio address, learned from traffic the gateway rebuilt."""

    def __init__(self) -> None:
        self.by_key: dict[str, int] = {}
        self.callsigns: dict[int, str] = {}
        self.local_nodes: set[int] = set()
        self._lock = threading.Lock()

    def learn(self, e: CotEvent, source: int) -> None:
        with self._lock:
            self.local_nodes.add(source)
            self.by_key[e.uid] = source
            contact = e.detail.find("contact")
            chat = e.detail.find("__chat")
            for cs in (
                contact.attrib.get("callsign") if contact is not None else None,
                chat.attrib.get("senderCallsign") if chat is not None else None,
            ):
                if cs and cs != default_callsign(source):
                    self.by_key[cs] = source
                    self.callsigns[source] = cs

    def lookup(self, key: str) -> int | None:
        with self._lock:
            return self.by_key.get(key)

    def is_local(self, address: int) -> bool:
        with self._lock:
            return address in self.local_nodes


def _resolve_key(key: str | None, registry: DestinationRegistry) -> int | None:
    if not key:
        return None
    if key.lower() in ("broadcast", "all", "*") or key == ALL_CHAT:
        return BROADCAST
    parsed = parse_bt_uid(key)
    if parsed is not None:
        return parsed[0]
    return registry.lookup(key)


def destination_resolve(e: CotEvent, registry: DestinationRegistry) -> int:
    """Radio address for ``e``; the broadcast address when nothing resolves.

    Candidates, in order: each ``marti/dest`` uid then callsign, the
    ``__chat`` room id, and for receipts the ``link`` uid of the acknowledged
    message. A BT-style uid names its radio directly; other keys go through
    the registry.
    """
    keys: list[str | None] = []
    for d in destinations(e):
        keys += [d.get("uid"), d.get("callsign")]
    chat = e.detail.find("__chat")
    if chat is not None:
        keys.append(chat.attrib.get("id"))
    if e.event_type in ("b-t-f-d", "b-t-f-r"):
        link = e.detail.find("link")
        if link is not None:
            keys.append(link.attrib.get("uid"))
    for key in keys:
        addr = _resolve_key(key, registry)
        if addr is not None:
            return addr
    return BROADCAST


# -- outcomes -----------------------------------------------------------------


@dataclass(frozen=True)
class Forwarded:
    event: CotEvent
    receipt: SubmissionReceipt | None = None


@dataclass(frozen=True)
class Pending:
    received: int = 0
    total: int = 0


@dataclass(frozen=True)
class AckSent:
    frames: int = 1


@dataclass(frozen=True)
class AckHandled:
    completed: bool = False
    retransmitted: int = 0


@dataclass(frozen=True)
class Dropped:
    reason: str


@dataclass(frozen=True)
class Transmitted:
    frame_count: int
    dest: int = BROADCAST
    message_type: SaMessageType | None = None
    message_uid: int = 0


@dataclass(frozen=True)
class Rejected:
    reason: str


RadioOutcome = Forwarded | Pending | AckSent | AckHandled | Dropped
TakOutcome = Transmitted | Rejected


class Metrics:
    """Outcome counters and latency samples, safe to update from any thread."""

    def __init__(self) -> None:
        self.counters: Counter = Counter()
        self.samples: dict[str, list[float]] = defaultdict(list)
        self._lock = threading.Lock()

    def count(self, *names: str) -> None:
        with self._lock:
            for n in names:
                self.counters[n] += 1

    def observe(self, name: str, value: float) -> None:
        with self._lock:
            self.samples[name].append(value)

    def snapshot(self) -> dict:
        with self._lock:
            return {"counters": dict(self.counters), "samples": {k: list(v) for k, v in self.samples.items()}}


_SMALL_NEVER = CompressionPolicy(frozenset())
_FLAGGED = CompressionPolicy()


class Gateway:
    """Bidirectional translation core.

    ``submit(event, sender)`` delivers rebuilt CoT to TAK (normally
    :meth:`SessionPool.submit`); ``radio_tx(frame)`` puts a frame on the
    radio port. ``clock`` is monotonic and drives reliability timers;
    ``wall_clock`` stamps regenerated CoT.
    """

    def __init__(
        self,
        config: GatewayConfig,
        submit: Callable[[int, CotEvent], SubmissionReceipt | None],
        radio_tx: Callable[[SaFrame], None],
        *,
        clock: Callable[[], float] = time.monotonic,
        wall_clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
        templates: TemplateRegistry | None = None,
    ):
        self.config = config
        self.address = config.gateway_address
        self.submit = submit
        self.radio_tx = radio_tx
        self.clock = clock
        self.wall_clock = wall_clock
        if templates is None:
            templates = TemplateRegistry.load(config.template_dir) if config.template_dir else default_registry()
        self.templates = templates
        self.agent = TransferAgent(
            self.address, frame_airtime=config.frame_airtime, retry_limit=config.retry_limit
        )
        self.registry = DestinationRegistry()
        self.metrics = Metrics()
        self.forwarded: list[CotEvent] = []
        self.keep_forwarded = False
        self._radio_lock = threading.Lock()
        self._tak_lock = threading.Lock()

    # -- radio to IP ---------------------------------------------------------

    def _send_frames(self, frames: list[SaFrame]) -> None:
        for f in frames:
            self.radio_tx(f)
        if frames:
            self.metrics.count(*(["radio.tx_frames"] * len(frames)))

    def _drop(self, reason: str) -> Dropped:
        self.metrics.count("radio.Dropped", f"radio.Dropped.{reason}")
        return Dropped(reason)

    def ingest_radio_bytes(self, data: bytes, now: float | None = None) -> RadioOutcome:
        try:
            frame = decode_frame(data)
        except FrameError as exc:
            return self._drop(type(exc).__name__)
        return self.ingest_radio_frame(frame, now)

    def ingest_radio_frame(self, frame: SaFrame, now: float | None = None) -> RadioOutcome:
        now = self.clock() if now is None else now
        with self._radio_lock:
            try:
                outcome = self._ingest_radio(frame, now)
            except (ReliabilityError, TranslationError, CotError, FrameError, GatewayError) as exc:
                outcome = self._drop(type(exc).__name__)
        if not isinstance(outcome, Dropped):
            self.metrics.count(f"radio.{type(outcome).__name__}")
        return outcome

    def _ingest_radio(self, frame: SaFrame, now: float) -> RadioOutcome:
        h = frame.header
        if h.destination_uid != self.address and not h.broadcast:
            return self._drop("NotAddressed")
        r = self.agent.receive(frame, now)
        self._send_frames(r.replies)
        if r.outcome is Outcome.IGNORED:
            return self._drop("MalformedAck" if h.message_type is SaMessageType.ACK else "NotAddressed")
        if r.outcome is Outcome.CONTROL:
            if h.message_type is SaMessageType.NET_SCAN_PING:
                self._send_frames(
                    [make_frame(SaMessageType.NET_SCAN_REPLY, self.address, h.source_uid, h.message_uid)]
                )
            return self._drop("NotForwardable")
        if r.outcome is Outcome.ACK_HANDLED:
            done = r.finished is not None and r.finished.complete
            return AckHandled(done, len(r.replies))
        if r.outcome is Outcome.ACK_UNMATCHED:
            if r.ack.bitmap:
                return self._drop("UnmatchedAck")
            return self._forward(SaMessageType.ACK, frame.payload, h.source_uid, h.message_uid, h.destination_uid, False)
        if r.outcome in (Outcome.DUPLICATE, Outcome.PENDING):
            if r.replies:
                return AckSent(len(r.replies))
            if r.outcome is Outcome.DUPLICATE:
                return self._drop("Duplicate")
            fs = self.agent.store.get((h.source_uid, h.message_uid))
            return Pending(fs.count if fs else 0, fs.total if fs else 0)
        m = r.message
        return self._forward(m.message_type, m.payload, m.source, m.message_uid, m.dest, m.compressed)

    def _forward(
        self, t: SaMessageType, payload: bytes, source: int, message_uid: int, dest: int, compressed: bool
    ) -> RadioOutcome:
        policy = _FLAGGED if compressed else _SMALL_NEVER
        e = rebuild_cot(
            t,
            payload,
            source,
            self.templates,
            message_uid=message_uid,
            dest=dest,
            now=self.wall_clock(),
            callsign=self.registry.callsigns.get(source),
            policy=policy,
        )
        self.registry.learn(e, source)
        receipt = self.submit(source, e)
        self.metrics.count(f"radio.type.{t.name}")
        if self.keep_forwarded:
            self.forwarded.append(e)
        return Forwarded(e, receipt)

    # -- IP to radio ---------------------------------------------------------

    def _reject(self, reason: str) -> Rejected:
        self.metrics.count("tak.Rejected", f"tak.Rejected.{reason}")
        return Rejected(reason)

    def destination_resolve(self, e: CotEvent) -> int:
        return destination_resolve(e, self.registry)

    def ingest_tak_event(self, xml: bytes | str | CotEvent, now: float | None = None) -> TakOutcome:
        now = self.clock() if now is None else now
        try:
            e = xml if isinstance(xml, CotEvent) else parse_cot(xml)
            e = json_to_cot(cot_to_json(e))
        except CotError as exc:
            return self._reject(type(exc).__name__)
        origin = parse_bt_uid(e.uid)
        if origin is not None and self.registry.is_local(origin[0]):
            return self._reject("Loop")
        try:
            t = classify_event(e)
            dest = self.destination_resolve(e)
            unicast = not is_broadcast(dest) and (
                t in self.config.unicast_types or t.size_class is SizeClass.MEDIUM
            )
            if not unicast:
                dest = BROADCAST
            policy = self.config.compression_policy
            payload = extract_sa_payload(e, t, policy)
        except (TranslationError, CotError) as exc:
            return self._reject(type(exc).__name__)
        with self._tak_lock:
            try:
                frames = self.agent.send(t, dest, payload, now, compressed=policy.applies(t))
            except ReliabilityError as exc:
                return self._reject(type(exc).__name__)
            self._send_frames(frames)
        self.metrics.count("tak.Transmitted", f"tak.type.{t.name}")
        return Transmitted(len(frames), dest, t, frames[0].header.message_uid)

    # -- timers ----------------------------------------------------------------

    def poll(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        frames = self.agent.poll(now)
        self._send_frames(frames)
        return len(frames)

    def next_deadline(self) -> float | None:
        return self.agent.next_deadline()


def encode_stream(frames: list[SaFrame]) -> bytes:
    """Length-prefixed frame stream: 2-byte big-endian length, then the frame."""
    out = bytearray()
    for f in frames:
        data = encode_frame(f)
        out += len(data).to_bytes(2, "big") + data
    return bytes(out)


def decode_stream(data: bytes) -> list[bytes]:
    out = []
    i = 0
    while i < len(data):
        if i + 2 > len(data):
            raise FrameError("truncated length prefix")
        n = int.from_bytes(data[i : i + 2], "big")
        if i + 2 + n > len(data):
            raise FrameError("truncated frame in stream")
        out.append(data[i + 2 : i + 2 + n])
        i += 2 + n
    return out
