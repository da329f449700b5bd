"""Deterministic discrete-event simulation of a DigiMesh-style mesh.

Each node owns a FIFO transmit queue served at one frame per
``per_frame_airtime``; a frame crossing a link arrives ``per_hop_delay``
after its transmission ends unless that link's loss coin drops it. Unicast
frames follow the minimum-hop route and are relayed hop by hop. Broadcast
frames flood: every node hands a new (source, message uid, fragment index)
to its handler once, and relays it only if it has a neighbour farther from
the source than itself.

Events are ordered by (time, insertion sequence) and all randomness comes
from one seeded generator, so a (topology, scenario, seed) triple always
yields the same event log.
"""

from __future__ import annotations

import csv
import heapq
import io
import queue
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .frame_codec import (
    SaFrame,
    SaMessageType,
    format_address,
    is_broadcast,
    make_frame,
    parse_address,
)

LOG_FIELDS = ("time", "event", "src", "dst", "messageUid", "fragIndex", "detail")


class SimError(ValueError):
    pass


class UnknownNode(SimError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown node"


class TopologyError(SimError):
    pass


class ScenarioError(SimError):
    pass


@dataclass(frozen=True)
class SimLink:
    a: int
    b: int
    rssi_dbm: float = -60.0
    loss_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise TopologyError(f"self-link on {self.a:#x}")
        if self.rssi_dbm > 0:
            raise TopologyError(f"rssi must be <= 0 dBm, got {self.rssi_dbm}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise TopologyError(f"loss probability {self.loss_prob} outside [0, 1]")

    def other(self, address: int) -> int:
        return self.b if address == self.a else self.a


@dataclass
class SimNode:
    address: int
    position: tuple[float, float] = (0.0, 0.0)
    tx_queue: deque = field(default_factory=deque)
    busy: bool = False
    max_depth: int = 0


@dataclass(frozen=True)
class ChannelModel:
    per_frame_airtime: float
    per_hop_delay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.per_frame_airtime > 0:
            raise SimError("per_frame_airtime must be positive")
        if self.per_hop_delay < 0:
            raise SimError("per_hop_delay must be non-negative")


class Topology:
    def __init__(self) -> None:
        self.nodes: dict[int, SimNode] = {}
        self._adj: dict[int, dict[int, SimLink]] = {}
        self._dist_cache: dict[int, dict[int, int]] = {}

    def add_node(self, address: int, x: float = 0.0, y: float = 0.0) -> SimNode:
        if address in self.nodes:
            raise TopologyError(f"duplicate node {format_address(address)}")
        if is_broadcast(address):
            raise TopologyError("the broadcast address cannot be a node")
        node = SimNode(address, (float(x), float(y)))
        self.nodes[address] = node
        self._adj[address] = {}
        self._dist_cache.clear()
        return node

    def add_link(self, a: int, b: int, rssi_dbm: float = -60.0, loss_prob: float = 0.0) -> SimLink:
        for n in (a, b):
            if n not in self.nodes:
                raise UnknownNode(f"link endpoint {format_address(n)} is not a node")
        if b in self._adj[a]:
            raise TopologyError(f"duplicate link {format_address(a)}-{format_address(b)}")
        link = SimLink(a, b, float(rssi_dbm), float(loss_prob))
        self._adj[a][b] = link
        self._adj[b][a] = link
        self._dist_cache.clear()
        return link

    def __contains__(self, address: object) -> bool:
        return address in self.nodes

    def _check(self, address: int) -> None:
        if address not in self.nodes:
            raise UnknownNode(f"no node {format_address(address)}")

    def neighbors(self, address: int) -> list[int]:
        self._check(address)
        return sorted(self._adj[address])

    def link(self, a: int, b: int) -> SimLink | None:
        return self._adj.get(a, {}).get(b)

    def links(self) -> list[SimLink]:
        seen = {}
        for a, peers in self._adj.items():
            for b, link in peers.items():
                seen[(min(a, b), max(a, b))] = link
        return [seen[k] for k in sorted(seen)]

    def distances(self, source: int) -> dict[int, int]:
        """Hop count from ``source`` to every reachable node (BFS)."""
        self._check(source)
        cached = self._dist_cache.get(source)
        if cached is not None:
            return cached
        dist = {source: 0}
        frontier = deque([source])
        while frontier:
            n = frontier.popleft()
            for m in self._adj[n]:
                if m not in dist:
                    dist[m] = dist[n] + 1
                    frontier.append(m)
        self._dist_cache[source] = dist
        return dist

    def next_hop(self, src: int, dst: int) -> int | None:
        to_dst = self.distances(dst)
        if src not in to_dst:
            return None
        want = to_dst[src] - 1
        for n in sorted(self._adj[src]):
            if to_dst.get(n) == want:
                return n
        return None

    def route(self, src: int, dst: int) -> list[int]:
        """Minimum-hop path, ties broken by the smallest next-hop address."""
        self._check(src)
        self._check(dst)
        if src == dst:
            raise SimError("route needs distinct endpoints")
        path = [src]
        while path[-1] != dst:
            nxt = self.next_hop(path[-1], dst)
            if nxt is None:
                return []
            path.append(nxt)
        return path

    def bottleneck_rssi(self, path: list[int]) -> float:
        return min(self._adj[a][b].rssi_dbm for a, b in zip(path, path[1:]))

    # -- constructors / file format --------------------------------------

    @classmethod
    def line(cls, addresses: Iterable[int], rssi_dbm: float = -60.0, loss_prob: float = 0.0) -> Topology:
        topo = cls()
        addrs = list(addresses)
        for i, a in enumerate(addrs):
            topo.add_node(a, 100.0 * i, 0.0)
        for a, b in zip(addrs, addrs[1:]):
            topo.add_link(a, b, rssi_dbm, loss_prob)
        return topo

    @classmethod
    def full_mesh(cls, addresses: Iterable[int], rssi_dbm: float = -60.0, loss_prob: float = 0.0) -> Topology:
        topo = cls()
        addrs = list(addresses)
        for i, a in enumerate(addrs):
            topo.add_node(a, float(i), 0.0)
        for i, a in enumerate(addrs):
            for b in addrs[i + 1 :]:
                topo.add_link(a, b, rssi_dbm, loss_prob)
        return topo

    @classmethod
    def parse(cls, text: str) -> Topology:
        """Read ``node <hex> <x> <y>`` and ``link <a> <b> <rssi> <loss>`` lines.

        Blank lines and ``#`` comments are ignored.
        """
        topo = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "node" and len(parts) == 4:
                    topo.add_node(parse_address(parts[1]), float(parts[2]), float(parts[3]))
                elif parts[0] == "link" and len(parts) == 5:
                    topo.add_link(
                        parse_address(parts[1]), parse_address(parts[2]), float(parts[3]), float(parts[4])
                    )
                else:
                    raise TopologyError(f"unrecognised directive {line!r}")
            except (ValueError, KeyError) as exc:
                raise TopologyError(f"line {lineno}: {exc}") from None
        return topo

    @classmethod
    def load(cls, path: str | Path) -> Topology:
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = [f"node {format_address(n.address)} {n.position[0]:g} {n.position[1]:g}" for n in self.nodes.values()]
        lines += [
            f"link {format_address(l.a)} {format_address(l.b)} {l.rssi_dbm:g} {l.loss_prob:g}" for l in self.links()
        ]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LogRecord:
    time: float
    event: str
    src: int
    dst: int
    message_uid: int
    frag_index: int | None
    detail: str = ""

    def row(self) -> list[str]:
        return [
            f"{self.time:.6f}",
            self.event,
            format_address(self.src),
            format_address(self.dst),
            str(self.message_uid),
            "" if self.frag_index is None else str(self.frag_index),
            self.detail,
        ]


@dataclass(frozen=True)
class DeliveryEvent:
    time: float
    node: int
    frame: SaFrame
    hops: int


Handler = Callable[[SaFrame, "Simulator", int], None]


class Simulator:
    """Event loop over a :class:`Topology` under a :class:`ChannelModel`.

    ``attach(address, handler)`` registers ``handler(frame, sim, address)``,
    called when a frame addressed to (or broadcast past) that node arrives.
    ``post`` is the thread-safe entry port for code running outside the loop.
    """

    def __init__(self, topology: Topology, model: ChannelModel, *, log: bool = True):
        self.topology = topology
        self.model = model
        self.rng = random.Random(model.seed)
        self.now = 0.0
        self.log_enabled = log
        self.log: list[LogRecord] = []
        self.deliveries: list[DeliveryEvent] = []
        self.record_deliveries = log
        self.handlers: dict[int, Handler] = {}
        self.lost = 0
        self.unroutable = 0
        self.transmissions = 0
        self._heap: list = []
        self._seq = 0
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._seen: dict[int, dict[tuple, float]] = {}
        self._relays: dict[int, frozenset[int]] = {}
        for n in topology.nodes.values():
            n.tx_queue.clear()
            n.busy = False
            n.max_depth = 0

    # -- scheduling -------------------------------------------------------

    def schedule(self, t: float, callback: Callable, *args) -> int:
        if t < self.now:
            t = self.now
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, callback, args))
        return self._seq

    def schedule_in(self, delay: float, callback: Callable, *args) -> int:
        return self.schedule(self.now + delay, callback, *args)

    def post(self, callback: Callable, *args) -> None:
        self._inbox.put((callback, args))

    def attach(self, address: int, handler: Handler) -> None:
        self.topology._check(address)
        self.handlers[address] = handler

    def pending(self) -> int:
        return len(self._heap)

    def _drain_inbox(self) -> None:
        while True:
            try:
                callback, args = self._inbox.get_nowait()
            except queue.Empty:
                return
            self.schedule(self.now, callback, *args)

    def run_until(self, t: float) -> list[LogRecord]:
        """Process every event with timestamp <= ``t``; returns the new log records."""
        start = len(self.log)
        self._drain_inbox()
        while self._heap and self._heap[0][0] <= t:
            when, _, callback, args = heapq.heappop(self._heap)
            self.now = when
            callback(*args)
            self._drain_inbox()
        self.now = max(self.now, t)
        return self.log[start:]

    def run(self, limit: float = float("inf")) -> list[LogRecord]:
        start = len(self.log)
        self._drain_inbox()
        while self._heap and self._heap[0][0] <= limit:
            when, _, callback, args = heapq.heappop(self._heap)
            self.now = when
            callback(*args)
            self._drain_inbox()
        return self.log[start:]

    def _log(self, event: str, src: int, dst: int, frame: SaFrame, detail: str = "") -> None:
        if self.log_enabled:
            h = frame.header
            self.log.append(LogRecord(self.now, event, src, dst, h.message_uid, h.frag_index, detail))

    # -- transmission -----------------------------------------------------

    def transmit(self, src: int, frame: SaFrame) -> None:
        """Queue ``frame`` for transmission at ``src`` (unicast or broadcast by its header)."""
        if is_broadcast(frame.header.destination_uid):
            self.send_broadcast(frame, src)
        else:
            self.send_unicast(frame, src)

    def send_unicast(self, frame: SaFrame, at: int | None = None) -> None:
        at = frame.header.source_uid if at is None else at
        dst = frame.header.destination_uid
        if dst not in self.topology:
            self.unroutable += 1
            self._log("drop", at, dst, frame, "unknown destination")
            return
        nxt = self.topology.next_hop(at, dst)
        if nxt is None:
            self.unroutable += 1
            self._log("drop", at, dst, frame, "unreachable")
            return
        self._enqueue(at, frame, nxt)

    def send_broadcast(self, frame: SaFrame, at: int | None = None) -> None:
        at = frame.header.source_uid if at is None else at
        self.topology._check(at)
        self._mark_seen(at, frame)
        self._enqueue(at, frame, None)

    def _enqueue(self, at: int, frame: SaFrame, next_hop: int | None) -> None:
        node = self.topology.nodes[at]
        node.tx_queue.append((frame, next_hop))
        depth = len(node.tx_queue) + node.busy
        if depth > node.max_depth:
            node.max_depth = depth
        if not node.busy:
            self._start_tx(node)

    def _start_tx(self, node: SimNode) -> None:
        frame, next_hop = node.tx_queue.popleft()
        node.busy = True
        self.transmissions += 1
        dst = frame.header.destination_uid if next_hop is None else next_hop
        self._log("tx", node.address, dst, frame)
        self.schedule_in(self.model.per_frame_airtime, self._tx_done, node, frame, next_hop)

    def _tx_done(self, node: SimNode, frame: SaFrame, next_hop: int | None) -> None:
        node.busy = False
        if node.tx_queue:
            self._start_tx(node)
        if next_hop is not None:
            link = self.topology.link(node.address, next_hop)
            if link.loss_prob > 0 and self.rng.random() < link.loss_prob:
                self.lost += 1
                self._log("loss", node.address, next_hop, frame)
                return
            self._after_hop(self._arrive_unicast, next_hop, frame)
            return
        receivers = []
        for peer, link in sorted(self.topology._adj[node.address].items()):
            if link.loss_prob > 0 and self.rng.random() < link.loss_prob:
                self.lost += 1
                self._log("loss", node.address, peer, frame)
            else:
                receivers.append(peer)
        if receivers:
            self._after_hop(self._arrive_broadcast, receivers, frame)

    def _after_hop(self, callback: Callable, *args) -> None:
        if self.model.per_hop_delay:
            self.schedule_in(self.model.per_hop_delay, callback, *args)
        else:
            callback(*args)

    def _arrive_unicast(self, at: int, frame: SaFrame) -> None:
        dst = frame.header.destination_uid
        if at == dst:
            self._deliver(at, frame)
            return
        self._log("relay", at, dst, frame)
        self.send_unicast(frame, at)

    def _relay_set(self, source: int) -> frozenset[int]:
        relays = self._relays.get(source)
        if relays is None:
            dist = self.topology.distances(source)
            adj = self.topology._adj
            relays = frozenset(
                n for n, d in dist.items() if n != source and any(dist.get(m, -1) > d for m in adj[n])
            )
            self._relays[source] = relays
        return relays

    def _mark_seen(self, at: int, frame: SaFrame) -> bool:
        h = frame.header
        key = (h.source_uid, h.message_uid, h.frag_index)
        seen = self._seen.setdefault(at, {})
        if key in seen:
            return False
        seen[key] = self.now
        if len(seen) > 4096:
            horizon = self.now - 300.0
            for k in [k for k, t in seen.items() if t < horizon]:
                del seen[k]
        return True

    def _arrive_broadcast(self, receivers: list[int], frame: SaFrame) -> None:
        source = frame.header.source_uid
        relays = self._relay_set(source) if source in self.topology else frozenset()
        for at in receivers:
            relay = at in relays
            if not relay and not self.record_deliveries and at not in self.handlers:
                continue
            if not self._mark_seen(at, frame):
                self._log("dup", at, frame.header.destination_uid, frame)
                continue
            self._deliver(at, frame)
            if relay:
                self._enqueue(at, frame, None)

    def _deliver(self, at: int, frame: SaFrame) -> None:
        self._log("rx", frame.header.source_uid, at, frame)
        if self.record_deliveries:
            hops = self.topology.distances(at).get(frame.header.source_uid, 0)
            self.deliveries.append(DeliveryEvent(self.now, at, frame, hops))
        handler = self.handlers.get(at)
        if handler is not None:
            handler(frame, self, at)

    # -- reporting --------------------------------------------------------

    def max_queue_depth(self) -> int:
        return max((n.max_depth for n in self.topology.nodes.values()), default=0)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for rec in self.log:
            w.writerow(rec.row())
        return buf.getvalue()

    def write_log(self, path: str | Path) -> None:
        Path(path).write_text(self.log_csv())


# -- scenario files -------------------------------------------------------


@dataclass(frozen=True)
class ScenarioStep:
    at: float
    message_type: SaMessageType
    src: int
    dst: int
    payload: bytes


def parse_scenario(text: str, base_dir: str | Path = ".") -> list[ScenarioStep]:
    """Read ``at <t> send <type> <src> <dst> <payload-file|inline>`` lines.

    ``<type>`` is a message-type name or code. The payload is taken from the
    named file (relative to ``base_dir``) when one exists, otherwise the rest
    of the line is used verbatim as UTF-8 text.
    """
    steps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 6)
        if len(parts) < 6 or parts[0] != "at" or parts[2] != "send":
            raise ScenarioError(f"line {lineno}: expected 'at <t> send <type> <src> <dst> <payload>'")
        try:
            t = float(parts[1])
            name = parts[3]
            mtype = SaMessageType(int(name)) if name.isdigit() else SaMessageType[name.upper()]
            src, dst = parse_address(parts[4]), parse_address(parts[5])
        except (ValueError, KeyError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        spec = parts[6] if len(parts) > 6 else ""
        path = Path(base_dir) / spec
        payload = path.read_bytes() if spec and path.is_file() else spec.encode("utf-8")
        steps.append(ScenarioStep(t, mtype, src, dst, payload))
    return sorted(steps, key=lambda s: s.at)


def load_scenario(path: str | Path) -> list[ScenarioStep]:
    p = Path(path)
    return parse_scenario(p.read_text(), p.parent)


# -- network scan ---------------------------------------------------------


def rssi_weight(rssi_dbm: float) -> float:
    return min(1.0, max(0.0, (rssi_dbm + 110.0) / 40.0))


@dataclass(frozen=True)
class ScanEntry:
    address: int
    rssi_dbm: float
    hop_count: int
    rtt_seconds: float


@dataclass(frozen=True)
class ScanReport:
    origin: int
    entries: list[ScanEntry]
    health_score: float

    def table(self) -> str:
        rows = [f"{'address':<18} {'rssi_dbm':>8} {'hops':>4} {'rtt_s':>8}"]
        for e in self.entries:
            rows.append(
                f"{format_address(e.address):<18} {e.rssi_dbm:>8.1f} {e.hop_count:>4d} {e.rtt_seconds:>8.3f}"
            )
        rows.append(f"health {self.health_score:.3f}")
        return "\n".join(rows)


def network_scan(topology: Topology, origin: int, model: ChannelModel, message_uid: int = 1) -> ScanReport:
    """Broadcast a ping from ``origin`` and collect unicast replies.

    Each reply's RSSI is the weakest link on the reply path. The health score
    is the mean over all other nodes of ``clamp((rssi + 110) / 40, 0, 1)``
    for nodes that replied and 0 for the rest.
    """
    topology._check(origin)
    sim = Simulator(topology, model)
    replies: dict[int, float] = {}

    def responder(frame: SaFrame, s: Simulator, at: int) -> None:
        if frame.header.message_type is SaMessageType.NET_SCAN_PING:
            reply = make_frame(SaMessageType.NET_SCAN_REPLY, at, origin, frame.header.message_uid)
            s.send_unicast(reply, at)

    def collector(frame: SaFrame, s: Simulator, at: int) -> None:
        h = frame.header
        if h.message_type is SaMessageType.NET_SCAN_REPLY and h.message_uid == message_uid:
            replies.setdefault(h.source_uid, s.now)

    for address in topology.nodes:
        sim.attach(address, collector if address == origin else responder)
    ping = make_frame(SaMessageType.NET_SCAN_PING, origin, parse_address("broadcast"), message_uid)
    sim.send_broadcast(ping, origin)
    sim.run()

    dist = topology.distances(origin)
    entries = []
    for address in sorted(replies):
        path = topology.route(origin, address)
        entries.append(ScanEntry(address, topology.bottleneck_rssi(path), dist[address], replies[address]))
    others = len(topology.nodes) - 1
    health = sum(rssi_weight(e.rssi_dbm) for e in entries) / others if others else 1.0
    return ScanReport(origin, entries, health)
