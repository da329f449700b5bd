"""Fragmentation, reassembly and selective-acknowledgment retransmission.

Everything here is sans-IO: callers pass the current monotonic time in and
get frames to transmit back. The same :class:`TransferAgent` drives a radio
node in the simulator and the radio side of the live gateway.

Ack cadence on the receiving side: an ack goes out when the final fragment
index arrives, when the set completes, after every ``ack_every`` new
fragments, and when no fragment has arrived for two frame intervals. The
sender ignores acks that arrive while its own burst is still on the air
(it only merges their bitmaps), so intermediate acks never trigger early
retransmission.

``retry_limit`` counts retransmission rounds. Each round, whether triggered
by an ack or by the retransmission timer, consumes one; an incomplete ack or
timeout with no rounds left abandons the transfer.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from .frame_codec import (
    MAX_FRAG_PAYLOAD,
    MAX_PAYLOAD,
    AckPayload,
    FrameError,
    SaFrame,
    SaMessageType,
    SizeClass,
    bits_to_bitmap,
    decode_ack,
    encode_ack,
    is_broadcast,
    make_frame,
)

MAX_MESSAGE = 25 * 1024
RETRY_LIMIT = 5
RTO_SLACK = 2.0
IDLE_TIMEOUT = 120.0
MAX_SETS = 256
ACK_EVERY = 16


class ReliabilityError(Exception):
    pass


class PayloadTooLarge(ReliabilityError, ValueError):
    pass


class TotalMismatch(ReliabilityError):
    pass


class StoreFull(ReliabilityError):
    pass


class RetriesExhausted(ReliabilityError):
    def __init__(self, transfer: OutboundTransfer):
        super().__init__(
            f"message {transfer.message_uid} to {transfer.dest:#x}: "
            f"{transfer.missing_count()} of {transfer.total} fragments never acknowledged"
        )
        self.transfer = transfer


def frame_count(payload_len: int) -> int:
    if payload_len <= MAX_PAYLOAD:
        return 1
    return math.ceil(payload_len / MAX_FRAG_PAYLOAD)


def default_ack_requested(message_type: SaMessageType, dest: int) -> bool:
    if is_broadcast(dest):
        return False
    return SaMessageType(message_type).size_class is not SizeClass.SMALL


def fragment(
    message_uid: int,
    message_type: SaMessageType,
    source: int,
    dest: int,
    payload: bytes,
    compressed: bool = False,
    ack_requested: bool | None = None,
) -> list[SaFrame]:
    """Split ``payload`` into the frame series that carries it.

    Up to 230 bytes travel in one unfragmented frame; anything longer is cut
    into 226-byte fragments. ``ack_requested`` defaults to true for unicast
    medium and bulk messages.
    """
    if len(payload) > MAX_MESSAGE:
        raise PayloadTooLarge(f"{len(payload)} bytes exceeds the {MAX_MESSAGE}-byte ceiling")
    if ack_requested is None:
        ack_requested = default_ack_requested(message_type, dest)
    common = dict(compressed=compressed, ack_requested=ack_requested)
    if len(payload) <= MAX_PAYLOAD:
        return [make_frame(message_type, source, dest, message_uid, payload, **common)]
    total = frame_count(len(payload))
    return [
        make_frame(
            message_type,
            source,
            dest,
            message_uid,
            payload[i * MAX_FRAG_PAYLOAD : (i + 1) * MAX_FRAG_PAYLOAD],
            frag_index=i,
            frag_total=total,
            **common,
        )
        for i in range(total)
    ]


# -- inbound ------------------------------------------------------------------


class FeedStatus(Enum):
    INCOMPLETE = "incomplete"
    COMPLETE = "complete"
    DUPLICATE = "duplicate"


Key = tuple[int, int]


@dataclass
class FragmentSet:
    key: Key
    total: int
    first_seen: float
    last_seen: float
    first: SaFrame
    received: int = 0
    buffers: dict[int, bytes] = field(default_factory=dict)
    gap_deadline: float | None = None
    acked_count: int = 0

    @property
    def count(self) -> int:
        return bin(self.received).count("1")

    @property
    def complete(self) -> bool:
        return self.count == self.total

    def payload(self) -> bytes:
        return b"".join(self.buffers[i] for i in range(self.total))


@dataclass(frozen=True)
class FeedResult:
    status: FeedStatus
    key: Key
    frame: SaFrame
    payload: bytes | None = None
    fragments: FragmentSet | None = None


class FragmentStore:
    """Reassembly buffers keyed by (source, message uid).

    Idle sets expire after ``idle_timeout``; past ``max_sets`` the least
    recently touched set is evicted (``on_full="evict"``) or the new set is
    refused with :class:`StoreFull` (``on_full="reject"``). Completed keys are
    remembered for ``idle_timeout`` so late duplicates are recognised.
    """

    def __init__(
        self,
        idle_timeout: float = IDLE_TIMEOUT,
        max_sets: int = MAX_SETS,
        on_full: str = "evict",
    ):
        if on_full not in ("evict", "reject"):
            raise ValueError("on_full must be 'evict' or 'reject'")
        self.idle_timeout = idle_timeout
        self.max_sets = max_sets
        self.on_full = on_full
        self.evicted = 0
        self._sets: OrderedDict[Key, FragmentSet] = OrderedDict()
        self._completed: OrderedDict[Key, tuple[int, float]] = OrderedDict()
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._sets)

    def get(self, key: Key) -> FragmentSet | None:
        return self._sets.get(key)

    def completed_total(self, key: Key) -> int | None:
        entry = self._completed.get(key)
        return entry[0] if entry else None

    def sets(self) -> list[FragmentSet]:
        with self._lock:
            return list(self._sets.values())

    def feed(self, frame: SaFrame, now: float) -> FeedResult:
        h = frame.header
        key = (h.source_uid, h.message_uid)
        with self._lock:
            if key in self._completed:
                total, _ = self._completed[key]
                if h.fragmented and h.frag_total != total:
                    raise TotalMismatch(f"{key}: fragment total {h.frag_total}, set had {total}")
                return FeedResult(FeedStatus.DUPLICATE, key, frame)
            if not h.fragmented:
                self._mark_completed(key, 1, now)
                return FeedResult(FeedStatus.COMPLETE, key, frame, frame.payload)
            fs = self._sets.get(key)
            if fs is None:
                self._make_room()
                fs = FragmentSet(key, h.frag_total, now, now, frame)
                self._sets[key] = fs
            elif fs.total != h.frag_total:
                raise TotalMismatch(f"{key}: fragment total {h.frag_total}, set has {fs.total}")
            self._sets.move_to_end(key)
            fs.last_seen = now
            bit = 1 << h.frag_index
            if fs.received & bit:
                return FeedResult(FeedStatus.DUPLICATE, key, frame, fragments=fs)
            fs.received |= bit
            fs.buffers[h.frag_index] = frame.payload
            if not fs.complete:
                return FeedResult(FeedStatus.INCOMPLETE, key, frame, fragments=fs)
            del self._sets[key]
            self._mark_completed(key, fs.total, now)
            return FeedResult(FeedStatus.COMPLETE, key, frame, fs.payload(), fs)

    def _make_room(self) -> None:
        while len(self._sets) >= self.max_sets:
            if self.on_full == "reject":
                raise StoreFull(f"{self.max_sets} reassembly sets already open")
            self._sets.popitem(last=False)
            self.evicted += 1

    def _mark_completed(self, key: Key, total: int, now: float) -> None:
        self._completed[key] = (total, now)
        self._completed.move_to_end(key)
        while len(self._completed) > 4 * self.max_sets:
            self._completed.popitem(last=False)

    def expire(self, now: float) -> list[Key]:
        with self._lock:
            stale = [k for k, fs in self._sets.items() if now - fs.last_seen >= self.idle_timeout]
            for k in stale:
                del self._sets[k]
            self.evicted += len(stale)
            done = [k for k, (_, t) in self._completed.items() if now - t >= self.idle_timeout]
            for k in done:
                del self._completed[k]
            return stale


def feed_fragment(store: FragmentStore, frame: SaFrame, now: float = 0.0) -> FeedResult:
    return store.feed(frame, now)


def make_selective_ack(fs: FragmentSet, own_address: int) -> SaFrame:
    """Ack frame for ``fs``, unicast back to its source, bitmap = received set."""
    source, message_uid = fs.key
    payload = encode_ack(AckPayload(message_uid, bits_to_bitmap(fs.received, fs.total)))
    return make_frame(SaMessageType.ACK, own_address, source, message_uid, payload)


def make_complete_ack(source: int, own_address: int, message_uid: int, total: int) -> SaFrame:
    bitmap = b"" if total == 1 else bits_to_bitmap((1 << total) - 1, total)
    payload = encode_ack(AckPayload(message_uid, bitmap))
    return make_frame(SaMessageType.ACK, own_address, source, message_uid, payload)


# -- outbound -----------------------------------------------------------------


@dataclass
class OutboundTransfer:
    message_uid: int
    dest: int
    frames: list[SaFrame]
    retries_remaining: int = RETRY_LIMIT
    acked: int = 0
    deadline: float = math.inf
    round_tx_end: float = 0.0
    started: float = 0.0

    @property
    def total(self) -> int:
        return len(self.frames)

    @property
    def complete(self) -> bool:
        return self.acked == (1 << self.total) - 1

    def missing(self) -> list[int]:
        return [i for i in range(self.total) if not self.acked >> i & 1]

    def missing_count(self) -> int:
        return self.total - bin(self.acked).count("1")

    def merge(self, ack: AckPayload) -> bool:
        """Fold ``ack`` into the acknowledged set; True if it added anything."""
        if ack.acked_message_uid != self.message_uid:
            raise ValueError(f"ack for {ack.acked_message_uid}, transfer is {self.message_uid}")
        if self.total == 1 and not ack.bitmap:
            bits = 1
        else:
            bits = ack.received(self.total)
        before = self.acked
        self.acked |= bits
        return self.acked != before


@dataclass(frozen=True)
class Done:
    transfer: OutboundTransfer


@dataclass(frozen=True)
class Retransmit:
    frames: list[SaFrame]


def _retransmit_round(transfer: OutboundTransfer) -> Retransmit:
    if transfer.retries_remaining <= 0:
        raise RetriesExhausted(transfer)
    transfer.retries_remaining -= 1
    return Retransmit([transfer.frames[i] for i in transfer.missing()])


def handle_ack(transfer: OutboundTransfer, ack: AckPayload) -> Done | Retransmit:
    """Merge ``ack``; resend exactly the fragments it reports missing."""
    transfer.merge(ack)
    if transfer.complete:
        return Done(transfer)
    return _retransmit_round(transfer)


def handle_timeout(transfer: OutboundTransfer) -> Retransmit:
    return _retransmit_round(transfer)


def retransmit_timeout(outstanding: int, frame_airtime: float, slack: float = RTO_SLACK) -> float:
    return outstanding * frame_airtime + slack


# -- endpoint -----------------------------------------------------------------


class Outcome(Enum):
    DELIVERED = "delivered"
    PENDING = "pending"
    DUPLICATE = "duplicate"
    ACK_HANDLED = "ack_handled"
    ACK_UNMATCHED = "ack_unmatched"
    CONTROL = "control"
    IGNORED = "ignored"


@dataclass(frozen=True)
class Message:
    message_type: SaMessageType
    source: int
    dest: int
    message_uid: int
    payload: bytes
    compressed: bool


@dataclass
class Received:
    outcome: Outcome
    frame: SaFrame
    message: Message | None = None
    replies: list[SaFrame] = field(default_factory=list)
    ack: AckPayload | None = None
    finished: OutboundTransfer | None = None


@dataclass
class AgentStats:
    sent_frames: int = 0
    retransmitted_frames: int = 0
    acks_sent: int = 0
    completed_out: int = 0
    abandoned: int = 0
    delivered_in: int = 0


class TransferAgent:
    """One radio endpoint's share of the reliability protocol.

    ``send`` returns the frames to put on the air; ``receive`` consumes a
    decoded frame and returns any delivered message plus frames to transmit
    in response; ``poll`` fires expired timers. All methods take ``now`` from
    a monotonic clock supplied by the caller and are safe to call from
    several threads.
    """

    def __init__(
        self,
        address: int,
        *,
        frame_airtime: float,
        retry_limit: int = RETRY_LIMIT,
        slack: float = RTO_SLACK,
        ack_every: int = ACK_EVERY,
        store: FragmentStore | None = None,
        first_uid: int = 1,
    ):
        self.address = address
        self.frame_airtime = frame_airtime
        self.retry_limit = retry_limit
        self.slack = slack
        self.ack_every = ack_every
        self.store = store or FragmentStore()
        self.outbound: dict[int, OutboundTransfer] = {}
        self.finished: list[OutboundTransfer] = []
        self.abandoned: list[OutboundTransfer] = []
        self.stats = AgentStats()
        self._next_uid = first_uid & 0xFFFF_FFFF
        self._reack: dict[Key, tuple[float, int]] = {}
        self._lock = threading.RLock()

    def next_uid(self) -> int:
        with self._lock:
            uid = self._next_uid
            self._next_uid = (self._next_uid + 1) & 0xFFFF_FFFF
            while self._next_uid in self.outbound:
                self._next_uid = (self._next_uid + 1) & 0xFFFF_FFFF
            return uid

    def send(
        self,
        message_type: SaMessageType,
        dest: int,
        payload: bytes,
        now: float,
        *,
        compressed: bool = False,
        ack_requested: bool | None = None,
        message_uid: int | None = None,
    ) -> list[SaFrame]:
        with self._lock:
            uid = self.next_uid() if message_uid is None else message_uid
            frames = fragment(uid, message_type, self.address, dest, payload, compressed, ack_requested)
            if frames[0].header.ack_requested and not is_broadcast(dest):
                t = OutboundTransfer(uid, dest, frames, retries_remaining=self.retry_limit, started=now)
                self._start_round(t, len(frames), now)
                self.outbound[uid] = t
            self.stats.sent_frames += len(frames)
            return frames

    def _start_round(self, t: OutboundTransfer, n: int, now: float) -> None:
        t.round_tx_end = now + n * self.frame_airtime
        t.deadline = now + retransmit_timeout(n, self.frame_airtime, self.slack)

    def receive(self, frame: SaFrame, now: float) -> Received:
        h = frame.header
        if not (is_broadcast(h.destination_uid) or h.destination_uid == self.address):
            return Received(Outcome.IGNORED, frame)
        if h.message_type is SaMessageType.ACK:
            return self._receive_ack(frame, now)
        if h.message_type in (SaMessageType.NET_SCAN_PING, SaMessageType.NET_SCAN_REPLY):
            return Received(Outcome.CONTROL, frame)
        with self._lock:
            return self._receive_data(frame, now)

    def _receive_ack(self, frame: SaFrame, now: float) -> Received:
        try:
            ack = decode_ack(frame.payload)
        except FrameError:
            return Received(Outcome.IGNORED, frame)
        with self._lock:
            t = self.outbound.get(ack.acked_message_uid)
            if t is None or t.dest != frame.header.source_uid:
                return Received(Outcome.ACK_UNMATCHED, frame, ack=ack)
            try:
                if now < t.round_tx_end:
                    t.merge(ack)
                    if not t.complete:
                        return Received(Outcome.ACK_HANDLED, frame, ack=ack)
                result = Done(t) if t.complete else handle_ack(t, ack)
            except ValueError:
                return Received(Outcome.IGNORED, frame, ack=ack)
            except RetriesExhausted:
                self._abandon(t)
                return Received(Outcome.ACK_HANDLED, frame, ack=ack, finished=t)
            if isinstance(result, Done):
                del self.outbound[t.message_uid]
                self.finished.append(t)
                self.stats.completed_out += 1
                return Received(Outcome.ACK_HANDLED, frame, ack=ack, finished=t)
            self._start_round(t, len(result.frames), now)
            self.stats.retransmitted_frames += len(result.frames)
            return Received(Outcome.ACK_HANDLED, frame, replies=list(result.frames), ack=ack)

    def _abandon(self, t: OutboundTransfer) -> None:
        self.outbound.pop(t.message_uid, None)
        self.abandoned.append(t)
        self.stats.abandoned += 1

    def _ack_for(self, fs: FragmentSet) -> SaFrame:
        self.stats.acks_sent += 1
        fs.acked_count = fs.count
        return make_selective_ack(fs, self.address)

    def _receive_data(self, frame: SaFrame, now: float) -> Received:
        h = frame.header
        wants_ack = h.ack_requested and h.destination_uid == self.address
        result = self.store.feed(frame, now)
        if result.status is FeedStatus.DUPLICATE:
            replies = []
            total = self.store.completed_total(result.key)
            if wants_ack and total is not None:
                # one re-ack after the duplicate burst ends, not one per frame
                self._reack[result.key] = (now + 2 * self.frame_airtime, total)
            elif result.fragments is not None:
                result.fragments.gap_deadline = now + 2 * self.frame_airtime
            return Received(Outcome.DUPLICATE, frame, replies=replies)
        if result.status is FeedStatus.COMPLETE:
            total = result.fragments.total if result.fragments else 1
            msg = Message(h.message_type, h.source_uid, h.destination_uid, h.message_uid,
                          result.payload, h.compressed)
            self.stats.delivered_in += 1
            replies = []
            if wants_ack:
                self.stats.acks_sent += 1
                replies.append(make_complete_ack(h.source_uid, self.address, h.message_uid, total))
            return Received(Outcome.DELIVERED, frame, message=msg, replies=replies)
        fs = result.fragments
        replies = []
        if wants_ack:
            fs.gap_deadline = now + 2 * self.frame_airtime
            final = h.frag_index == fs.total - 1
            if final or fs.count - fs.acked_count >= self.ack_every:
                replies.append(self._ack_for(fs))
        return Received(Outcome.PENDING, frame, replies=replies)

    def poll(self, now: float) -> list[SaFrame]:
        """Fire due timers; returns frames to transmit (retransmissions and gap acks)."""
        out: list[SaFrame] = []
        with self._lock:
            for t in list(self.outbound.values()):
                if now < t.deadline:
                    continue
                try:
                    result = handle_timeout(t)
                except RetriesExhausted:
                    self._abandon(t)
                    continue
                self._start_round(t, len(result.frames), now)
                self.stats.retransmitted_frames += len(result.frames)
                out.extend(result.frames)
            for fs in self.store.sets():
                if fs.gap_deadline is not None and now >= fs.gap_deadline:
                    fs.gap_deadline = None
                    out.append(self._ack_for(fs))
            for key, (due, total) in list(self._reack.items()):
                if now >= due:
                    del self._reack[key]
                    self.stats.acks_sent += 1
                    out.append(make_complete_ack(key[0], self.address, key[1], total))
            self.store.expire(now)
        return out

    def next_deadline(self) -> float | None:
        with self._lock:
            times = [t.deadline for t in self.outbound.values()]
            times += [fs.gap_deadline for fs in self.store.sets() if fs.gap_deadline is not None]
            times += [due for due, _ in self._reack.values()]
            return min(times) if times else None
