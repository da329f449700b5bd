"""Fixed-layout binary codec for Beartooth SA frames.

Wire layout (big-endian)::

    | Offset | Size | Field                                   |
    |--------|------|-----------------------------------------|
    | 0      | 1    | magic (0xB7)                            |
    | 1      | 1    | version (0x01)                          |
    | 2      | 1    | message type                            |
    | 3      | 1    | flags                                   |
    | 4      | 8    | source address                          |
    | 12     | 8    | destination address                     |
    | 20     | 4    | message uid                             |
    | 24     | 2    | fragment index      (fragmented only)   |
    | 26     | 2    | fragment total      (fragmented only)   |
    | 24/28  | 2    | payload length                          |
    | 26/30  | N    | payload                                 |

Flags: bit0 fragmented, bit1 compressed, bit2 ack requested, bit3 broadcast.
Bits 4-7 are reserved and must be zero.

A frame never exceeds 256 bytes: 230 payload bytes unfragmented, 226 when
the fragment fields are present.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum, IntFlag

MAGIC = 0xB7
VERSION = 0x01
BROADCAST = 0xFFFF_FFFF_FFFF_FFFF

MAX_FRAME_SIZE = 256
HEADER_SIZE = 26
FRAG_HEADER_SIZE = 30
MAX_PAYLOAD = MAX_FRAME_SIZE - HEADER_SIZE  # 230
MAX_FRAG_PAYLOAD = MAX_FRAME_SIZE - FRAG_HEADER_SIZE  # 226

_U64 = 0xFFFF_FFFF_FFFF_FFFF
_U32 = 0xFFFF_FFFF
_U16 = 0xFFFF

_PREFIX = struct.Struct(">BBBBQQI")  # 24 bytes, common to both layouts
_FRAG = struct.Struct(">HH")
_LEN = struct.Struct(">H")
_LOCATION = struct.Struct(">dddQ")
_ACK_HEAD = struct.Struct(">IH")


class FrameError(ValueError):
    """Base class for every codec failure."""


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class InconsistentFragFields(FrameError):
    pass


class OversizePayload(FrameError):
    pass


class InvalidHeader(FrameError):
    pass


class OutOfRangeCoordinate(FrameError):
    pass


class WrongLength(FrameError):
    pass


class SizeClass(IntEnum):
    SMALL = 1
    MEDIUM = 2
    BULK = 3


class SaMessageType(IntEnum):
    TEXT = 1
    LOCATION = 2
    ACK = 3
    MARKER = 4
    ROUTE = 5
    SHAPE = 6
    CASEVAC = 7
    BULK_DATA = 8
    NET_SCAN_PING = 9
    NET_SCAN_REPLY = 10

    @property
    def size_class(self) -> SizeClass:
        if self in _MEDIUM_TYPES:
            return SizeClass.MEDIUM
        if self is SaMessageType.BULK_DATA:
            return SizeClass.BULK
        return SizeClass.SMALL


_MEDIUM_TYPES = frozenset(
    {SaMessageType.MARKER, SaMessageType.ROUTE, SaMessageType.SHAPE, SaMessageType.CASEVAC}
)


class FrameFlags(IntFlag):
    NONE = 0
    FRAGMENTED = 0x01
    COMPRESSED = 0x02
    ACK_REQUESTED = 0x04
    BROADCAST = 0x08


_RESERVED_FLAG_BITS = 0xF0


def is_broadcast(address: int) -> bool:
    return address == BROADCAST


def format_address(address: int) -> str:
    return f"{address:016X}"


def parse_address(text: str) -> int:
    """Parse a hex node address; ``broadcast`` and ``*`` map to the broadcast address."""
    text = text.strip()
    if text.lower() in ("broadcast", "*", "all"):
        return BROADCAST
    if text.lower().startswith("0x"):
        text = text[2:]
    value = int(text, 16)
    if not 0 <= value <= _U64:
        raise ValueError(f"address out of 64-bit range: {text}")
    return value


@dataclass(frozen=True)
class SaFrameHeader:
    message_type: SaMessageType
    flags: FrameFlags
    source_uid: int
    destination_uid: int
    message_uid: int
    frag_index: int | None = None
    frag_total: int | None = None
    version: int = VERSION

    @property
    def fragmented(self) -> bool:
        return bool(self.flags & FrameFlags.FRAGMENTED)

    @property
    def compressed(self) -> bool:
        return bool(self.flags & FrameFlags.COMPRESSED)

    @property
    def ack_requested(self) -> bool:
        return bool(self.flags & FrameFlags.ACK_REQUESTED)

    @property
    def broadcast(self) -> bool:
        return bool(self.flags & FrameFlags.BROADCAST)

    @property
    def size(self) -> int:
        return FRAG_HEADER_SIZE if self.fragmented else HEADER_SIZE


@dataclass(frozen=True)
class SaFrame:
    header: SaFrameHeader
    payload: bytes = b""

    @property
    def encoded_size(self) -> int:
        return self.header.size + len(self.payload)

    def __repr__(self) -> str:
        h = self.header
        frag = f" frag={h.frag_index}/{h.frag_total}" if h.fragmented else ""
        return (
            f"SaFrame({h.message_type.name} src={h.source_uid:#x} "
            f"dst={h.destination_uid:#x} uid={h.message_uid}{frag} "
            f"flags={int(h.flags):#04x} len={len(self.payload)})"
        )


def make_frame(
    message_type: SaMessageType,
    source: int,
    dest: int,
    message_uid: int,
    payload: bytes = b"",
    *,
    compressed: bool = False,
    ack_requested: bool = False,
    frag_index: int | None = None,
    frag_total: int | None = None,
) -> SaFrame:
    """Build a frame with the flag bits derived from the arguments."""
    flags = FrameFlags.NONE
    if frag_total is not None:
        flags |= FrameFlags.FRAGMENTED
    if compressed:
        flags |= FrameFlags.COMPRESSED
    if ack_requested:
        flags |= FrameFlags.ACK_REQUESTED
    if is_broadcast(dest):
        flags |= FrameFlags.BROADCAST
    header = SaFrameHeader(
        message_type=SaMessageType(message_type),
        flags=flags,
        source_uid=source,
        destination_uid=dest,
        message_uid=message_uid,
        frag_index=frag_index,
        frag_total=frag_total,
    )
    return SaFrame(header, bytes(payload))


def validate_frame(frame: SaFrame) -> None:
    h = frame.header
    if h.version != VERSION:
        raise InvalidHeader(f"version must be {VERSION:#04x}")
    try:
        SaMessageType(h.message_type)
    except ValueError:
        raise InvalidHeader(f"unknown message type {h.message_type!r}") from None
    if int(h.flags) & _RESERVED_FLAG_BITS:
        raise InvalidHeader(f"reserved flag bits set: {int(h.flags):#04x}")
    for name, value, top in (
        ("source_uid", h.source_uid, _U64),
        ("destination_uid", h.destination_uid, _U64),
        ("message_uid", h.message_uid, _U32),
    ):
        if not 0 <= value <= top:
            raise InvalidHeader(f"{name} out of range: {value}")
    if h.broadcast != is_broadcast(h.destination_uid):
        raise InvalidHeader("broadcast flag disagrees with destination address")
    if h.fragmented:
        if h.frag_index is None or h.frag_total is None:
            raise InvalidHeader("fragmented flag set without fragment fields")
        if not (2 <= h.frag_total <= _U16 and 0 <= h.frag_index < h.frag_total):
            raise InvalidHeader(f"bad fragment fields {h.frag_index}/{h.frag_total}")
        limit = MAX_FRAG_PAYLOAD
    else:
        if h.frag_index is not None or h.frag_total is not None:
            raise InvalidHeader("fragment fields present without fragmented flag")
        limit = MAX_PAYLOAD
    if len(frame.payload) > limit:
        raise OversizePayload(f"payload of {len(frame.payload)} bytes exceeds {limit}")


def encode_frame(frame: SaFrame) -> bytes:
    validate_frame(frame)
    h = frame.header
    parts = [
        _PREFIX.pack(
            MAGIC,
            h.version,
            int(h.message_type),
            int(h.flags),
            h.source_uid,
            h.destination_uid,
            h.message_uid,
        )
    ]
    if h.fragmented:
        parts.append(_FRAG.pack(h.frag_index, h.frag_total))
    parts.append(_LEN.pack(len(frame.payload)))
    parts.append(frame.payload)
    return b"".join(parts)


def decode_frame(data: bytes) -> SaFrame:
    """Decode one frame, raising a :class:`FrameError` subclass on any defect.

    Only canonical encodings are accepted, so decoding is the exact inverse of
    :func:`encode_frame`.
    """
    data = bytes(data)
    if len(data) < 1 or data[0] != MAGIC:
        raise BadMagic("frame does not start with 0xB7")
    if len(data) < 2 or data[1] != VERSION:
        raise UnsupportedVersion(
            "missing version byte" if len(data) < 2 else f"version {data[1]:#04x}"
        )
    if len(data) < HEADER_SIZE:
        raise TruncatedFrame(f"{len(data)} bytes is shorter than any header")
    _, version, type_code, flag_bits, src, dst, msg_uid = _PREFIX.unpack_from(data, 0)
    try:
        message_type = SaMessageType(type_code)
    except ValueError:
        raise UnknownMessageType(f"message type code {type_code}") from None
    if flag_bits & _RESERVED_FLAG_BITS:
        raise InvalidHeader(f"reserved flag bits set: {flag_bits:#04x}")
    flags = FrameFlags(flag_bits)
    if bool(flags & FrameFlags.BROADCAST) != is_broadcast(dst):
        raise InvalidHeader("broadcast flag disagrees with destination address")

    offset = _PREFIX.size
    frag_index = frag_total = None
    limit = MAX_PAYLOAD
    if flags & FrameFlags.FRAGMENTED:
        if len(data) < FRAG_HEADER_SIZE:
            raise TruncatedFrame(f"{len(data)} bytes is shorter than a fragment header")
        frag_index, frag_total = _FRAG.unpack_from(data, offset)
        if frag_total < 2 or frag_index >= frag_total:
            raise InconsistentFragFields(f"fragment {frag_index}/{frag_total}")
        offset += _FRAG.size
        limit = MAX_FRAG_PAYLOAD
    (payload_len,) = _LEN.unpack_from(data, offset)
    offset += _LEN.size
    if payload_len > limit:
        raise OversizePayload(f"payload length {payload_len} exceeds {limit}")
    if len(data) - offset != payload_len:
        raise TruncatedFrame(
            f"payload length field {payload_len} but {len(data) - offset} bytes follow"
        )
    header = SaFrameHeader(
        message_type=message_type,
        flags=flags,
        source_uid=src,
        destination_uid=dst,
        message_uid=msg_uid,
        frag_index=frag_index,
        frag_total=frag_total,
        version=version,
    )
    return SaFrame(header, data[offset:])


@dataclass(frozen=True)
class LocationPayload:
    latitude: float
    longitude: float
    altitude_hae: float
    timestamp_ms: int

    SIZE = _LOCATION.size


def _check_coordinates(lat: float, lon: float, hae: float) -> None:
    # written as negated comparisons so NaN is rejected too
    if not abs(lat) <= 90.0:
        raise OutOfRangeCoordinate(f"latitude {lat}")
    if not abs(lon) <= 180.0:
        raise OutOfRangeCoordinate(f"longitude {lon}")
    if not math.isfinite(hae):
        raise OutOfRangeCoordinate(f"altitude {hae}")


def encode_location(p: LocationPayload) -> bytes:
    _check_coordinates(p.latitude, p.longitude, p.altitude_hae)
    if not 0 <= p.timestamp_ms <= _U64:
        raise OutOfRangeCoordinate(f"timestamp {p.timestamp_ms}")
    return _LOCATION.pack(p.latitude, p.longitude, p.altitude_hae, p.timestamp_ms)


def decode_location(data: bytes) -> LocationPayload:
    if len(data) != _LOCATION.size:
        raise WrongLength(f"location payload must be 32 bytes, got {len(data)}")
    lat, lon, hae, ts = _LOCATION.unpack(data)
    _check_coordinates(lat, lon, hae)
    return LocationPayload(lat, lon, hae, ts)


def bitmap_len(frag_total: int) -> int:
    return (frag_total + 7) // 8


def bits_to_bitmap(received: int, total: int) -> bytes:
    """Pack a received-index bitset (bit i of the int) MSB-first: index 0 is 0x80 of byte 0."""
    out = bytearray(bitmap_len(total))
    for i in range(total):
        if received >> i & 1:
            out[i >> 3] |= 0x80 >> (i & 7)
    return bytes(out)


def bitmap_to_bits(bitmap: bytes, total: int | None = None) -> int:
    n = len(bitmap) * 8 if total is None else min(total, len(bitmap) * 8)
    bits = 0
    for i in range(n):
        if bitmap[i >> 3] & (0x80 >> (i & 7)):
            bits |= 1 << i
    return bits


@dataclass(frozen=True)
class AckPayload:
    acked_message_uid: int
    bitmap: bytes = field(default=b"")

    def received(self, total: int) -> int:
        return bitmap_to_bits(self.bitmap, total)


def encode_ack(ack: AckPayload) -> bytes:
    if not 0 <= ack.acked_message_uid <= _U32:
        raise InvalidHeader(f"acked message uid out of range: {ack.acked_message_uid}")
    if len(ack.bitmap) > _U16:
        raise OversizePayload("ack bitmap too long")
    return _ACK_HEAD.pack(ack.acked_message_uid, len(ack.bitmap)) + ack.bitmap


def decode_ack(data: bytes) -> AckPayload:
    if len(data) < _ACK_HEAD.size:
        raise WrongLength(f"ack payload needs at least 6 bytes, got {len(data)}")
    uid, n = _ACK_HEAD.unpack_from(data)
    if len(data) != _ACK_HEAD.size + n:
        raise WrongLength(f"ack bitmap length {n} but {len(data) - _ACK_HEAD.size} bytes follow")
    return AckPayload(uid, bytes(data[_ACK_HEAD.size :]))
