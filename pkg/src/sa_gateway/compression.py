"""Deflate wrapper for medium and bulk payloads.

Stream format: one mode byte (0 = stored, 1 = raw RFC 1951 deflate) followed
by the body. Compression never grows data by more than the mode byte.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

from .frame_codec import SaMessageType

STORED = 0
DEFLATE = 1
LEVEL = 9
MAX_OUTPUT = 25 * 1024  # bulk ceiling


class CompressionError(ValueError):
    pass


class CorruptStream(CompressionError):
    pass


class BombGuardExceeded(CompressionError):
    pass


@dataclass(frozen=True)
class CompressionPolicy:
    apply_to: frozenset[SaMessageType] = field(
        default_factory=lambda: frozenset(
            {
                SaMessageType.MARKER,
                SaMessageType.ROUTE,
                SaMessageType.SHAPE,
                SaMessageType.CASEVAC,
                SaMessageType.BULK_DATA,
            }
        )
    )
    min_gain_bytes: int = 0

    def __post_init__(self) -> None:
        small = {t for t in self.apply_to if t.size_class.name == "SMALL"}
        if small:
            raise ValueError(f"small-class types are never compressed: {sorted(small)}")

    def applies(self, message_type: SaMessageType) -> bool:
        return message_type in self.apply_to


DEFAULT_POLICY = CompressionPolicy()


def _deflate(data: bytes) -> bytes:
    c = zlib.compressobj(LEVEL, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def compress(data: bytes, min_gain: int = 0) -> bytes:
    if not data:
        raise ValueError("compress() needs at least one byte")
    body = _deflate(bytes(data))
    if len(body) >= len(data) - min_gain:
        return bytes([STORED]) + bytes(data)
    return bytes([DEFLATE]) + body


def decompress(data: bytes, max_out: int = MAX_OUTPUT) -> bytes:
    if not data:
        raise CorruptStream("empty stream")
    mode, body = data[0], bytes(data[1:])
    if mode == STORED:
        if len(body) > max_out:
            raise BombGuardExceeded(f"stored body of {len(body)} bytes exceeds {max_out}")
        return body
    if mode != DEFLATE:
        raise CorruptStream(f"unknown mode byte {mode}")
    d = zlib.decompressobj(-15)
    try:
        out = d.decompress(body, max_out + 1)
    except zlib.error as exc:
        raise CorruptStream(str(exc)) from None
    if len(out) > max_out:
        raise BombGuardExceeded(f"inflated size exceeds {max_out} bytes")
    if not d.eof:
        raise CorruptStream("deflate stream truncated")
    if d.unused_data:
        raise CorruptStream("trailing bytes after deflate stream")
    return out
