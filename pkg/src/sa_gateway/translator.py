"""Translation between CoT events and compact SA payloads.

Outbound (IP to radio) an event is classified by a fixed rule table and the
minimal payload for its type is extracted. Inbound (radio to IP) a payload is
decoded and poured into the pre-configured template for its type.

Classification rules, first match wins:

==  ==========================================================  ==============
#   Condition                                                   Result
==  ==========================================================  ==============
1   type ``b-t-f-d`` or ``b-t-f-r`` (delivery/read receipt)     ACK
2   type ``t-x-c-t`` / ``t-x-c-t-r`` (ping / pong)              NET_SCAN_*
3   ``__chat`` detail or type ``b-t-f*``                        TEXT
4   ``fileshare`` detail or type ``b-f-t*``                     BULK_DATA
5   ``_medevac_`` detail or type ``b-r-f-h-c*``                 CASEVAC
6   ``__routeinfo`` detail or type ``b-m-r*``                   ROUTE
7   type ``u-d-*`` (drawing)                                    SHAPE
8   type in LOCATION_TYPES, detail only position-report tags    LOCATION
9   anything else                                               MARKER
==  ==========================================================  ==============

A chat whose callsign or message exceeds 255 UTF-8 bytes cannot use the
length-prefixed text payload and falls through to MARKER. Every medium-class
result must have a canonical XML body no larger than the 25 KB bulk ceiling,
otherwise the event is unroutable.
"""

from __future__ import annotations

import base64
import hashlib
import re
import string
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import Callable
from xml.sax.saxutils import escape

from . import compression
from .compression import DEFAULT_POLICY, CompressionError, CompressionPolicy
from .cot import (
    CotElement,
    CotError,
    CotEvent,
    canonical_xml,
    detail_to_xml,
    format_float,
    format_time,
    from_epoch_ms,
    parse_cot,
    parse_fragment,
    strip_flow_tags,
    to_epoch_ms,
    to_xml,
)
from .frame_codec import (
    BROADCAST,
    AckPayload,
    FrameError,
    LocationPayload,
    SaMessageType,
    SizeClass,
    decode_ack,
    decode_location,
    encode_ack,
    encode_location,
    format_address,
    is_broadcast,
)

BULK_CEILING = compression.MAX_OUTPUT
LOCATION_TYPES = frozenset({"a-f-G-U-C"})
POSITION_DETAIL_TAGS = frozenset(
    {"contact", "__group", "precisionlocation", "status", "takv", "track", "uid", "_flow-tags_"}
)
ALL_CHAT = "All Chat Rooms"

STALE_INTERVAL = {
    SaMessageType.LOCATION: timedelta(seconds=75),
    SaMessageType.TEXT: timedelta(minutes=5),
    SaMessageType.ACK: timedelta(minutes=5),
    SaMessageType.MARKER: timedelta(minutes=5),
    SaMessageType.ROUTE: timedelta(minutes=5),
    SaMessageType.SHAPE: timedelta(minutes=5),
    SaMessageType.CASEVAC: timedelta(minutes=30),
    SaMessageType.BULK_DATA: timedelta(minutes=5),
    SaMessageType.NET_SCAN_PING: timedelta(seconds=20),
    SaMessageType.NET_SCAN_REPLY: timedelta(seconds=20),
}

_BT_UID = re.compile(r"^BT-([0-9A-Fa-f]{16})-(\d+)$")


class TranslationError(ValueError):
    pass


class UnroutableEvent(TranslationError):
    pass


class MissingField(TranslationError):
    pass


class PayloadTooLarge(TranslationError):
    pass


class PayloadDecodeError(TranslationError):
    pass


class NoTemplateForType(TranslationError):
    pass


def bt_uid(source: int, message_uid: int) -> str:
    return f"BT-{format_address(source)}-{message_uid}"


def parse_bt_uid(uid: str) -> tuple[int, int] | None:
    m = _BT_UID.match(uid)
    if m is None:
        return None
    return int(m.group(1), 16), int(m.group(2))


def default_callsign(address: int) -> str:
    return f"BT-{format_address(address)}"


# -- classification -----------------------------------------------------------


def _chat_fields(e: CotEvent) -> tuple[str | None, str | None]:
    chat = e.detail.find("__chat")
    remarks = e.detail.find("remarks")
    callsign = chat.attrib.get("senderCallsign") if chat is not None else None
    message = remarks.text if remarks is not None else None
    return callsign, message


def _fits_text_payload(e: CotEvent) -> bool:
    callsign, message = _chat_fields(e)
    return all(v is None or len(v.encode("utf-8")) <= 255 for v in (callsign, message))


def classify_event(e: CotEvent) -> SaMessageType:
    t = e.event_type
    tags = {c.tag for c in e.detail.children}
    if t in ("b-t-f-d", "b-t-f-r"):
        return SaMessageType.ACK
    if t == "t-x-c-t":
        return SaMessageType.NET_SCAN_PING
    if t == "t-x-c-t-r":
        return SaMessageType.NET_SCAN_REPLY
    if ("__chat" in tags or t.startswith("b-t-f")) and _fits_text_payload(e):
        return SaMessageType.TEXT
    if "fileshare" in tags or t.startswith("b-f-t"):
        return SaMessageType.BULK_DATA
    if "_medevac_" in tags or t.startswith("b-r-f-h-c"):
        result = SaMessageType.CASEVAC
    elif "__routeinfo" in tags or t.startswith("b-m-r"):
        result = SaMessageType.ROUTE
    elif t.startswith("u-d-"):
        result = SaMessageType.SHAPE
    elif t in LOCATION_TYPES and tags <= POSITION_DETAIL_TAGS:
        return SaMessageType.LOCATION
    else:
        result = SaMessageType.MARKER
    size = len(canonical_xml(e))
    if size > BULK_CEILING:
        raise UnroutableEvent(
            f"{t!r} event needs {size} bytes of XML, above the {BULK_CEILING}-byte ceiling"
        )
    return result


# -- payload layouts ------------------------------------------------------


def _pack_str(value: str, what: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 255:
        raise PayloadTooLarge(f"{what} is {len(raw)} bytes; at most 255 fit")
    return bytes([len(raw)]) + raw


def _unpack_str(data: bytes, offset: int) -> tuple[str, int]:
    if offset >= len(data):
        raise PayloadDecodeError("length prefix missing")
    n = data[offset]
    end = offset + 1 + n
    if end > len(data):
        raise PayloadDecodeError("length prefix runs past payload end")
    try:
        return data[offset + 1 : end].decode("utf-8"), end
    except UnicodeDecodeError:
        raise PayloadDecodeError("string is not UTF-8") from None


@dataclass(frozen=True)
class TextPayload:
    callsign: str
    message: str


def encode_text(p: TextPayload) -> bytes:
    return _pack_str(p.callsign, "callsign") + _pack_str(p.message, "message")


def decode_text(data: bytes) -> TextPayload:
    callsign, off = _unpack_str(data, 0)
    message, off = _unpack_str(data, off)
    if off != len(data):
        raise PayloadDecodeError("trailing bytes after text payload")
    return TextPayload(callsign, message)


@dataclass(frozen=True)
class BulkEnvelope:
    filename: str
    callsign: str
    archive: bytes


def encode_bulk(b: BulkEnvelope) -> bytes:
    return _pack_str(b.filename, "filename") + _pack_str(b.callsign, "callsign") + b.archive


def decode_bulk(data: bytes) -> BulkEnvelope:
    filename, off = _unpack_str(data, 0)
    callsign, off = _unpack_str(data, off)
    return BulkEnvelope(filename, callsign, bytes(data[off:]))


# -- extraction -------------------------------------------------------------


def _wrap(raw: bytes, t: SaMessageType, policy: CompressionPolicy) -> bytes:
    if policy.applies(t):
        return compression.compress(raw, policy.min_gain_bytes)
    return raw


def _unwrap(payload: bytes, t: SaMessageType, policy: CompressionPolicy) -> bytes:
    if not policy.applies(t):
        return payload
    try:
        return compression.decompress(payload, BULK_CEILING)
    except CompressionError as exc:
        raise PayloadDecodeError(f"{type(exc).__name__}: {exc}") from None


def extract_sa_payload(
    e: CotEvent, t: SaMessageType, policy: CompressionPolicy = DEFAULT_POLICY
) -> bytes:
    """Reduce ``e`` to the wire payload for type ``t``.

    Types under ``policy`` come back as a mode-flagged compression stream.
    """
    t = SaMessageType(t)
    if t is SaMessageType.LOCATION:
        p = e.point
        ms = to_epoch_ms(e.start)
        if ms < 0:
            raise MissingField("location start time precedes the epoch")
        return encode_location(LocationPayload(p.lat, p.lon, p.hae, ms))
    if t is SaMessageType.TEXT:
        callsign, message = _chat_fields(e)
        if callsign is None:
            raise MissingField("chat event without senderCallsign")
        if message is None:
            raise MissingField("chat event without message text")
        return encode_text(TextPayload(callsign, message))
    if t is SaMessageType.ACK:
        link = e.detail.find("link")
        parsed = parse_bt_uid(link.attrib.get("uid", "")) if link is not None else None
        if parsed is None:
            raise MissingField("receipt does not reference a radio message uid")
        return encode_ack(AckPayload(parsed[1]))
    if t in (SaMessageType.NET_SCAN_PING, SaMessageType.NET_SCAN_REPLY):
        return b""
    if t is SaMessageType.BULK_DATA:
        share = e.detail.find("fileshare")
        if share is None or not share.text:
            raise MissingField("file transfer without inline archive data")
        try:
            archive = base64.b64decode(share.text.strip(), validate=True)
        except ValueError:
            raise MissingField("fileshare data is not valid base64") from None
        env = encode_bulk(
            BulkEnvelope(
                share.attrib.get("filename", "package.zip"),
                share.attrib.get("senderCallsign", ""),
                archive,
            )
        )
        if len(env) > BULK_CEILING:
            raise PayloadTooLarge(f"bulk payload of {len(env)} bytes exceeds {BULK_CEILING}")
        return _wrap(env, t, policy)
    raw = canonical_xml(e)
    if len(raw) > BULK_CEILING:
        raise UnroutableEvent(f"canonical XML of {len(raw)} bytes exceeds {BULK_CEILING}")
    return _wrap(raw, t, policy)


# -- templates and rebuild ------------------------------------------------


# characters XML 1.0 cannot carry, even escaped
_XML_ILLEGAL = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ufffe\uffff\ud800-\udfff]")


def _legal(value: str) -> str:
    return _XML_ILLEGAL.sub("\ufffd", value)


def _attr(value: str) -> str:
    return escape(_legal(value), {'"': "&quot;", "\n": "&#10;", "\r": "&#13;", "\t": "&#9;"})


def _text(value: str) -> str:
    return escape(_legal(value), {"\r": "&#13;"})


def _slots_location(payload: bytes, ctx: dict) -> dict[str, str]:
    try:
        p = decode_location(payload)
    except FrameError as exc:
        raise PayloadDecodeError(str(exc)) from None
    try:
        start = from_epoch_ms(p.timestamp_ms)
    except CotError as exc:
        raise PayloadDecodeError(str(exc)) from None
    return {
        "lat": format_float(p.latitude),
        "lon": format_float(p.longitude),
        "hae": format_float(p.altitude_hae),
        "callsign": _attr(ctx["callsign"]),
        "_start": start,
    }


def _slots_text(payload: bytes, ctx: dict) -> dict[str, str]:
    p = decode_text(payload)
    dest = ctx["dest"]
    chatroom = ALL_CHAT if is_broadcast(dest) else default_callsign(dest)
    dest_xml = "" if is_broadcast(dest) else f'<marti><dest callsign="{_attr(chatroom)}"/></marti>'
    return {
        "callsign": _attr(p.callsign),
        "message": _text(p.message),
        "chatroom": _attr(chatroom),
        "sender_uid": _attr(default_callsign(ctx["source"])),
        "dest": dest_xml,
    }


def _slots_ack(payload: bytes, ctx: dict) -> dict[str, str]:
    try:
        ack = decode_ack(payload)
    except FrameError as exc:
        raise PayloadDecodeError(str(exc)) from None
    # a receipt acknowledges a message the destination originally sent
    return {"acked_uid": _attr(bt_uid(ctx["dest"], ack.acked_message_uid))}


def _slots_medium(payload: bytes, ctx: dict) -> dict[str, str]:
    raw = _unwrap(payload, ctx["type"], ctx["policy"])
    try:
        carried = parse_fragment(raw)
    except CotError as exc:
        raise PayloadDecodeError(f"carried XML: {exc}") from None
    detail_xml = detail_to_xml(carried.detail)
    extra = "".join(f' {k}="{_attr(v)}"' for k, v in sorted(carried.extra.items()))
    p = carried.point
    return {
        "type": _attr(carried.event_type),
        "how": _attr(carried.how),
        "extra": extra,
        "lat": format_float(p.lat),
        "lon": format_float(p.lon),
        "hae": format_float(p.hae),
        "ce": format_float(p.ce),
        "le": format_float(p.le),
        "detail": detail_xml,
    }


def _slots_bulk(payload: bytes, ctx: dict) -> dict[str, str]:
    env = decode_bulk(_unwrap(payload, ctx["type"], ctx["policy"]))
    stem = env.filename.rsplit(".", 1)[0] or env.filename
    return {
        "filename": _attr(env.filename),
        "name": _attr(stem),
        "callsign": _attr(env.callsign),
        "sender_uid": _attr(default_callsign(ctx["source"])),
        "sha256": hashlib.sha256(env.archive).hexdigest(),
        "size": str(len(env.archive)),
        "data": base64.b64encode(env.archive).decode("ascii"),
    }


def _slots_empty(payload: bytes, ctx: dict) -> dict[str, str]:
    return {}


SlotExtractor = Callable[[bytes, dict], dict[str, str]]

SLOT_EXTRACTORS: dict[SaMessageType, SlotExtractor] = {
    SaMessageType.LOCATION: _slots_location,
    SaMessageType.TEXT: _slots_text,
    SaMessageType.ACK: _slots_ack,
    SaMessageType.MARKER: _slots_medium,
    SaMessageType.ROUTE: _slots_medium,
    SaMessageType.SHAPE: _slots_medium,
    SaMessageType.CASEVAC: _slots_medium,
    SaMessageType.BULK_DATA: _slots_bulk,
    SaMessageType.NET_SCAN_PING: _slots_empty,
    SaMessageType.NET_SCAN_REPLY: _slots_empty,
}


@dataclass(frozen=True)
class CotTemplate:
    template_id: SaMessageType
    skeleton: string.Template
    slots: tuple[str, ...]
    extractor: SlotExtractor

    def instantiate(self, values: dict[str, str]) -> CotEvent:
        missing = [s for s in self.slots if s not in values]
        if missing:
            raise PayloadDecodeError(f"template slots left unfilled: {missing}")
        text = self.skeleton.substitute(values)
        try:
            return parse_cot(text.encode("utf-8"))
        except CotError as exc:
            raise PayloadDecodeError(f"rebuilt CoT is invalid: {exc}") from None


def _identifiers(t: string.Template) -> tuple[str, ...]:
    names = []
    for m in t.pattern.finditer(t.template):
        name = m.group("named") or m.group("braced")
        if name and name not in names:
            names.append(name)
    return tuple(names)


def template_filename(t: SaMessageType) -> str:
    return f"{t.name.lower()}.xml"


class TemplateRegistry:
    """Read-only map from message type to its CoT template.

    Templates are XML files named after the message type (``location.xml``,
    ``bulk_data.xml`` ...) with ``${slot}`` placeholders.
    """

    def __init__(self, templates: dict[SaMessageType, CotTemplate]):
        self._templates = dict(templates)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> TemplateRegistry:
        templates = {}
        for t in SaMessageType:
            name = template_filename(t)
            if directory is None:
                ref = resources.files("sa_gateway") / "templates" / name
                if not ref.is_file():
                    continue
                text = ref.read_text(encoding="utf-8")
            else:
                path = Path(directory) / name
                if not path.is_file():
                    continue
                text = path.read_text(encoding="utf-8")
            skeleton = string.Template(text)
            slots = _identifiers(skeleton)
            templates[t] = CotTemplate(t, skeleton, slots, SLOT_EXTRACTORS[t])
        return cls(templates)

    def __getitem__(self, t: SaMessageType) -> CotTemplate:
        try:
            return self._templates[t]
        except KeyError:
            raise NoTemplateForType(f"no template for {SaMessageType(t).name}") from None

    def __contains__(self, t: object) -> bool:
        return t in self._templates

    def types(self) -> list[SaMessageType]:
        return sorted(self._templates)


_default_registry: TemplateRegistry | None = None


def default_registry() -> TemplateRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = TemplateRegistry.load()
    return _default_registry


def rebuild_cot(
    t: SaMessageType,
    payload: bytes,
    source: int,
    templates: TemplateRegistry | None = None,
    *,
    message_uid: int = 0,
    dest: int = BROADCAST,
    now: datetime | None = None,
    callsign: str | None = None,
    policy: CompressionPolicy = DEFAULT_POLICY,
) -> CotEvent:
    """Regenerate a full CoT event from a radio payload.

    The uid is ``BT-<source hex>-<message uid>``; ``time`` is ``now``; stale
    is the later of time and start plus the per-type stale interval.
    """
    t = SaMessageType(t)
    if templates is None:
        templates = default_registry()
    template = templates[t]
    now = (now or datetime.now(timezone.utc)).astimezone(timezone.utc)
    ctx = {
        "type": t,
        "source": source,
        "dest": dest,
        "policy": policy,
        "callsign": callsign or default_callsign(source),
    }
    values = template.extractor(payload, ctx)
    start = values.pop("_start", now)
    try:
        stale = max(now, start) + STALE_INTERVAL[t]
    except OverflowError:
        raise PayloadDecodeError("timestamp out of range") from None
    values.update(
        uid=bt_uid(source, message_uid),
        time=format_time(now),
        start=format_time(start),
        stale=format_time(stale),
    )
    return template.instantiate(values)


# -- semantic comparison --------------------------------------------------


def _vertices(e: CotEvent) -> list[str]:
    return [c.attrib["point"] for c in e.detail.findall("link") if "point" in c.attrib]


def operational_view(e: CotEvent) -> dict:
    """The fields that must survive any translation path for the event's class."""
    t = classify_event(e)
    view: dict = {"class": t.name}
    if t is SaMessageType.LOCATION:
        view.update(type=e.event_type, lat=e.point.lat, lon=e.point.lon, hae=e.point.hae)
    elif t is SaMessageType.TEXT:
        callsign, message = _chat_fields(e)
        view.update(type=e.event_type, callsign=callsign, message=message)
    elif t is SaMessageType.BULK_DATA:
        share = e.detail.find("fileshare")
        view.update(
            filename=share.attrib.get("filename") if share is not None else None,
            data=share.text.strip() if share is not None and share.text else None,
        )
    elif t.size_class is SizeClass.MEDIUM:
        view.update(
            type=e.event_type,
            lat=e.point.lat,
            lon=e.point.lon,
            hae=e.point.hae,
            vertices=_vertices(e),
        )
        medevac = e.detail.find("_medevac_")
        if medevac is not None:
            view["casevac"] = dict(medevac.attrib)
        view["canonical"] = canonical_xml(strip_flow_tags(e))
    elif t is SaMessageType.ACK:
        link = e.detail.find("link")
        view.update(type=e.event_type, acked=link.attrib.get("uid") if link is not None else None)
    else:
        view.update(type=e.event_type)
    return view


def event_bytes(e: CotEvent) -> int:
    return len(to_xml(e))

