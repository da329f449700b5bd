"""Cursor-on-Target event model, XML (de)serialization and the JSON mirror."""

from __future__ import annotations

import copy
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Any, Iterator

MAX_DEPTH = 32
UNKNOWN_ERROR = 9999999.0

_EVENT_CORE_ATTRS = ("version", "uid", "type", "how", "time", "start", "stale")
_POINT_ATTRS = ("lat", "lon", "hae", "ce", "le")
_TAG = "#tag"
_TEXT = "#text"
_CHILDREN = "#children"


class CotError(ValueError):
    pass


class MalformedDocument(CotError):
    pass


class InvalidEvent(CotError):
    pass


def parse_time(text: str) -> datetime:
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_time(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    # strftime does not zero-pad years below 1000 on glibc
    base = f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}T{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d}"
    if dt.microsecond % 1000 == 0:
        return f"{base}.{dt.microsecond // 1000:03d}Z"
    return f"{base}.{dt.microsecond:06d}Z"


def to_epoch_ms(dt: datetime) -> int:
    delta = dt.astimezone(timezone.utc) - datetime(1970, 1, 1, tzinfo=timezone.utc)
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000


def from_epoch_ms(ms: int) -> datetime:
    try:
        return datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(milliseconds=ms)
    except (OverflowError, ValueError):
        raise CotError(f"timestamp {ms} ms is outside the representable range") from None


def format_float(value: float) -> str:
    # repr is the shortest string that parses back to the identical double
    return repr(float(value))


@dataclass
class CotElement:
    """One element of the ``detail`` tree."""

    tag: str
    attrib: dict[str, str] = field(default_factory=dict)
    children: list[CotElement] = field(default_factory=list)
    text: str | None = None

    def find(self, tag: str) -> CotElement | None:
        for child in self.children:
            if child.tag == tag:
                return child
        return None

    def findall(self, tag: str) -> list[CotElement]:
        return [c for c in self.children if c.tag == tag]

    def iter(self) -> Iterator[CotElement]:
        yield self
        for child in self.children:
            yield from child.iter()

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass(frozen=True)
class Point:
    lat: float
    lon: float
    hae: float = UNKNOWN_ERROR
    ce: float = UNKNOWN_ERROR
    le: float = UNKNOWN_ERROR


@dataclass
class CotEvent:
    event_type: str
    uid: str
    time: datetime
    start: datetime
    stale: datetime
    point: Point
    detail: CotElement = field(default_factory=lambda: CotElement("detail"))
    how: str = "m-g"
    version: str = "2.0"
    extra: dict[str, str] = field(default_factory=dict)

    def validate(self) -> CotEvent:
        if not self.uid:
            raise InvalidEvent("uid must be non-empty")
        if not self.event_type:
            raise InvalidEvent("type must be non-empty")
        if self.stale < self.start:
            raise InvalidEvent("stale precedes start")
        p = self.point
        if not abs(p.lat) <= 90.0 or not abs(p.lon) <= 180.0:
            raise InvalidEvent(f"point out of range: {p.lat}, {p.lon}")
        if not all(math.isfinite(v) for v in (p.hae, p.ce, p.le)):
            raise InvalidEvent("point has non-finite hae/ce/le")
        if self.detail.tag != "detail":
            raise InvalidEvent("detail root must be <detail>")
        return self

    def copy(self) -> CotEvent:
        return copy.deepcopy(self)


# -- element conversion ---------------------------------------------------


def _to_detail(el: ET.Element, depth: int = 1) -> CotElement:
    if depth > MAX_DEPTH:
        raise MalformedDocument(f"detail nested deeper than {MAX_DEPTH}")
    text = el.text if el.text and el.text.strip() else None
    return CotElement(
        tag=el.tag,
        attrib=dict(el.attrib),
        children=[_to_detail(c, depth + 1) for c in el],
        text=text,
    )


def _from_detail(node: CotElement, sort_attrs: bool) -> ET.Element:
    items = sorted(node.attrib.items()) if sort_attrs else node.attrib.items()
    el = ET.Element(node.tag, dict(items))
    el.text = node.text
    for child in node.children:
        el.append(_from_detail(child, sort_attrs))
    return el


def _float_attr(el: ET.Element, name: str, default: float | None = None) -> float:
    raw = el.get(name)
    if raw is None:
        if default is None:
            raise MalformedDocument(f"<{el.tag}> missing attribute {name!r}")
        return default
    try:
        return float(raw)
    except ValueError:
        raise MalformedDocument(f"<{el.tag}> attribute {name!r} is not a number: {raw!r}") from None


def event_from_element(root: ET.Element) -> CotEvent:
    if root.tag != "event":
        raise MalformedDocument(f"root element is <{root.tag}>, expected <event>")
    point_el = root.find("point")
    if point_el is None:
        raise MalformedDocument("event has no <point>")
    for name in ("uid", "type", "time", "start", "stale"):
        if root.get(name) is None:
            raise MalformedDocument(f"event missing attribute {name!r}")
    try:
        time = parse_time(root.get("time"))
        start = parse_time(root.get("start"))
        stale = parse_time(root.get("stale"))
    except (ValueError, OverflowError) as exc:
        raise MalformedDocument(f"bad timestamp: {exc}") from None
    point = Point(
        lat=_float_attr(point_el, "lat"),
        lon=_float_attr(point_el, "lon"),
        hae=_float_attr(point_el, "hae", UNKNOWN_ERROR),
        ce=_float_attr(point_el, "ce", UNKNOWN_ERROR),
        le=_float_attr(point_el, "le", UNKNOWN_ERROR),
    )
    detail_el = root.find("detail")
    detail = _to_detail(detail_el) if detail_el is not None else CotElement("detail")
    extra = {k: v for k, v in root.attrib.items() if k not in _EVENT_CORE_ATTRS}
    event = CotEvent(
        event_type=root.get("type"),
        uid=root.get("uid"),
        time=time,
        start=start,
        stale=stale,
        point=point,
        detail=detail,
        how=root.get("how", "m-g"),
        version=root.get("version", "2.0"),
        extra=extra,
    )
    try:
        return event.validate()
    except InvalidEvent as exc:
        raise MalformedDocument(str(exc)) from None


def event_to_element(e: CotEvent, *, canonical: bool = False, regenerated: bool = True) -> ET.Element:
    """Build the XML tree for ``e``.

    ``canonical`` sorts attributes so the output is byte-deterministic.
    ``regenerated=False`` leaves out the fields a receiver mints itself
    (version, uid, time, start, stale) and any ``_flow-tags_`` detail.
    """
    attrs: dict[str, str] = {"type": e.event_type, "how": e.how, **e.extra}
    if regenerated:
        attrs.update(
            version=e.version,
            uid=e.uid,
            time=format_time(e.time),
            start=format_time(e.start),
            stale=format_time(e.stale),
        )
    if canonical:
        attrs = dict(sorted(attrs.items()))
    else:
        order = [k for k in _EVENT_CORE_ATTRS if k in attrs]
        attrs = {k: attrs[k] for k in order + [k for k in attrs if k not in order]}
    root = ET.Element("event", attrs)
    p = e.point
    ET.SubElement(root, "point", {name: format_float(getattr(p, name)) for name in _POINT_ATTRS})
    detail = e.detail
    if not regenerated:
        detail = replace(detail, children=[c for c in detail.children if c.tag != "_flow-tags_"])
    root.append(_from_detail(detail, sort_attrs=canonical))
    return root


def to_xml(e: CotEvent, *, canonical: bool = False, regenerated: bool = True) -> bytes:
    root = event_to_element(e, canonical=canonical, regenerated=regenerated)
    return ET.tostring(root, encoding="utf-8", xml_declaration=False, short_empty_elements=True)


def canonical_xml(e: CotEvent) -> bytes:
    """Deterministic XML without receiver-minted fields; the medium-class payload body."""
    return to_xml(e, canonical=True, regenerated=False)


def detail_to_xml(node: CotElement) -> str:
    return ET.tostring(_from_detail(node, sort_attrs=True), encoding="unicode")


def parse_root(data: bytes | str) -> ET.Element:
    if isinstance(data, str):
        data = data.encode("utf-8")
    if b"<!DOCTYPE" in data or b"<!ENTITY" in data:
        raise MalformedDocument("DTDs are not accepted")
    try:
        return ET.fromstring(data)
    except (ET.ParseError, ValueError, LookupError, UnicodeError) as exc:
        raise MalformedDocument(f"not well-formed XML: {exc}") from None


def parse_cot(data: bytes | str) -> CotEvent:
    """Parse one CoT ``<event>`` document; any defect raises :class:`MalformedDocument`."""
    return event_from_element(parse_root(data))


def parse_fragment(data: bytes | str) -> CotEvent:
    """Parse a canonical (regeneration-free) event body; placeholder uid/times are filled."""
    root = parse_root(data)
    epoch = format_time(from_epoch_ms(0))
    for name, value in (("uid", "-"), ("time", epoch), ("start", epoch), ("stale", epoch)):
        root.set(name, value)
    root.set("version", "2.0")
    return event_from_element(root)


# -- JSON mirror ------------------------------------------------------------


def element_to_json(el: ET.Element) -> dict[str, Any]:
    out: dict[str, Any] = {_TAG: el.tag}
    out.update(el.attrib)
    if el.text and el.text.strip():
        out[_TEXT] = el.text
    children = [element_to_json(c) for c in el]
    if children:
        out[_CHILDREN] = children
    return out


def json_to_element(obj: Any, depth: int = 0) -> ET.Element:
    if depth > MAX_DEPTH + 2:
        raise MalformedDocument("document nested too deeply")
    if not isinstance(obj, dict) or not isinstance(obj.get(_TAG), str):
        raise MalformedDocument("every node must be an object with a '#tag' string")
    el = ET.Element(obj[_TAG])
    for key, value in obj.items():
        if key in (_TAG, _CHILDREN):
            continue
        if key == _TEXT:
            if not isinstance(value, str):
                raise MalformedDocument("'#text' must be a string")
            el.text = value
            continue
        if not isinstance(value, str):
            raise MalformedDocument(f"attribute {key!r} must be a string")
        el.set(key, value)
    children = obj.get(_CHILDREN, [])
    if not isinstance(children, list):
        raise MalformedDocument("'#children' must be a list")
    for child in children:
        el.append(json_to_element(child, depth + 1))
    return el


def cot_to_json(e: CotEvent) -> dict[str, Any]:
    """Mirror the event as a JSON-ready tree.

    Elements become objects carrying their name under ``#tag``; attributes are
    plain string fields; text lives under ``#text``; child elements are an
    ordered ``#children`` list. ``#`` cannot start an XML name, so the reserved
    keys never collide with attributes.
    """
    return element_to_json(event_to_element(e))


def json_to_cot(doc: dict[str, Any] | str) -> CotEvent:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"invalid JSON: {exc}") from None
    return event_from_element(json_to_element(doc))


# -- detail helpers -------------------------------------------------------


def destinations(e: CotEvent) -> list[dict[str, str]]:
    """``<marti><dest .../></marti>`` entries, each as its attribute dict."""
    marti = e.detail.find("marti")
    if marti is None:
        return []
    return [dict(d.attrib) for d in marti.findall("dest")]


def strip_flow_tags(e: CotEvent) -> CotEvent:
    out = e.copy()
    out.detail.children = [c for c in out.detail.children if c.tag != "_flow-tags_"]
    return out
