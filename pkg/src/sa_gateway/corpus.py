"""Canonical CoT events modelled on what ATAK emits, two per transported type.

Used by the tests, the benchmark scenarios and the demo scripts. Sizes are
realistic: the simple marker and 3-vertex shape compress into three frames,
the fully attributed casevac and the 8-vertex polygon into four.
"""

from __future__ import annotations

import base64
import hashlib
import random
from datetime import datetime, timedelta, timezone

from .cot import CotElement, CotEvent, Point

T0 = datetime(2024, 5, 1, 12, 0, 0, tzinfo=timezone.utc)


def el(tag: str, attrib: dict | None = None, *children: CotElement, text: str | None = None) -> CotElement:
    return CotElement(tag, dict(attrib or {}), list(children), text)


def _event(
    event_type: str,
    uid: str,
    point: Point,
    children: list[CotElement],
    *,
    how: str = "h-g-i-g-o",
    stale: timedelta = timedelta(minutes=5),
) -> CotEvent:
    return CotEvent(
        event_type=event_type,
        uid=uid,
        time=T0,
        start=T0,
        stale=T0 + stale,
        point=point,
        detail=el("detail", None, *children),
        how=how,
    )


def location(callsign: str, lat: float, lon: float, hae: float) -> CotEvent:
    return _event(
        "a-f-G-U-C",
        f"ANDROID-{callsign.lower()}",
        Point(lat, lon, hae, 4.9, 9999999.0),
        [
            el("contact", {"callsign": callsign, "endpoint": "*:-1:stcp"}),
            el("__group", {"name": "Cyan", "role": "Team Member"}),
            el("precisionlocation", {"altsrc": "GPS", "geopointsrc": "GPS"}),
            el("status", {"battery": "87"}),
            el("takv", {"device": "SAMSUNG SM-G889A", "platform": "ATAK-CIV", "os": "29", "version": "4.8.1"}),
            el("track", {"speed": "0.0", "course": "212.6"}),
        ],
        how="m-g",
        stale=timedelta(seconds=75),
    )


def chat(callsign: str, message: str, dest_callsign: str | None = None) -> CotEvent:
    room = dest_callsign or "All Chat Rooms"
    sender = f"ANDROID-{callsign.lower()}"
    children = [
        el(
            "__chat",
            {
                "parent": "RootContactGroup",
                "groupOwner": "false",
                "chatroom": room,
                "id": room,
                "senderCallsign": callsign,
            },
            el("chatgrp", {"uid0": sender, "uid1": room, "id": room}),
        ),
        el("link", {"uid": sender, "type": "a-f-G-U-C", "relation": "p-p"}),
        el("remarks", {"source": f"BAO.F.ATAK.{sender}", "to": room, "time": "2024-05-01T12:00:00.000Z"}, text=message),
    ]
    if dest_callsign:
        children.append(el("marti", None, el("dest", {"callsign": dest_callsign})))
    return _event("b-t-f", f"GeoChat.{sender}.{room}.4f1c", Point(0.0, 0.0), children)


def _marker_detail(callsign: str, iconset: str, color: str, remarks: str) -> list[CotElement]:
    return [
        el("status", {"readiness": "true"}),
        el("archive"),
        el("link", {"uid": "ANDROID-alpha", "production_time": "2024-05-01T11:59:58.120Z", "type": "a-f-G-U-C", "parent_callsign": "ALPHA", "relation": "p-p"}),
        el("contact", {"callsign": callsign}),
        el("remarks", None, text=remarks),
        el("archive"),
        el("usericon", {"iconsetpath": iconset}),
        el("color", {"argb": color}),
        el("precisionlocation", {"altsrc": "DTED0"}),
        el("creator", {"uid": "ANDROID-alpha", "callsign": "ALPHA", "time": "2024-05-01T11:59:58.120Z", "type": "a-f-G-U-C"}),
        el("height", {"value": "0.0"}),
        el("height_unit", {"value": "4"}),
        el("_flow-tags_", {"TAK-Server-e87a0e02420b44a08f6032bcf1855a8d": "2024-05-01T12:00:00.512Z"}),
    ]


def marker_simple() -> CotEvent:
    return _event(
        "a-h-G",
        "9405e320-9356-41c4-8449-f46990aa17f8",
        Point(45.68311, -111.04952, 1468.3, 9999999.0, 9999999.0),
        _marker_detail(
            "H.1 observation post",
            "COT_MAPPING_2525B/a-h/a-h-G",
            "-65536",
            "Two vehicles parked at the ridge line, one technical with a mounted "
            "weapon. Personnel moving toward the north slope on foot. Observed "
            "from OP2 at 1158, visibility good, no change since last report.",
        ),
    )


def marker_spot() -> CotEvent:
    return _event(
        "b-m-p-s-m",
        "6c0f4e2b-2d4b-4f6e-a3a4-5b2f9a1f4c11",
        Point(45.67702, -111.04291, 1461.0, 9999999.0, 9999999.0),
        _marker_detail(
            "LZ Falcon",
            "COT_MAPPING_SPOTMAP/b-m-p-s-m/-256",
            "-256",
            "Landing zone cleared, 40 by 60 meters, gentle slope to the east, "
            "power lines 200 meters south. Approach from the west recommended. "
            "Marked with a VS-17 panel, ground team on site until relieved.",
        ),
    )


def _route_points(base_lat: float, base_lon: float, n: int, step: float) -> list[tuple[float, float, float]]:
    return [(round(base_lat + i * step, 7), round(base_lon - i * step * 1.3, 7), 1460.0 + 3 * i) for i in range(n)]


def route(name: str, n: int, method: str = "Walking") -> CotEvent:
    points = _route_points(45.6801, -111.0502, n, 0.0021)
    links = []
    for i, (lat, lon, hae) in enumerate(points):
        kind = "b-m-p-w" if i in (0, n - 1) else "b-m-p-c"
        links.append(
            el(
                "link",
                {
                    "uid": f"{name}-wp{i}",
                    "callsign": name if i == 0 else ("VDO" if i == n - 1 else f"CP{i}"),
                    "type": kind,
                    "point": f"{lat},{lon},{hae}",
                    "remarks": "",
                    "relation": "c",
                },
            )
        )
    children = links + [
        el("link_attr", {"planningmethod": "Infil", "color": "-1", "method": method, "prefix": "CP", "type": "On Foot", "stroke": "3", "direction": "Infil", "routetype": "Primary", "order": "Ascending Check Points"}),
        el("strokeColor", {"value": "-1"}),
        el("strokeWeight", {"value": "3.0"}),
        el("__routeinfo", None, el("__navcues")),
        el("remarks"),
        el("archive"),
        el("contact", {"callsign": name}),
        el("labels_on", {"value": "false"}),
        el("color", {"value": "-1"}),
    ]
    lat, lon, hae = points[0]
    return _event("b-m-r", f"route-{name.lower()}", Point(lat, lon, hae), children)


def shape_polygon(name: str, vertices: list[tuple[float, float]], remarks: str = "") -> CotEvent:
    links = [el("link", {"point": f"{lat},{lon}"}) for lat, lon in vertices]
    children = links + [
        el("strokeColor", {"value": "-65536"}),
        el("strokeWeight", {"value": "4.0"}),
        el("strokeStyle", {"value": "solid"}),
        el("fillColor", {"value": "-1761673216"}),
        el("contact", {"callsign": name}),
        el("remarks", None, text=remarks or None),
        el("archive"),
        el("labels_on", {"value": "true"}),
        el("precisionlocation", {"altsrc": "???"}),
        el("creator", {"uid": "ANDROID-bravo", "callsign": "BRAVO", "time": "2024-05-01T11:58:41.907Z", "type": "a-f-G-U-C"}),
        el("height", {"value": "0.0"}),
        el("height_unit", {"value": "4"}),
        el("tog", {"enabled": "0"}),
    ]
    lat = sum(v[0] for v in vertices) / len(vertices)
    lon = sum(v[1] for v in vertices) / len(vertices)
    return _event("u-d-f", f"shape-{name.lower().replace(' ', '-')}", Point(lat, lon, 9999999.0), children)


def shape_simple() -> CotEvent:
    return shape_polygon(
        "Containment line",
        [(45.70112, -111.06023), (45.69874, -111.04127), (45.68655, -111.05088)],
        "Fire edge as of 1200, holding on the west flank; crews staged at the "
        "trailhead parking lot. Dozer line complete along the south road, "
        "spot fires reported near the creek crossing.",
    )


def shape_complex() -> CotEvent:
    return shape_polygon(
        "Exclusion zone north",
        [
            (45.71231, -111.07114),
            (45.71502, -111.05233),
            (45.70811, -111.03372),
            (45.69607, -111.03091),
            (45.68942, -111.04807),
            (45.69315, -111.06786),
            (45.70288, -111.07602),
            (45.70954, -111.07833),
        ],
        "No-fly area for all rotary wing traffic until 1800 local. Drone operators "
        "coordinate with the air boss on channel 4 before launch. Ground teams "
        "remain south of phase line BLUE except for the recovery element. "
        "Medical evacuation flights are exempt but must announce entry and exit "
        "on the common traffic frequency. Review at 1600 with the incident "
        "commander; any extension will be pushed as an updated shape.",
    )


_MEDEVAC_FULL = {
    "title": "MED.01.121200",
    "casevac": "true",
    "freq": "38.90",
    "urgent": "2",
    "urgent_surgical": "1",
    "priority": "1",
    "routine": "0",
    "convenience": "0",
    "hoist": "false",
    "extraction_equipment": "true",
    "ventilator": "false",
    "equipment_none": "false",
    "equipment_other": "true",
    "equipment_detail": "Litter straps, spinal board",
    "litter": "2",
    "ambulatory": "2",
    "security": "1",
    "hlz_marking": "3",
    "hlz_other": "IR strobe on the north edge",
    "us_military": "3",
    "us_civilian": "0",
    "nonus_military": "1",
    "nonus_civilian": "0",
    "epw": "0",
    "child": "0",
    "terrain_none": "false",
    "terrain_slope": "true",
    "terrain_rough": "true",
    "terrain_loose": "false",
    "terrain_other": "false",
    "terrain_slope_dir": "NE",
    "obstacles": "Power lines 150 m south, tree line to the west",
    "winds_are_from": "NW at 12 kt",
    "friendlies": "Squad perimeter 100 m radius",
    "enemy": "Small arms fire from the ridge to the east",
    "hlz_remarks": "Approach from the west, single aircraft only",
    "zone_prot_selection": "1",
    "medline_remarks": "Two GSW lower extremity, one blast injury, one heat casualty",
}


def casevac_full() -> CotEvent:
    return _event(
        "b-r-f-h-c",
        "d1f7c2ab-8c63-4d77-9f0e-0b3f7d8a6c21",
        Point(45.68877, -111.05521, 1492.4, 9999999.0, 9999999.0),
        [
            el("contact", {"callsign": "MED.01.121200"}),
            el("link", {"uid": "ANDROID-alpha", "production_time": "2024-05-01T11:59:58.120Z", "type": "a-f-G-U-C", "parent_callsign": "ALPHA", "relation": "p-p"}),
            el("archive"),
            el("_medevac_", _MEDEVAC_FULL, el("zMistsMap", None, el("zMist", {"title": "ZMIST1", "z": "GSW", "m": "Gunshot", "i": "Left thigh", "s": "Stable", "t": "Tourniquet 1150"}))),
            el("remarks", None, text="Request urgent pickup, LZ secured by second squad."),
            el("usericon", {"iconsetpath": "COT_MAPPING_2525B/b-r/b-r-f-h-c"}),
        ],
        stale=timedelta(minutes=30),
    )


def casevac_minimal() -> CotEvent:
    return _event(
        "b-r-f-h-c",
        "5b8b1f5e-1d34-4d3f-8a2b-3c4d5e6f7a80",
        Point(45.67421, -111.03377, 1455.0, 9999999.0, 9999999.0),
        [
            el("contact", {"callsign": "MED.02.121204"}),
            el("_medevac_", {"title": "MED.02.121204", "casevac": "true", "urgent": "1", "litter": "1", "ambulatory": "0", "security": "0", "hlz_marking": "2"}),
            el("archive"),
        ],
        stale=timedelta(minutes=30),
    )


def bulk_package(size: int = 6144, seed: int = 0, filename: str = "image.zip") -> CotEvent:
    """A file transfer carrying ``size`` bytes of incompressible archive data."""
    data = random.Random(seed).randbytes(size)
    return _event(
        "b-f-t-r",
        f"fileshare-{seed}",
        Point(0.0, 0.0),
        [
            el(
                "fileshare",
                {
                    "filename": filename,
                    "name": filename.rsplit(".", 1)[0],
                    "senderCallsign": "ALPHA",
                    "senderUid": "ANDROID-alpha",
                    "sha256": hashlib.sha256(data).hexdigest(),
                    "sizeInBytes": str(size),
                },
                text=base64.b64encode(data).decode("ascii"),
            )
        ],
        how="h-e",
    )


def corpus() -> list[CotEvent]:
    """Twelve events: two each of location, text, marker, route, shape and casevac."""
    return [
        location("ALPHA", 45.6770, -111.0429, 1461.0),
        location("BRAVO", -33.8688197, 151.2092955, 58.25),
        chat("ALPHA", "on station"),
        chat("BRAVO", "Moving to checkpoint 3, ETA 10 min. Über-cautious near the bridge.", "ALPHA"),
        marker_simple(),
        marker_spot(),
        route("Route Blue", 5),
        route("Route Gold", 9, method="Driving"),
        shape_simple(),
        shape_complex(),
        casevac_full(),
        casevac_minimal(),
    ]


MEDIUM_SIMPLE = marker_simple
MEDIUM_COMPLEX = casevac_full
