"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line through the ``verdict`` fixture; the
lines are repeated in the pytest terminal summary.
"""

from __future__ import annotations

import random
import struct
import time
from collections import Counter, defaultdict

import pytest

from sa_gateway import bench, corpus, harness
from sa_gateway.cot import CotError, parse_cot, to_xml
from sa_gateway.frame_codec import (
    FrameError,
    LocationPayload,
    SaMessageType,
    decode_frame,
    encode_frame,
    encode_location,
    make_frame,
)
from sa_gateway.gateway import SessionPool, TlsConnector
from sa_gateway.provisioning import server_context
from sa_gateway.reliability import FeedStatus, FragmentStore, fragment
from sa_gateway.tak_stub import TakRouter, TakServer
from sa_gateway.translator import operational_view

LATENCY_TARGETS = {
    # scenario: (target mean s, relative tolerance, frames per message)
    "medium-simple": (2.15, 0.15, 3),
    "medium-complex": (2.5, 0.15, 4),
    "bulk": (20.1, 0.10, 28),
}


def test_criterion_1_latency_ratios(verdict):
    airtime = bench.calibrate_airtime(0.73)
    small = bench.run_latency("small", airtime=airtime, reps=100)
    details = [f"airtime {airtime:.4f}s", f"small {small.mean:.4f}s"]
    ok = small.mean == pytest.approx(0.73, abs=1e-9) and set(small.frame_counts) == {1}
    for scenario, (target, tol, frames) in LATENCY_TARGETS.items():
        r = bench.run_latency(scenario, airtime=airtime, reps=100)
        err = (r.mean - target) / target
        ok &= len(r.samples) == 100 and set(r.frame_counts) == {frames} and abs(err) <= tol
        details.append(f"{scenario} {r.mean:.2f}s {err:+.1%} in {frames} frames")
    assert verdict(1, "latency ratios", ok, "; ".join(details))


def _wire(frame):
    return decode_frame(encode_frame(frame))


def test_criterion_2_fragmentation_oracle(verdict):
    expected = {1: 1, 230: 1, 231: 2, 6144: 28, 25600: 114}
    rng = random.Random(2)
    failures = []
    for size, count in expected.items():
        payload = rng.randbytes(size)
        frames = fragment(7, SaMessageType.BULK_DATA, 0x0A, 0x01, payload)
        if len(frames) != count:
            failures.append(f"{size} B gave {len(frames)} frames")
            continue
        for _ in range(1000):
            order = frames + [rng.choice(frames) for _ in range(rng.randint(0, count))]
            rng.shuffle(order)
            store = FragmentStore()
            done = [r.payload for r in (store.feed(_wire(f), 0.0) for f in order) if r.status is FeedStatus.COMPLETE]
            if done != [payload]:
                failures.append(f"{size} B reassembly mismatch")
                break
    detail = "counts " + "/".join(map(str, expected.values())) + ", 1000 orders per size"
    assert verdict(2, "fragmentation oracle", not failures, "; ".join(failures) or detail)


@pytest.mark.slow
def test_criterion_3_loss_recovery(verdict):
    details, ok = [], True
    for loss in (0.1, 0.2):
        trials = bench.loss_recovery(loss, trials=500, seed=3, retry_limit=5)
        delivered = [t for t in trials if t.delivered]
        rate = len(delivered) / len(trials)
        ok &= rate >= 0.99 and all(t.intact for t in delivered)
        details.append(f"p={loss} completion {rate:.3f}")
    assert verdict(3, "loss recovery", ok, ", ".join(details) + ", checksums intact")


@pytest.mark.slow
def test_criterion_4_scalability(verdict):
    start = time.monotonic()
    r = bench.run_scale(airtime=bench.calibrate_airtime(), nodes=100, interval=5.0, duration=600.0)
    wall = time.monotonic() - start
    beacons = r.extra["beacons"]
    # every node has at most one beacon in flight, so the queue cannot exceed the node count
    ok = r.drops == 0 and r.completed == beacons == 12000 and r.max_queue_depth <= 100 and wall < 60
    detail = f"{r.completed}/{beacons} surfaced, drops {r.drops}, max queue {r.max_queue_depth}, {wall:.1f}s wall"
    assert verdict(4, "100-node scalability", ok, detail)


def test_criterion_5_session_pool(certs, clock, verdict):
    senders = [0x10, 0x11, 0x12, 0x13, 0x14]
    bursts = dict(zip(senders, (1, 2, 2, 3, 4)))
    per_sender = 10
    router = TakRouter("stub")
    seen = []
    router.connect("watcher", seen.append)
    with TakServer(router, server_context(certs)) as server:
        pool = SessionPool(TlsConnector("127.0.0.1", server.port, certs), certs.clients, clock=clock)
        remaining = dict.fromkeys(senders, per_sender)
        n = 0
        for burst in range(max(bursts.values())):
            active = [s for s in senders if burst < bursts[s]]
            for s in active:
                left = bursts[s] - burst
                for _ in range(remaining[s] // left):
                    pool.submit(s, corpus.location(f"S{s:X}-{n}", 45.0, -111.0, 1400.0))
                    remaining[s] -= 1
                    n += 1
                    clock.advance(1.0)
            clock.advance(pool.ttl + 10.0)
        deadline = time.monotonic() + 10
        while len(seen) < n and time.monotonic() < deadline:
            time.sleep(0.01)
        pool.close()
        handshakes = server.handshakes
        names = list(server.peer_names)
    expected = sum(bursts.values())
    owners = defaultdict(set)
    for sender, cert in pool.history:
        owners[cert].add(sender)
    shared = [c for c, who in owners.items() if len(who) > 1]
    ok = (
        n == 50
        and len(seen) == 50
        and handshakes == pool.handshakes == expected
        and Counter(names) == Counter(c for _, c in pool.history)
        and not shared
    )
    detail = (
        f"{n} events sent, {len(seen)} surfaced, {handshakes} handshakes for {expected} bursts, "
        f"shared certificates {len(shared)}"
    )
    assert verdict(5, "session pool", ok, detail)


def _bits(e) -> bytes:
    return struct.pack("!ddd", e.point.lat, e.point.lon, e.point.hae)


def _run_direction(fed, src, dst, gateway_addr, events):
    base = len(dst.events)
    start = fed.sim.now
    for i, e in enumerate(events):
        fed.sim.schedule(start + 60.0 * i, src.send_event, e, gateway_addr)
    fed.sim.run()
    return [e for _, e in dst.events[base:]]


def test_criterion_6_end_to_end_identity(verdict):
    events = corpus.corpus()
    assert Counter(operational_view(e)["class"] for e in events) == Counter(
        {t: 2 for t in ("LOCATION", "TEXT", "MARKER", "ROUTE", "SHAPE", "CASEVAC")}
    )
    fed = harness.build_federation()
    ra, rb = fed.radios
    problems = []
    for name, src, dst, gw in (("a->b", ra, rb, 0x01), ("b->a", rb, ra, 0x02)):
        got = _run_direction(fed, src, dst, gw, events)
        if len(got) != len(events):
            problems.append(f"{name}: {len(got)} of {len(events)} arrived")
            continue
        for sent, back in zip(events, got):
            if operational_view(back) != operational_view(sent) or _bits(back) != _bits(sent):
                problems.append(f"{name}: {sent.event_type} changed")
    detail = "; ".join(problems) or "12 events each way, fields and coordinate bits identical"
    assert verdict(6, "end-to-end semantic identity", not problems, detail)


def _frame_seeds() -> list[bytes]:
    loc = encode_location(LocationPayload(45.677, -111.0429, 1461.0, 1_714_564_800_000))
    seeds = [
        encode_frame(make_frame(SaMessageType.LOCATION, 0x0A, 0x01, 1, loc)),
        encode_frame(make_frame(SaMessageType.TEXT, 0x0A, 0x01, 2, b"on station")),
        encode_frame(make_frame(SaMessageType.ACK, 0x01, 0x0A, 3, b"\xff\xff\xff\xe0")),
    ]
    seeds += [encode_frame(f) for f in fragment(4, SaMessageType.BULK_DATA, 0x0A, 0x01, bytes(600))]
    return seeds


def _mutate(rng: random.Random, data: bytes) -> bytes:
    b = bytearray(data)
    for _ in range(rng.randint(1, 4)):
        op = rng.randrange(3)
        if op == 0 and b:
            b[rng.randrange(len(b))] = rng.randrange(256)
        elif op == 1 and b:
            del b[rng.randrange(len(b)) :]
        else:
            b.insert(rng.randrange(len(b) + 1), rng.randrange(256))
    return bytes(b)


@pytest.mark.slow
def test_criterion_7_fuzz_hardening(verdict):
    rng = random.Random(7)
    start = time.monotonic()
    crashes = []
    frames_ok = frames_err = 0
    seeds = _frame_seeds()
    for i in range(1_000_000):
        data = _mutate(rng, rng.choice(seeds)) if i % 2 else rng.randbytes(rng.randint(0, 300))
        try:
            frame = decode_frame(data)
        except FrameError:
            frames_err += 1
            continue
        except Exception as exc:  # any other exception is a crash
            crashes.append(f"decode_frame {data.hex()}: {exc!r}")
            continue
        if encode_frame(frame) != data:
            crashes.append(f"decode_frame accepted a non-canonical frame {data.hex()}")
        frames_ok += 1
    docs = [to_xml(e) for e in corpus.corpus()]
    xml_ok = xml_err = 0
    for i in range(100_000):
        data = _mutate(rng, rng.choice(docs)) if i % 4 else rng.randbytes(rng.randint(0, 400))
        try:
            e = parse_cot(data)
            parse_cot(to_xml(e))
            xml_ok += 1
        except CotError:
            xml_err += 1
        except Exception as exc:  # any other exception is a crash
            crashes.append(f"parse_cot {data[:60]!r}: {exc!r}")
    wall = time.monotonic() - start
    ok = not crashes and wall < 120
    detail = (
        f"frames {frames_ok} valid/{frames_err} typed, xml {xml_ok} valid/{xml_err} typed, "
        f"{len(crashes)} crashes, {wall:.1f}s"
    )
    assert verdict(7, "codec and parser fuzzing", ok, detail + ("; " + crashes[0] if crashes else ""))
