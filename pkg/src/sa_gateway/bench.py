"""Latency and scalability benchmarks over the simulated mesh.

Each latency sample is one message from a radio one hop from the gateway,
timed from the start of its first transmission until the rebuilt CoT event
reaches a TAK client on the stub. With no loss that is
``frames * airtime + processing_delay + ip_delay``; :func:`calibrate_airtime`
solves for the airtime that makes the single-frame mean hit a target.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import random
import statistics
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path

from . import corpus
from .cot import CotEvent
from .frame_codec import BROADCAST, LocationPayload, SaMessageType, encode_location, make_frame
from .gateway import Dropped, GatewayConfig
from .harness import EPOCH, IP_DELAY, PROCESSING_DELAY, Observer, SimGateway, SimRadio
from .mesh_sim import ChannelModel, Simulator, Topology
from .tak_stub import TakRouter

SCENARIOS = ("small", "medium-simple", "medium-complex", "bulk", "scale100")
SMALL_TARGET = 0.73
GATEWAY = 0x01
RADIO = 0x0A
REP_GAP = 5.0


@dataclass
class BenchReport:
    scenario: str
    seed: int
    reps: int
    airtime: float
    loss: float
    samples: list[float] = field(default_factory=list)
    frame_counts: list[int] = field(default_factory=list)
    loss_rate: float = 0.0
    completed: int = 0
    max_queue_depth: int = 0
    drops: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples) if self.samples else math.nan

    @property
    def p95(self) -> float:
        if not self.samples:
            return math.nan
        s = sorted(self.samples)
        return s[min(len(s) - 1, math.ceil(0.95 * len(s)) - 1)]

    @property
    def variance(self) -> float:
        return statistics.pvariance(self.samples) if len(self.samples) > 1 else 0.0

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "seed", "rep", "latency_s", "frames"])
        for i, (s, n) in enumerate(zip(self.samples, self.frame_counts)):
            w.writerow([self.scenario, self.seed, i, f"{s:.6f}", n])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"scenario       {self.scenario}",
            f"seed           {self.seed}",
            f"airtime_s      {self.airtime:.6f}",
            f"loss           {self.loss:g}",
            f"samples        {len(self.samples)} of {self.reps}",
        ]
        if self.samples:
            lines += [
                f"mean_s         {self.mean:.4f}",
                f"p95_s          {self.p95:.4f}",
                f"min_s          {min(self.samples):.4f}",
                f"max_s          {max(self.samples):.4f}",
                f"frames         {sorted(set(self.frame_counts))}",
            ]
        lines += [
            f"loss_rate      {self.loss_rate:.4f}",
            f"max_queue      {self.max_queue_depth}",
            f"drops          {self.drops}",
        ]
        lines += [f"{k:<14} {v}" for k, v in self.extra.items()]
        return "\n".join(lines)

    def write(self, out: str | Path) -> Path:
        path = Path(out)
        if path.suffix != ".csv":
            path.mkdir(parents=True, exist_ok=True)
            path = path / f"bench-{self.scenario}-seed{self.seed}.csv"
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv())
        path.with_suffix(".txt").write_text(self.summary() + "\n")
        return path


def scenario_event(scenario: str, rep: int = 0) -> CotEvent:
    if scenario == "small":
        return corpus.location("ALPHA", 45.677 + rep * 1e-5, -111.0429, 1461.0)
    if scenario == "medium-simple":
        return corpus.MEDIUM_SIMPLE()
    if scenario == "medium-complex":
        return corpus.MEDIUM_COMPLEX()
    if scenario == "bulk":
        return corpus.bulk_package(6144, seed=rep)
    raise ValueError(f"unknown latency scenario {scenario!r}")


def _one_hop(airtime: float, seed: int, loss: float, **gw) -> tuple[Simulator, SimRadio, SimGateway, Observer]:
    topo = Topology()
    topo.add_node(GATEWAY)
    topo.add_node(RADIO, 100.0, 0.0)
    topo.add_link(RADIO, GATEWAY, -55.0, loss)
    sim = Simulator(topo, ChannelModel(airtime, seed=seed))
    router = TakRouter("stub", clock=lambda: sim.now)
    gateway = SimGateway(sim, router, GatewayConfig(gateway_address=GATEWAY, frame_airtime=airtime), **gw)
    return sim, SimRadio(sim, RADIO), gateway, Observer(sim, router)


def run_latency(
    scenario: str,
    *,
    airtime: float,
    seed: int = 0,
    reps: int = 100,
    loss: float = 0.0,
    processing_delay: float = PROCESSING_DELAY,
    ip_delay: float = IP_DELAY,
) -> BenchReport:
    sim, radio, gw, observer = _one_hop(
        airtime, seed, loss, processing_delay=processing_delay, ip_delay=ip_delay
    )
    report = BenchReport(scenario, seed, reps, airtime, loss)
    for rep in range(reps):
        e = scenario_event(scenario, rep)
        start = sim.now
        seen = observer.count
        frames = radio.send_event(e, BROADCAST if scenario == "small" else GATEWAY)
        sim.run()
        if observer.count > seen:
            report.samples.append(observer.events[seen][0] - start)
            report.frame_counts.append(len(frames))
        sim.run_until(sim.now + REP_GAP)
    report.completed = len(report.samples)
    report.loss_rate = sim.lost / sim.transmissions if sim.transmissions else 0.0
    report.max_queue_depth = sim.max_queue_depth()
    report.drops = sum(isinstance(o, Dropped) for o in gw.outcomes)
    return report


def calibrate_airtime(
    target: float = SMALL_TARGET,
    processing_delay: float = PROCESSING_DELAY,
    ip_delay: float = IP_DELAY,
) -> float:
    """Per-frame airtime that makes the lossless single-frame mean equal ``target``.

    Latency is affine in airtime, so two probe runs fix the line exactly.
    """
    probes = [
        run_latency("small", airtime=a, reps=1, processing_delay=processing_delay, ip_delay=ip_delay).mean
        for a in (1.0, 2.0)
    ]
    slope = probes[1] - probes[0]
    intercept = probes[0] - slope
    airtime = (target - intercept) / slope
    if not airtime > 0:
        raise ValueError(f"target {target} s is below the fixed overhead {intercept:.3f} s")
    return airtime


def run_scale(
    *,
    airtime: float,
    seed: int = 0,
    nodes: int = 100,
    interval: float = 5.0,
    duration: float = 600.0,
    loss: float = 0.0,
    pool_size: int = 128,
) -> BenchReport:
    """``nodes`` radios in a full mesh with the gateway, each beaconing its location.

    Certificates: every radio is an active sender for the whole run, so the
    pool is sized above the node count.
    """
    addrs = [0x100 + i for i in range(nodes)]
    topo = Topology.full_mesh([GATEWAY] + addrs, -60.0, loss)
    sim = Simulator(topo, ChannelModel(airtime, seed=seed), log=False)
    router = TakRouter("stub", clock=lambda: sim.now)
    config = GatewayConfig(gateway_address=GATEWAY, frame_airtime=airtime, pool_size=pool_size)
    gw = SimGateway(sim, router, config)
    gw.record_outcomes = False
    observer = Observer(sim, router, keep=False)
    rng = random.Random(seed)
    uids = {a: 0 for a in addrs}
    beacons = 0

    def beacon(addr: int, lat: float, lon: float) -> None:
        uids[addr] += 1
        ms = int((EPOCH + timedelta(seconds=sim.now)).timestamp() * 1000)
        payload = encode_location(LocationPayload(lat, lon, 1400.0, ms))
        sim.transmit(addr, make_frame(SaMessageType.LOCATION, addr, BROADCAST, uids[addr], payload))

    for i, addr in enumerate(addrs):
        offset = rng.uniform(0.0, interval)
        lat, lon = 45.0 + i * 1e-3, -111.0
        t = offset
        while t < duration:
            sim.schedule(t, beacon, addr, lat, lon)
            beacons += 1
            t += interval
    sim.run()
    counters = gw.gateway.metrics.counters
    report = BenchReport("scale100", seed, beacons, airtime, loss)
    report.completed = observer.count
    report.loss_rate = sim.lost / sim.transmissions if sim.transmissions else 0.0
    report.max_queue_depth = sim.max_queue_depth()
    report.drops = counters.get("radio.Dropped", 0) + sim.lost
    report.extra = {
        "beacons": beacons,
        "surfaced": observer.count,
        "forwarded": counters.get("radio.Forwarded", 0),
        "handshakes": gw.pool.handshakes,
        "sim_end_s": round(sim.now, 3),
    }
    return report


def run(
    scenario: str, *, seed: int = 0, reps: int = 100, loss: float = 0.0, airtime: float | None = None
) -> BenchReport:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    airtime = calibrate_airtime() if airtime is None else airtime
    if scenario == "scale100":
        return run_scale(airtime=airtime, seed=seed, loss=loss)
    return run_latency(scenario, airtime=airtime, seed=seed, reps=reps, loss=loss)


@dataclass
class TrialResult:
    seed: int
    delivered: bool
    intact: bool
    sender_confirmed: bool
    duration: float
    transmissions: int


def transfer_trial(loss: float, seed: int, *, airtime: float = 0.70, size: int = 6144, retry_limit: int = 5) -> TrialResult:
    """One bulk transfer between two radios over a single lossy link.

    Delivery means the receiver reassembled the message; ``intact`` compares
    SHA-256 digests of sent and received payloads.
    """
    topo = Topology()
    topo.add_node(RADIO)
    topo.add_node(GATEWAY)
    topo.add_link(RADIO, GATEWAY, -55.0, loss)
    sim = Simulator(topo, ChannelModel(airtime, seed=seed), log=False)
    tx = SimRadio(sim, RADIO, retry_limit=retry_limit, keep_events=False)
    rx = SimRadio(sim, GATEWAY, retry_limit=retry_limit, keep_events=False)
    payload = random.Random(seed).randbytes(size)
    tx.send_payload(SaMessageType.BULK_DATA, payload, GATEWAY, compressed=False)
    sim.run()
    got = [m.payload for _, m in rx.received]
    delivered = bool(got)
    intact = all(hashlib.sha256(p).digest() == hashlib.sha256(payload).digest() for p in got)
    return TrialResult(seed, delivered, intact, tx.completed_transfers == 1, sim.now, sim.transmissions)


def loss_recovery(loss: float, trials: int = 500, seed: int = 0, **kw) -> list[TrialResult]:
    return [transfer_trial(loss, seed * 1_000_003 + i, **kw) for i in range(trials)]
