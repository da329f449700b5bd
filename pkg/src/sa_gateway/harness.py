"""Glue that runs radios, gateways and TAK stubs on one simulated clock.

A :class:`SimRadio` is an end-user device: the plugin side of the
translator (classify, extract, fragment, rebuild) on top of a
:class:`~sa_gateway.reliability.TransferAgent`. A :class:`SimGateway` puts a
:class:`~sa_gateway.gateway.Gateway` on a mesh node and submits to an
in-process :class:`~sa_gateway.tak_stub.TakRouter`. Every frame crossing a
node boundary is encoded and decoded so the codec stays on the path.

Delays on the IP side are explicit: ``processing_delay`` from a frame
arriving at the gateway to its CoT being handed to a session, and
``ip_delay`` from there to the TAK stub routing it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable

from .compression import DEFAULT_POLICY, CompressionPolicy
from .cot import CotEvent
from .frame_codec import BROADCAST, SaFrame, SaMessageType, decode_frame, encode_frame
from .gateway import Gateway, GatewayConfig, RouterConnector, SessionPool, virtual_credentials
from .mesh_sim import ChannelModel, Simulator, Topology
from .reliability import Message, Outcome, TransferAgent
from .tak_stub import TakRouter, federate
from .translator import classify_event, extract_sa_payload, rebuild_cot

EPOCH = datetime(2024, 5, 1, 12, 0, tzinfo=timezone.utc)
PROCESSING_DELAY = 0.02
IP_DELAY = 0.01


def wire_copy(frame: SaFrame) -> SaFrame:
    return decode_frame(encode_frame(frame))


class TimerDriver:
    """Keeps one pending simulator event at an endpoint's next deadline."""

    def __init__(self, sim: Simulator, poll: Callable[[float], object], deadline: Callable[[], float | None]):
        self.sim = sim
        self.poll = poll
        self.deadline = deadline
        self.armed: float | None = None

    def arm(self) -> None:
        d = self.deadline()
        if d is None or (self.armed is not None and self.armed <= d):
            return
        self.armed = d
        self.sim.schedule(d, self._fire, d)

    def _fire(self, when: float) -> None:
        if self.armed != when:
            return
        self.armed = None
        self.poll(self.sim.now)
        self.arm()


class SimRadio:
    """An end-user radio running the translation plugin."""

    def __init__(
        self,
        sim: Simulator,
        address: int,
        *,
        retry_limit: int = 5,
        policy: CompressionPolicy = DEFAULT_POLICY,
        keep_events: bool = True,
    ):
        self.sim = sim
        self.address = address
        self.policy = policy
        self.agent = TransferAgent(address, frame_airtime=sim.model.per_frame_airtime, retry_limit=retry_limit)
        self.received: list[tuple[float, Message]] = []
        self.events: list[tuple[float, CotEvent]] = []
        self.keep_events = keep_events
        self.on_message: Callable[[float, Message], None] | None = None
        self.timers = TimerDriver(sim, self._poll, self.agent.next_deadline)
        sim.attach(address, self._handle)

    def _tx(self, frames: list[SaFrame]) -> None:
        for f in frames:
            self.sim.transmit(self.address, f)

    def _poll(self, now: float) -> None:
        self._tx(self.agent.poll(now))

    def send_payload(
        self, t: SaMessageType, payload: bytes, dest: int = BROADCAST, compressed: bool | None = None
    ) -> list[SaFrame]:
        if compressed is None:
            compressed = self.policy.applies(t)
        frames = self.agent.send(t, dest, payload, self.sim.now, compressed=compressed)
        self._tx(frames)
        self.timers.arm()
        return frames

    def send_event(self, e: CotEvent, dest: int = BROADCAST) -> list[SaFrame]:
        """Plugin outbound path: classify, extract, fragment, transmit."""
        t = classify_event(e)
        return self.send_payload(t, extract_sa_payload(e, t, self.policy), dest)

    def _handle(self, frame: SaFrame, sim: Simulator, at: int) -> None:
        r = self.agent.receive(wire_copy(frame), sim.now)
        self._tx(r.replies)
        if r.outcome is Outcome.DELIVERED:
            m = r.message
            self.received.append((sim.now, m))
            if self.keep_events:
                self.events.append((sim.now, self.rebuild(m)))
            if self.on_message is not None:
                self.on_message(sim.now, m)
        self.timers.arm()

    def rebuild(self, m: Message) -> CotEvent:
        policy = DEFAULT_POLICY if m.compressed else CompressionPolicy(frozenset())
        return rebuild_cot(
            m.message_type, m.payload, m.source, message_uid=m.message_uid, dest=m.dest,
            now=sim_wall(self.sim), policy=policy,
        )

    @property
    def completed_transfers(self) -> int:
        return self.agent.stats.completed_out


def sim_wall(sim: Simulator) -> datetime:
    return EPOCH + timedelta(seconds=sim.now)


class SimGateway:
    """A gateway on a mesh node, submitting into an in-process TAK router."""

    def __init__(
        self,
        sim: Simulator,
        router: TakRouter,
        config: GatewayConfig,
        *,
        processing_delay: float = PROCESSING_DELAY,
        ip_delay: float = IP_DELAY,
        downlink: bool = True,
    ):
        self.sim = sim
        self.router = router
        self.processing_delay = processing_delay
        self.ip_delay = ip_delay
        defer = (lambda fn: sim.schedule_in(ip_delay, fn)) if ip_delay else None
        self.pool = SessionPool(
            RouterConnector(router, defer),
            virtual_credentials(config.pool_size),
            ttl=config.pool_ttl_seconds,
            clock=lambda: sim.now,
        )
        self.gateway = Gateway(
            config,
            self.pool.submit,
            lambda f: sim.transmit(config.gateway_address, f),
            clock=lambda: sim.now,
            wall_clock=lambda: sim_wall(sim),
        )
        self.outcomes: list = []
        self.record_outcomes = True
        self.timers = TimerDriver(sim, self.gateway.poll, self.gateway.next_deadline)
        sim.attach(config.gateway_address, self._handle)
        self.downlink_cid = router.connect("gateway-downlink", self._downlink) if downlink else None

    def _handle(self, frame: SaFrame, sim: Simulator, at: int) -> None:
        data = encode_frame(frame)
        if self.processing_delay:
            sim.schedule_in(self.processing_delay, self._ingest, data)
        else:
            self._ingest(data)

    def _ingest(self, data: bytes) -> None:
        outcome = self.gateway.ingest_radio_bytes(data, self.sim.now)
        if self.record_outcomes:
            self.outcomes.append(outcome)
        self.timers.arm()

    def _downlink(self, e: CotEvent) -> None:
        self.sim.schedule_in(self.processing_delay, self._ingest_tak, e)

    def _ingest_tak(self, e: CotEvent) -> None:
        outcome = self.gateway.ingest_tak_event(e, self.sim.now)
        if self.record_outcomes:
            self.outcomes.append(outcome)
        self.timers.arm()


@dataclass
class Observer:
    """A TAK client recording every event it is handed, with sim timestamps."""

    sim: Simulator
    router: TakRouter
    events: list[tuple[float, CotEvent]] = field(default_factory=list)
    keep: bool = True
    count: int = 0

    def __post_init__(self) -> None:
        self.cid = self.router.connect("observer", self._deliver)

    def _deliver(self, e: CotEvent) -> None:
        self.count += 1
        if self.keep:
            self.events.append((self.sim.now, e))


@dataclass
class Federation:
    """Two meshes, two gateways, two federated stubs on one clock."""

    sim: Simulator
    stubs: tuple[TakRouter, TakRouter]
    gateways: tuple[SimGateway, SimGateway]
    radios: tuple[SimRadio, SimRadio]


def build_federation(
    airtime: float = 0.70,
    seed: int = 0,
    loss: float = 0.0,
    radio_a: int = 0x0A,
    radio_b: int = 0x0B,
    gateway_a: int = 0x01,
    gateway_b: int = 0x02,
) -> Federation:
    """radio_a -- gateway_a -> stub-a <=> stub-b -> gateway_b -- radio_b."""
    topo = Topology()
    for addr in (gateway_a, gateway_b, radio_a, radio_b):
        topo.add_node(addr)
    topo.add_link(radio_a, gateway_a, -55.0, loss)
    topo.add_link(radio_b, gateway_b, -55.0, loss)
    sim = Simulator(topo, ChannelModel(airtime, seed=seed))
    stub_a = TakRouter("stub-a", clock=lambda: sim.now)
    stub_b = TakRouter("stub-b", clock=lambda: sim.now)
    federate(stub_a, stub_b)
    gw_a = SimGateway(sim, stub_a, GatewayConfig(gateway_address=gateway_a, frame_airtime=airtime))
    gw_b = SimGateway(sim, stub_b, GatewayConfig(gateway_address=gateway_b, frame_airtime=airtime))
    return Federation(
        sim, (stub_a, stub_b), (gw_a, gw_b), (SimRadio(sim, radio_a), SimRadio(sim, radio_b))
    )
