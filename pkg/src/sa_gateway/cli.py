"""Command-line entry points.

Exit status: 0 success, 1 usage or configuration error, 2 conversion or
protocol error. ``SA_GATEWAY_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import bench, provisioning
from .compression import DEFAULT_POLICY, CompressionPolicy, compress
from .cot import CotError, parse_cot, to_xml
from .frame_codec import BROADCAST, FrameError, SaMessageType, decode_frame, format_address, parse_address
from .gateway import ConfigError, GatewayConfig, decode_stream, encode_stream
from .mesh_sim import ChannelModel, SimError, Simulator, Topology, load_scenario, network_scan
from .reliability import FeedStatus, FragmentStore, ReliabilityError, fragment
from .translator import (
    BulkEnvelope,
    TranslationError,
    classify_event,
    encode_bulk,
    extract_sa_payload,
    rebuild_cot,
)

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL = 0, 1, 2
log = logging.getLogger("sa_gateway")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _address(text: str) -> int:
    try:
        return parse_address(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- convert -------------------------------------------------------------------


def cmd_convert(args) -> int:
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot read {args.input}: {exc.strerror}")
    try:
        if args.direction == "cot2frame":
            out = _cot2frame(data, args)
        else:
            out = _frame2cot(data, args)
    except (CotError, FrameError, TranslationError, ReliabilityError) as exc:
        return _fail(EXIT_PROTOCOL, f"{type(exc).__name__}: {exc}")
    Path(args.output).write_bytes(out)
    return EXIT_OK


def _cot2frame(data: bytes, args) -> bytes:
    if data.lstrip()[:1] == b"<":
        e = parse_cot(data)
        t = classify_event(e)
        payload = extract_sa_payload(e, t)
    else:
        t = SaMessageType.BULK_DATA
        payload = compress(encode_bulk(BulkEnvelope(Path(args.input).name, args.callsign, data)))
    frames = fragment(args.uid, t, args.source, args.dest, payload, DEFAULT_POLICY.applies(t))
    print(f"{t.name}: {len(payload)} payload bytes in {len(frames)} frame(s)", file=sys.stderr)
    return encode_stream(frames)


def _frame2cot(data: bytes, args) -> bytes:
    store = FragmentStore()
    out = []
    for raw in decode_stream(data):
        frame = decode_frame(raw)
        r = store.feed(frame, 0.0)
        if r.status is not FeedStatus.COMPLETE:
            continue
        h = frame.header
        policy = DEFAULT_POLICY if h.compressed else CompressionPolicy(frozenset())
        e = rebuild_cot(
            h.message_type, r.payload, h.source_uid, message_uid=h.message_uid, dest=h.destination_uid, policy=policy
        )
        out.append(to_xml(e))
    if store.sets():
        missing = sum(fs.total - fs.count for fs in store.sets())
        raise ReliabilityError(f"stream ends with {missing} fragment(s) missing")
    if not out:
        raise FrameError("stream holds no complete message")
    return b"\n".join(out) + b"\n"


# -- bench / netscan / simulate ------------------------------------------------------------


def cmd_bench(args) -> int:
    report = bench.run(args.scenario, seed=args.seed, reps=args.reps, loss=args.loss, airtime=args.airtime)
    print(report.summary())
    if args.out:
        path = report.write(args.out)
        print(f"csv            {path}")
    return EXIT_OK


def _load_topology(path: str) -> Topology:
    try:
        return Topology.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read topology {path}: {exc.strerror}") from None
    except SimError as exc:
        raise UsageError(str(exc)) from None


def cmd_netscan(args) -> int:
    topo = _load_topology(args.topology)
    if args.origin not in topo.nodes:
        return _fail(EXIT_USAGE, f"origin {format_address(args.origin)} is not in the topology")
    report = network_scan(topo, args.origin, ChannelModel(args.airtime, seed=args.seed))
    print(report.table())
    return EXIT_OK


def cmd_simulate(args) -> int:
    topo = _load_topology(args.topology)
    try:
        steps = load_scenario(args.scenario)
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot read scenario {args.scenario}: {exc.strerror}")
    except SimError as exc:
        return _fail(EXIT_USAGE, str(exc))
    from .harness import SimRadio

    sim = Simulator(topo, ChannelModel(args.airtime, seed=args.seed))
    radios = {a: SimRadio(sim, a, keep_events=False) for a in topo.nodes}
    for step in steps:
        if step.src not in radios:
            return _fail(EXIT_USAGE, f"scenario source {format_address(step.src)} is not in the topology")
        sim.schedule(step.at, radios[step.src].send_payload, step.message_type, step.payload, step.dst)
    try:
        sim.run()
    except ReliabilityError as exc:
        return _fail(EXIT_PROTOCOL, str(exc))
    if args.out:
        sim.write_log(args.out)
    delivered = sum(len(r.received) for r in radios.values())
    print(f"events {len(sim.log)}  delivered {delivered}  lost {sim.lost}  end {sim.now:.3f}s")
    return EXIT_OK


# -- services ------------------------------------------------------------------------


def _wait_for_signal(stop: threading.Event) -> None:
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.5):
        pass


def cmd_gateway_run(args) -> int:
    from .service import GatewayService

    try:
        config = GatewayConfig.load(args.config)
        service = GatewayService(config)
        service.start()
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot open radio port {config.radio_port}: {exc.strerror or exc}")
    log.warning("gateway %s running; radio %s", format_address(config.gateway_address), config.radio_port)
    try:
        _wait_for_signal(service.stop)
    finally:
        service.shutdown()
    return EXIT_OK


def cmd_stub_run(args) -> int:
    from .tak_stub import FederationLink, TakRouter, TakServer, TlsFederationTransport

    try:
        material = provisioning.load(args.cert_dir)
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, str(exc))
    router = TakRouter(args.id)
    if args.peer:
        host, _, port = args.peer.rpartition(":")
        if not material.clients:
            return _fail(EXIT_USAGE, "federation needs a client certificate in cert_dir")
        transport = TlsFederationTransport(
            host or "127.0.0.1", int(port), provisioning.client_context(material, material.clients[-1])
        )
        mode = "Selected" if args.select else "ForwardAll"
        router.add_link(FederationLink(args.peer, transport, mode, tuple(args.select or ())))
    server = TakServer(
        router, provisioning.server_context(material), args.host, args.port, args.federation_port
    )
    try:
        server.start()
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot listen on {args.host}:{args.port}: {exc.strerror or exc}")
    print(f"stub {args.id} listening on {args.host}:{server.port}", flush=True)
    if server.federation_port:
        print(f"federation on {args.host}:{server.federation_port}", flush=True)
    stop = threading.Event()
    try:
        _wait_for_signal(stop)
    finally:
        server.stop()
    return EXIT_OK


def cmd_provision(args) -> int:
    p = provisioning.provision(args.out, clients=args.clients)
    print(f"wrote CA, server and {len(p.clients)} client certificates to {p.directory}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sa-gateway", description="SA frame gateway, simulator and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gw = sub.add_parser("gateway", help="run the gateway service")
    gw_sub = gw.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = gw_sub.add_parser("run", help="bridge a radio port to a TAK server")
    run.add_argument("--config", required=True, help="key = value configuration file")
    run.set_defaults(func=cmd_gateway_run)

    conv = sub.add_parser("convert", help="translate between CoT XML and frame streams")
    conv.add_argument("direction", choices=("cot2frame", "frame2cot"))
    conv.add_argument("input")
    conv.add_argument("output")
    conv.add_argument("--source", type=_address, default=0x0A, help="source address (hex)")
    conv.add_argument("--dest", type=_address, default=BROADCAST, help="destination address (hex or 'broadcast')")
    conv.add_argument("--uid", type=int, default=1, help="message uid")
    conv.add_argument("--callsign", default="", help="sender callsign for raw archive input")
    conv.set_defaults(func=cmd_convert)

    b = sub.add_parser("bench", help="latency and scalability benchmarks")
    b.add_argument("--scenario", required=True, choices=bench.SCENARIOS)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--reps", type=int, default=100)
    b.add_argument("--loss", type=float, default=0.0)
    b.add_argument("--airtime", type=float, default=None, help="per-frame airtime; calibrated when omitted")
    b.add_argument("--out", help="CSV file or directory for the report")
    b.set_defaults(func=cmd_bench)

    ns = sub.add_parser("netscan", help="ping every node of a topology")
    ns.add_argument("--topology", required=True)
    ns.add_argument("--origin", type=_address, required=True)
    ns.add_argument("--airtime", type=float, default=0.70)
    ns.add_argument("--seed", type=int, default=0)
    ns.set_defaults(func=cmd_netscan)

    sim = sub.add_parser("simulate", help="replay a scenario file on a topology")
    sim.add_argument("--topology", required=True)
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--airtime", type=float, default=0.70)
    sim.add_argument("--out", help="event log CSV")
    sim.set_defaults(func=cmd_simulate)

    stub = sub.add_parser("stub", help="run a TAK server stub")
    stub_sub = stub.add_subparsers(dest="action", required=True, parser_class=_Parser)
    srun = stub_sub.add_parser("run")
    srun.add_argument("--cert-dir", required=True)
    srun.add_argument("--host", default="127.0.0.1")
    srun.add_argument("--port", type=int, default=8089)
    srun.add_argument("--federation-port", type=int, default=None)
    srun.add_argument("--peer", help="host:port of a peer stub's federation listener")
    srun.add_argument("--select", action="append", metavar="PREFIX", help="federate only these type prefixes")
    srun.add_argument("--id", default="stub")
    srun.set_defaults(func=cmd_stub_run)

    prov = sub.add_parser("provision", help="generate CA, server and client certificates")
    prov.add_argument("--out", required=True)
    prov.add_argument("--clients", type=int, default=33)
    prov.set_defaults(func=cmd_provision)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SA_GATEWAY_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
