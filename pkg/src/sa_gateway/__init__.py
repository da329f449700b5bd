"""Gateway translation layer between a mesh radio network and TAK servers.

Radio frames are compact binary records (:mod:`sa_gateway.frame_codec`);
TAK speaks Cursor-on-Target XML (:mod:`sa_gateway.cot`). The gateway
(:mod:`sa_gateway.gateway`) translates between them, with fragmentation and
selective-ack retransmission (:mod:`sa_gateway.reliability`), a
discrete-event mesh simulator (:mod:`sa_gateway.mesh_sim`) and a TAK server
stub (:mod:`sa_gateway.tak_stub`) for testing.
"""

from .compression import DEFAULT_POLICY, CompressionPolicy, compress, decompress
from .cot import CotEvent, canonical_xml, cot_to_json, json_to_cot, parse_cot, to_xml
from .frame_codec import (
    BROADCAST,
    FrameError,
    SaFrame,
    SaFrameHeader,
    SaMessageType,
    decode_frame,
    encode_frame,
    make_frame,
)
from .gateway import DestinationRegistry, Gateway, GatewayConfig, SessionPool, destination_resolve
from .mesh_sim import ChannelModel, Simulator, Topology, network_scan
from .reliability import FragmentStore, TransferAgent, feed_fragment, fragment, handle_ack
from .tak_stub import FederationLink, TakRouter, TakServer, federation_reconnect
from .translator import classify_event, extract_sa_payload, operational_view, rebuild_cot

__version__ = "0.1.0"

__all__ = [
    "BROADCAST",
    "ChannelModel",
    "CompressionPolicy",
    "CotEvent",
    "DEFAULT_POLICY",
    "DestinationRegistry",
    "FederationLink",
    "FragmentStore",
    "FrameError",
    "Gateway",
    "GatewayConfig",
    "SaFrame",
    "SaFrameHeader",
    "SaMessageType",
    "SessionPool",
    "Simulator",
    "TakRouter",
    "TakServer",
    "Topology",
    "TransferAgent",
    "canonical_xml",
    "classify_event",
    "compress",
    "cot_to_json",
    "decode_frame",
    "decompress",
    "destination_resolve",
    "encode_frame",
    "extract_sa_payload",
    "feed_fragment",
    "federation_reconnect",
    "fragment",
    "handle_ack",
    "json_to_cot",
    "make_frame",
    "network_scan",
    "operational_view",
    "parse_cot",
    "rebuild_cot",
    "to_xml",
]
