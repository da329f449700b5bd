"""Encode a location report into one radio frame and decode it back."""

from sa_gateway.frame_codec import (
    LocationPayload,
    SaMessageType,
    decode_frame,
    decode_location,
    encode_frame,
    encode_location,
    make_frame,
)

payload = encode_location(LocationPayload(45.6770, -111.0429, 1461.0, 1_714_564_800_000))
wire = encode_frame(make_frame(SaMessageType.LOCATION, 0x0A, 0x01, 1, payload))
print(f"location frame: {len(wire)} bytes")
print(wire.hex(" "))

frame = decode_frame(wire)
print(frame.header)
print(decode_location(frame.payload))
