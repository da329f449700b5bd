"""Shrink CoT events to radio payloads and rebuild them on the far side."""

from sa_gateway import corpus
from sa_gateway.cot import to_xml
from sa_gateway.reliability import frame_count
from sa_gateway.translator import classify_event, extract_sa_payload, operational_view, rebuild_cot

print(f"{'type':<12} {'xml B':>6} {'payload B':>9} {'frames':>6}  preserved")
for e in corpus.corpus():
    t = classify_event(e)
    payload = extract_sa_payload(e, t)
    back = rebuild_cot(t, payload, 0x0A, message_uid=1)
    same = operational_view(back) == operational_view(e)
    print(f"{t.name:<12} {len(to_xml(e)):>6} {len(payload):>9} {frame_count(len(payload)):>6}  {same}")
