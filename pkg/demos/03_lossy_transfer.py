"""A 6 KB transfer over a link that drops one frame in five."""

from sa_gateway.bench import loss_recovery

for loss in (0.0, 0.1, 0.2, 0.3):
    trials = loss_recovery(loss, trials=200, seed=1)
    delivered = [t for t in trials if t.delivered]
    sends = sum(t.transmissions for t in delivered) / max(1, len(delivered))
    print(f"loss {loss:.1f}: {len(delivered)}/200 delivered, {sends:.1f} transmissions per transfer")
