"""Five senders share four client certificates over real TLS to a stub server.

The fifth sender takes the certificate of the longest-idle session once that
session has been idle past the steal grace.
"""

import tempfile

from sa_gateway import corpus, provisioning
from sa_gateway.gateway import SessionPool, TlsConnector
from sa_gateway.tak_stub import TakRouter, TakServer


class StepClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


material = provisioning.provision(tempfile.mkdtemp(), clients=4)
clock = StepClock()
with TakServer(TakRouter("stub"), provisioning.server_context(material)) as server:
    pool = SessionPool(TlsConnector("127.0.0.1", server.port, material), material.clients, clock=clock)
    for burst in range(2):
        for sender in range(5):
            try:
                r = pool.submit(sender, corpus.location(f"U{burst}{sender}", 45.0, -111.0, 1400.0))
                print(f"t={clock.t:5.1f}s sender {sender} -> {r.certificate_id} handshake={r.handshake}")
            except Exception as exc:
                print(f"t={clock.t:5.1f}s sender {sender} -> {type(exc).__name__}: {exc}")
            clock.t += 2.0
        clock.t += 70.0
    pool.close()
    print(f"handshakes seen by the stub: {server.handshakes}")
