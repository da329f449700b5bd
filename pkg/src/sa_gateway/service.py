"""Long-running gateway process: TLS to a TAK server, TCP to a radio.

The radio port carries length-prefixed frames (2-byte big-endian length,
then the encoded frame). ``tcp://host:port`` connects out to a radio
bridge; ``listen://host:port`` binds and serves one bridge connection at a
time. The first provisioned client certificate is kept for the downlink
subscription; the rest form the submission pool.
"""

from __future__ import annotations

import logging
import socket
import threading
from urllib.parse import urlsplit

from . import provisioning
from .frame_codec import SaFrame, encode_frame
from .gateway import ConfigError, Gateway, GatewayConfig, SessionPool, TlsConnector
from .tak_stub import MAX_LINE

log = logging.getLogger(__name__)

POLL_INTERVAL = 0.1


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class RadioPort:
    def __init__(self, url: str):
        parts = urlsplit(url)
        if parts.scheme not in ("tcp", "listen") or not parts.port:
            raise ConfigError(f"radio_port must be tcp://host:port or listen://host:port, got {url!r}")
        self.mode = parts.scheme
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port
        self._listener: socket.socket | None = None
        self._conn: socket.socket | None = None
        self._send_lock = threading.Lock()

    def open(self) -> None:
        if self.mode == "listen":
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                s.bind((self.host, self.port))
            except OSError:
                s.close()
                raise
            s.listen(1)
            s.settimeout(0.5)
            self._listener = s
            self.port = s.getsockname()[1]

    def connect(self, stop: threading.Event) -> socket.socket | None:
        while not stop.is_set():
            try:
                if self._listener is not None:
                    conn, _ = self._listener.accept()
                else:
                    conn = socket.create_connection((self.host, self.port), timeout=2.0)
            except (socket.timeout, OSError):
                if self._listener is None:
                    stop.wait(1.0)
                continue
            conn.settimeout(0.5)
            self._conn = conn
            return conn
        return None

    def send(self, frame: SaFrame) -> None:
        data = encode_frame(frame)
        with self._send_lock:
            if self._conn is None:
                log.warning("radio port not connected; frame %s dropped", frame)
                return
            try:
                self._conn.sendall(len(data).to_bytes(2, "big") + data)
            except OSError as exc:
                log.warning("radio write failed: %s", exc)

    def frames(self, conn: socket.socket, stop: threading.Event):
        while not stop.is_set():
            try:
                head = _recv_exact(conn, 2)
                if head is None:
                    return
                body = _recv_exact(conn, int.from_bytes(head, "big"))
                if body is None:
                    return
            except socket.timeout:
                continue
            except OSError:
                return
            yield body

    def close(self) -> None:
        for s in (self._conn, self._listener):
            if s is not None:
                s.close()


class GatewayService:
    def __init__(self, config: GatewayConfig):
        if not config.cert_dir:
            raise ConfigError("cert_dir is required to reach the TAK server")
        try:
            self.material = provisioning.load(config.cert_dir)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None
        if len(self.material.clients) < 2:
            raise ConfigError("cert_dir needs at least two client certificates")
        self.config = config
        host, port = config.tak_host_port
        self.connector = TlsConnector(host, port, self.material)
        self.pool = SessionPool(
            self.connector, self.material.clients[1 : 1 + config.pool_size], ttl=config.pool_ttl_seconds
        )
        self.radio = RadioPort(config.radio_port)
        self.gateway = Gateway(config, self.pool.submit, self.radio.send)
        self.stop = threading.Event()
        self.connected = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        self.radio.open()
        for target, name in ((self._radio_loop, "radio"), (self._downlink_loop, "downlink"), (self._timer_loop, "timers")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def shutdown(self) -> None:
        self.stop.set()
        self.radio.close()
        for t in self._threads:
            t.join(3)
        self.pool.close()

    def _radio_loop(self) -> None:
        while not self.stop.is_set():
            conn = self.radio.connect(self.stop)
            if conn is None:
                return
            log.info("radio link up")
            for data in self.radio.frames(conn, self.stop):
                outcome = self.gateway.ingest_radio_bytes(data)
                log.debug("radio frame -> %s", type(outcome).__name__)
            log.info("radio link down")

    def _downlink_loop(self) -> None:
        backoff = 1.0
        host, port = self.config.tak_host_port
        while not self.stop.is_set():
            try:
                sock = self.connector.open(self.material.clients[0])
            except OSError as exc:
                log.warning("TAK %s:%d unreachable: %s", host, port, exc)
                self.stop.wait(backoff)
                backoff = min(backoff * 2, 30.0)
                continue
            backoff = 1.0
            sock.settimeout(0.5)
            self.connected.set()
            log.info("Connected to TAK server %s:%d", host, port)
            buf = b""
            try:
                while not self.stop.is_set():
                    try:
                        chunk = sock.recv(65536)
                    except socket.timeout:
                        continue
                    if not chunk:
                        break
                    buf += chunk
                    *lines, buf = buf.split(b"\n")
                    if len(buf) > MAX_LINE:
                        buf = b""
                    for line in lines:
                        if line.strip():
                            self._downlink(line)
            except OSError as exc:
                log.warning("TAK downlink lost: %s", exc)
            finally:
                self.connected.clear()
                sock.close()

    def _downlink(self, line: bytes) -> None:
        outcome = self.gateway.ingest_tak_event(line)
        log.debug("TAK event -> %s", outcome)

    def _timer_loop(self) -> None:
        while not self.stop.wait(POLL_INTERVAL):
            self.gateway.poll()
            self.pool.expire()

    def run_forever(self) -> None:
        self.start()
        try:
            while not self.stop.wait(0.5):
                pass
        finally:
            self.shutdown()
