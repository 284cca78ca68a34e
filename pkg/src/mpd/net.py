"""Loopback/TCP plumbing: threaded server, client connect and a fault proxy."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Callable

from .errors import ChannelError, ConfigError
from .framing import ACK, FrameDecoder, encode_frame, FramedSocket
from .harness import Action, ChannelPolicy, channel_transfer
from .session import DEFAULT_PART_TIMEOUT, DialectConfig, ServerSession, run_handshake_server

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        service = srv.service_factory()
        if srv.dialects is None:
            session = ServerSession(service)
        else:
            session = srv.dialects.server(service)
        with FramedSocket(self.request) as transport:
            run_handshake_server(session, transport, srv.part_timeout)
        srv.finished(session)


class DialectServer(socketserver.ThreadingTCPServer):
    """One :class:`ServerSession` per accepted connection.

    ``dialects=None`` runs the same protocol with framing only, which is the
    baseline for overhead measurements.
    """

    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 512

    def __init__(self, address, service_factory: Callable[[], object],
                 dialects: DialectConfig | None, part_timeout: float = DEFAULT_PART_TIMEOUT,
                 max_connections: int | None = None):
        self.service_factory = service_factory
        self.dialects = dialects
        self.part_timeout = part_timeout
        self.max_connections = max_connections
        self.sessions: list[ServerSession] = []
        self._lock = threading.Lock()
        super().__init__(address, _Handler)

    def finished(self, session: ServerSession):
        with self._lock:
            self.sessions.append(session)
            done = self.max_connections is not None and len(self.sessions) >= self.max_connections
        if done:
            threading.Thread(target=self.shutdown, daemon=True).start()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def connect(address: str, timeout: float = 5.0) -> FramedSocket:
    try:
        sock = socket.create_connection(parse_address(address), timeout=timeout)
    except OSError as exc:
        raise ChannelError(f"cannot connect to {address}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return FramedSocket(sock)


class _Link:
    """Handshake bookkeeping shared by both directions of one proxied connection."""

    def __init__(self):
        self.ordinal = 0
        self.part = 0
        self.continuation = False
        self.lock = threading.Lock()

    def client_frame(self) -> tuple[int, int]:
        with self.lock:
            if self.continuation:
                self.part += 1
            else:
                self.ordinal += 1
                self.part = 1
            self.continuation = False
            return self.ordinal, self.part

    def server_frame(self, payload: bytes):
        with self.lock:
            self.continuation = payload == ACK


class ChannelProxy(socketserver.ThreadingTCPServer):
    """Live TCP forwarder applying a :class:`ChannelPolicy` to client frames.

    Handshakes are counted per connection: a client frame opens a new
    handshake unless the server's previous frame was a sub-packet ACK.
    """

    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 512

    def __init__(self, address, upstream: str, policy: ChannelPolicy):
        self.upstream = upstream
        self.policy = policy
        self.events: list[tuple[int, int, str]] = []
        self._lock = threading.Lock()
        super().__init__(address, _ProxyHandler)

    def record(self, ordinal, part, action: Action):
        with self._lock:
            self.events.append((ordinal, part, action.value))


class _ProxyHandler(socketserver.BaseRequestHandler):
    def handle(self):
        proxy = self.server
        try:
            upstream = socket.create_connection(parse_address(proxy.upstream))
        except OSError as exc:
            log.warning("upstream %s unreachable: %s", proxy.upstream, exc)
            return
        link = _Link()
        down = self.request
        for sock in (down, upstream):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

        def client_to_server():
            decoder = FrameDecoder()
            try:
                while chunk := down.recv(65536):
                    for frame in decoder.feed(chunk):
                        ordinal, part = link.client_frame()
                        t = channel_transfer(proxy.policy, ordinal, frame, part)
                        proxy.record(ordinal, part, t.action)
                        for payload in t.payloads:
                            upstream.sendall(encode_frame(payload))
            except OSError:
                pass
            finally:
                _shut(upstream)

        def server_to_client():
            decoder = FrameDecoder()
            try:
                while chunk := upstream.recv(65536):
                    for frame in decoder.feed(chunk):
                        link.server_frame(frame)
                        down.sendall(encode_frame(frame))
            except OSError:
                pass
            finally:
                _shut(down)

        pump = threading.Thread(target=server_to_client, daemon=True)
        pump.start()
        client_to_server()
        pump.join()
        upstream.close()


def _shut(sock: socket.socket):
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass


def serve_in_thread(server: socketserver.BaseServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    thread.start()
    return thread
