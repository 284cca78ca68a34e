"""Per-connection dialect codec and handshake state machines.

:class:`ClientSession` and :class:`ServerSession` do no I/O: they take
received frame payloads and return the payloads to send next, so the same
logic drives both the deterministic simulator in :mod:`mpd.harness` and
real sockets via :func:`run_handshake_client` / :func:`run_handshake_server`.

A handshake is one request and its reply.  Dialect-bearing requests use the
index derived from the sync cache; the receiver checks the dialect by
parsing the inverted bytes and drops the request without any reply when
that fails.  Split requests are sent one sub-packet at a time, each of the
first three acknowledged with a one-byte ``0x06`` frame.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

from .dialects import DialectSpec, Kind, apply, invert, split_part_lengths_ok
from .errors import ChannelError, MPDError, ParseError
from .framing import ACK, encode_frame
from .sync import DEFAULT_HASH, DEFAULT_INITIAL_PACKET, DialectTable, SyncState, init_state

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 2.0
DEFAULT_PART_TIMEOUT = 1.0
HISTORY = 1024  # outcomes/results kept per session; older ones are dropped


class Status(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    CHANNEL_ERROR = "channel_error"


@dataclass
class HandshakeOutcome:
    status: Status
    recovered: bytes | None = None
    index_used: int | None = None
    message: object = None
    units: list[bytes] = field(default_factory=list)
    response: list[bytes] = field(default_factory=list)
    dialected: bool = True

    @property
    def accepted(self) -> bool:
        return self.status is Status.ACCEPTED


def send_message(state: SyncState, table: DialectTable, m: bytes) -> list[bytes]:
    """Dialect ``m`` with the current index and return its encoded frames.

    The cache is updated immediately: a sender never learns whether the
    packet arrived.
    """
    _, spec = state.next_index(table)
    units = apply(spec, m)
    state.update(b"".join(units))
    return [encode_frame(u) for u in units]


def recv_message(state: SyncState, table: DialectTable, payloads, parse,
                 selection: tuple[int, DialectSpec] | None = None) -> HandshakeOutcome:
    """Invert and validate one received dialect-bearing handshake.

    The received payloads are cached whatever the outcome, which is what
    bounds a desynchronization to ``state.depth`` handshakes.
    """
    n, spec = selection if selection is not None else state.next_index(table)
    units = list(payloads)
    state.update(units[0] if len(units) == 1 else b"".join(units))
    try:
        recovered = invert(spec, units)
        message = parse(recovered)
    except (MPDError, ValueError) as exc:
        log.debug("handshake rejected under dialect %d (%s): %s", n, spec, exc)
        return HandshakeOutcome(Status.REJECTED, index_used=n, units=units)
    return HandshakeOutcome(Status.ACCEPTED, recovered, n, message, units)


def _expects_parts(spec: DialectSpec, first: bytes) -> bool:
    # A split receiver sees only the first frame: a frame of exactly t1 bytes
    # opens a split handshake, anything else is a single unit.
    return spec.kind is Kind.SPLIT and len(first) == spec.params[0]


class ServerSession:
    """Receiver side of one connection.

    ``service`` supplies the protocol: ``expects_dialect()``, ``parse()``,
    ``handle()``, ``mirror()`` and a ``closed`` flag (see
    :mod:`mpd.protocols`).  With ``state=None`` the session is a plain
    framing-only server.
    """

    def __init__(self, service, state: SyncState | None = None, table: DialectTable | None = None,
                 history: int | None = HISTORY):
        if (state is None) != (table is None):
            raise ValueError("state and table go together")
        self.service = service
        self.state = state
        self.table = table
        self.outcomes: deque[HandshakeOutcome] = deque(maxlen=history)
        self.handled = 0  # outcomes ever recorded, including dropped ones
        self._pending: tuple[int, DialectSpec, list[bytes]] | None = None

    @property
    def closed(self) -> bool:
        return self.service.closed

    @property
    def pending(self) -> bool:
        return self._pending is not None

    def receive(self, payload: bytes) -> list[bytes]:
        payload = bytes(payload)
        if self._pending is not None:
            n, spec, parts = self._pending
            parts.append(payload)
            if len(parts) < 4 and split_part_lengths_ok(spec, parts):
                return [ACK]
            self._pending = None
            return self._complete(n, spec, parts)
        if self.state is not None and self.service.expects_dialect():
            n, spec = self.state.next_index(self.table)
            if spec.kind is Kind.SPLIT and _expects_parts(spec, payload):
                self._pending = (n, spec, [payload])
                return [ACK]
            return self._complete(n, spec, [payload])
        return self._plain(payload)

    def expire(self) -> list[bytes]:
        """The peer went quiet: close an incomplete split handshake as rejected."""
        if self._pending is None:
            return []
        n, spec, parts = self._pending
        self._pending = None
        return self._complete(n, spec, parts)

    def _complete(self, n, spec, parts) -> list[bytes]:
        outcome = recv_message(self.state, self.table, parts, self.service.parse, (n, spec))
        if outcome.status is Status.ACCEPTED:
            response = self.service.handle(outcome.message)
            if response is not None:
                mirrored = self.service.mirror(outcome.message)
                outcome.response = apply(spec, response) if mirrored else [response]
        self._record(outcome)
        return list(outcome.response)

    def _record(self, outcome: HandshakeOutcome):
        self.outcomes.append(outcome)
        self.handled += 1

    def _plain(self, payload: bytes) -> list[bytes]:
        try:
            message = self.service.parse(payload)
        except ParseError as exc:
            log.info("closing connection on unparsable plain packet: %s", exc)
            self.service.close()
            self._record(HandshakeOutcome(Status.CHANNEL_ERROR, units=[payload], dialected=False))
            return []
        response = self.service.handle(message)
        outcome = HandshakeOutcome(Status.ACCEPTED, payload, None, message, [payload], dialected=False)
        if response is not None:
            outcome.response = [response]
        self._record(outcome)
        return list(outcome.response)


@dataclass
class ClientResult:
    request: bytes
    index: int | None
    spec: DialectSpec | None
    sent: list[bytes]
    response: object = None
    raw_response: bytes | None = None
    timed_out: bool = False


class ClientSession:
    """Sender side of one connection.

    Pass ``fixed_spec`` to model a client that always uses one dialect and
    keeps no sync state (an attacker without the key).
    """

    def __init__(self, profile, state: SyncState | None = None, table: DialectTable | None = None,
                 fixed_spec: DialectSpec | None = None, history: int | None = HISTORY):
        self.profile = profile
        self.state = state
        self.table = table if table is not None else profile.table
        self.fixed_spec = fixed_spec
        self.results: deque[ClientResult] = deque(maxlen=history)
        self._hs: _ClientHandshake | None = None

    @property
    def busy(self) -> bool:
        return self._hs is not None

    @property
    def last(self) -> ClientResult | None:
        return self.results[-1] if self.results else None

    def _select(self, request: bytes) -> tuple[int | None, DialectSpec | None]:
        if self.fixed_spec is not None:
            return None, self.fixed_spec
        if self.state is None or not self.profile.request_is_dialected(request):
            return None, None
        return self.state.next_index(self.table)

    def request(self, request: bytes) -> list[bytes]:
        if self._hs is not None:
            raise RuntimeError("previous handshake still in progress")
        request = bytes(request)
        n, spec = self._select(request)
        units = [request] if spec is None else apply(spec, request)
        self._hs = _ClientHandshake(ClientResult(request, n, spec, []), units,
                                    self.profile.response_is_mirrored(request) and spec is not None,
                                    self.profile.expects_response(request))
        return self._send_next()

    def _send_next(self) -> list[bytes]:
        hs = self._hs
        unit = hs.units[len(hs.result.sent)]
        hs.result.sent.append(unit)
        if len(hs.result.sent) == len(hs.units) and not hs.expects_response:
            out = [unit]
            self._finish()
            return out
        return [unit]

    def receive(self, payload: bytes) -> list[bytes]:
        hs = self._hs
        if hs is None:
            log.debug("discarding stale frame of %d bytes", len(payload))
            return []
        payload = bytes(payload)
        if len(hs.result.sent) < len(hs.units):
            if payload == ACK:
                return self._send_next()
            log.debug("ignoring non-ACK frame while sending sub-packets")
            return []
        if payload == ACK and not hs.reply:
            # the receiver took our single unit for a sub-packet; it will give up
            return []
        hs.reply.append(payload)
        spec = hs.result.spec
        if hs.mirrored and _expects_parts(spec, hs.reply[0]) and len(hs.reply) < 4:
            return []
        if hs.mirrored:
            try:
                raw = invert(spec, hs.reply)
                hs.result.response = self.profile.parse_response(raw)
            except (MPDError, ValueError) as exc:
                log.info("undecodable dialected reply: %s", exc)
                self._finish()
                return []
        else:
            raw = payload
            try:
                hs.result.response = self.profile.parse_response(raw)
            except ParseError as exc:
                self._finish()
                raise ChannelError(f"incompatible peer: {exc}") from exc
        hs.result.raw_response = raw
        self._finish()
        return []

    def expire(self) -> None:
        """No (further) reply arrived in time."""
        if self._hs is not None:
            self._hs.result.timed_out = True
            self._finish()

    def _finish(self):
        hs, self._hs = self._hs, None
        res = hs.result
        if res.spec is not None and self.fixed_spec is None:
            # cache what actually went on the wire, assumed delivered
            sent = res.sent
            self.state.update(sent[0] if len(sent) == 1 else b"".join(sent))
        self.results.append(res)


@dataclass
class _ClientHandshake:
    result: ClientResult
    units: list[bytes]
    mirrored: bool
    expects_response: bool
    reply: list[bytes] = field(default_factory=list)


class Transport(Protocol):
    def send(self, payload: bytes) -> None: ...

    def recv(self, timeout: float | None = None) -> bytes | None: ...


def run_handshake_client(session: ClientSession, request: bytes, transport: Transport,
                         timeout: float = DEFAULT_TIMEOUT):
    """Run one handshake; returns the parsed reply, or ``None`` on timeout.

    A silently rejected request looks exactly like a lost one: the wait for
    a reply times out.
    """
    for payload in session.request(request):
        transport.send(payload)
    while session.busy:
        payload = transport.recv(timeout)
        if payload is None:
            session.expire()
            break
        for out in session.receive(payload):
            transport.send(out)
    return session.last.response


def run_handshake_server(session: ServerSession, transport: Transport,
                         part_timeout: float = DEFAULT_PART_TIMEOUT,
                         idle_timeout: float | None = None) -> None:
    """Serve handshakes until the service closes or the peer disconnects.

    ``part_timeout`` bounds the wait for the next sub-packet of a split
    handshake and must stay below the client's reply timeout.
    """
    try:
        while not session.closed:
            payload = transport.recv(part_timeout if session.pending else idle_timeout)
            if payload is None:
                if not session.pending:
                    break
                out = session.expire()
            else:
                out = session.receive(payload)
            for frame in out:
                transport.send(frame)
    except ChannelError as exc:
        log.debug("connection ended: %s", exc)
    finally:
        if session.pending:
            session.expire()
        if not session.closed:
            session.service.close()



@dataclass(frozen=True)
class DialectConfig:
    """Everything two endpoints must agree on before they can talk."""

    key: bytes
    table: DialectTable
    depth: int = 1
    initial_packet: bytes = DEFAULT_INITIAL_PACKET
    hash_name: str = DEFAULT_HASH

    def new_state(self) -> SyncState:
        return init_state(self.key, self.depth, self.initial_packet, self.hash_name)

    def server(self, service) -> ServerSession:
        return ServerSession(service, self.new_state(), self.table)

    def client(self, profile) -> ClientSession:
        return ClientSession(profile, self.new_state(), self.table)
