"""Mini-MQTT: fixed-header packets with a one-byte remaining length.

Wire layout is ``control || remaining_length || body`` where ``control`` is
the full first byte (flags must be zero) and ``remaining_length`` counts the
body bytes, so bodies are limited to 255 bytes.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass

from ..errors import ParseError

DEFAULT_CAPACITY = 64

CONNACK_ACCEPTED = 0
CONNACK_SERVER_UNAVAILABLE = 5


class PacketType(enum.IntEnum):
    CONNECT = 0x10
    CONNACK = 0x20
    PUBLISH = 0x30
    PUBACK = 0x40
    DISCONNECT = 0xE0


def _printable(raw: bytes) -> bool:
    return bool(raw) and all(0x21 <= b <= 0x7E for b in raw)


@dataclass(frozen=True)
class MqttPacket:
    control: PacketType
    body: bytes = b""

    @property
    def remaining_length(self) -> int:
        return len(self.body)

    @classmethod
    def connect(cls, client_id: str) -> MqttPacket:
        return cls(PacketType.CONNECT, client_id.encode("ascii"))

    @classmethod
    def connack(cls, code: int = CONNACK_ACCEPTED) -> MqttPacket:
        return cls(PacketType.CONNACK, bytes([code]))

    @classmethod
    def publish(cls, topic: str, payload: bytes = b"") -> MqttPacket:
        t = topic.encode("ascii")
        return cls(PacketType.PUBLISH, struct.pack("!H", len(t)) + t + payload)

    @classmethod
    def puback(cls) -> MqttPacket:
        return cls(PacketType.PUBACK)

    @classmethod
    def disconnect(cls) -> MqttPacket:
        return cls(PacketType.DISCONNECT)

    @property
    def client_id(self) -> str:
        return self.body.decode("ascii")

    @property
    def code(self) -> int:
        return self.body[0]

    @property
    def topic(self) -> str:
        (n,) = struct.unpack_from("!H", self.body)
        return self.body[2:2 + n].decode("ascii")

    @property
    def payload(self) -> bytes:
        (n,) = struct.unpack_from("!H", self.body)
        return self.body[2 + n:]


def _check_body(ptype: PacketType, body: bytes):
    if ptype is PacketType.CONNECT:
        if not _printable(body):
            raise ParseError("CONNECT needs a printable ASCII client id")
    elif ptype is PacketType.CONNACK:
        if len(body) != 1 or body[0] > CONNACK_SERVER_UNAVAILABLE:
            raise ParseError("CONNACK carries one return code in 0..5")
    elif ptype is PacketType.PUBLISH:
        if len(body) < 2:
            raise ParseError("PUBLISH without topic length")
        (n,) = struct.unpack_from("!H", body)
        topic = body[2:2 + n]
        if n < 1 or len(topic) != n or not _printable(topic) or b"+" in topic or b"#" in topic:
            raise ParseError("PUBLISH with malformed topic")
    elif body:
        raise ParseError(f"{ptype.name} carries no body")


def mqtt_parse(data: bytes) -> MqttPacket:
    if len(data) < 2:
        raise ParseError("packet shorter than the fixed header")
    try:
        ptype = PacketType(data[0])
    except ValueError:
        raise ParseError(f"bad control byte 0x{data[0]:02x}") from None
    body = bytes(data[2:])
    if data[1] != len(body):
        raise ParseError(f"remaining length {data[1]} != body length {len(body)}")
    _check_body(ptype, body)
    return MqttPacket(ptype, body)


def mqtt_render(pkt: MqttPacket) -> bytes:
    if len(pkt.body) > 255:
        raise ValueError("body exceeds the one-byte remaining length")
    _check_body(pkt.control, pkt.body)
    return bytes([pkt.control, len(pkt.body)]) + pkt.body


class Broker:
    """Registration table and message store shared by all connections."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self.clients: set[str] = set()
        self.messages: list[tuple[str, bytes]] = []
        self.retained: dict[str, bytes] = {}
        self.peak = 0
        self.connacks = 0
        self._lock = threading.Lock()

    def register(self, client_id: str) -> int:
        with self._lock:
            self.connacks += 1
            if client_id not in self.clients:
                if len(self.clients) >= self.capacity:
                    return CONNACK_SERVER_UNAVAILABLE
                self.clients.add(client_id)
                self.peak = max(self.peak, len(self.clients))
            return CONNACK_ACCEPTED

    def deregister(self, client_id: str):
        with self._lock:
            self.clients.discard(client_id)

    def store(self, topic: str, payload: bytes):
        with self._lock:
            self.messages.append((topic, payload))
            self.retained[topic] = payload


def mqtt_broker_handle(pkt: MqttPacket, broker: Broker, session=None) -> MqttPacket | None:
    """Apply one client packet to the broker and return the reply, if any.

    ``session`` is the per-connection :class:`MqttService`; when given, its
    registered client id is tracked so DISCONNECT can deregister it.
    """
    if pkt.control is PacketType.CONNECT:
        code = broker.register(pkt.client_id)
        if session is not None and code == CONNACK_ACCEPTED:
            session.client_id = pkt.client_id
        return MqttPacket.connack(code)
    if pkt.control is PacketType.PUBLISH:
        broker.store(pkt.topic, pkt.payload)
        return MqttPacket.puback()
    if pkt.control is PacketType.DISCONNECT:
        client_id = session.client_id if session is not None else None
        if client_id is not None:
            broker.deregister(client_id)
            session.client_id = None
        return None
    raise ParseError(f"clients do not send {pkt.control.name}")


class MqttService:
    """Server-side state for one mini-MQTT connection.

    Until a CONNECT is accepted every incoming packet is treated as a
    dialect-bearing CONNECT attempt; afterwards packets travel plain.
    """

    def __init__(self, broker: Broker):
        self.broker = broker
        self.client_id: str | None = None
        self.closed = False

    def expects_dialect(self) -> bool:
        return self.client_id is None

    def parse(self, data: bytes) -> MqttPacket:
        pkt = mqtt_parse(data)
        if self.expects_dialect() != (pkt.control is PacketType.CONNECT):
            raise ParseError(f"unexpected {pkt.control.name} in this connection state")
        return pkt

    def handle(self, pkt: MqttPacket) -> bytes | None:
        reply = mqtt_broker_handle(pkt, self.broker, self)
        return None if reply is None else mqtt_render(reply)

    def mirror(self, pkt: MqttPacket) -> bool:
        return pkt.control is PacketType.CONNECT

    def close(self):
        if self.client_id is not None:
            self.broker.deregister(self.client_id)
            self.client_id = None
        self.closed = True
