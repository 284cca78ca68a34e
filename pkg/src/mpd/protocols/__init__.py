"""Reference protocols and their dialect policies."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from ..dialects import DialectSpec
from ..errors import UnknownProtocol
from ..sync import DialectTable
from . import ftp, mqtt

_S = DialectSpec.shuffle
_T = DialectSpec.split

# Every entry touches the verb or the separator, so a request decoded with
# the wrong entry stops being a valid command.
FTP_TABLE = DialectTable((
    _S(0, 1, 1), _T(1, 2, 1), _S(1, 1, 2), _S(0, 2, 2),
    _T(1, 1, 1), _T(1, 2, 2), _S(0, 1, 3), _S(1, 1, 3),
))
FTP_SHUFFLE_TABLE = DialectTable((
    _S(0, 1, 1), _S(1, 1, 1), _S(0, 1, 2), _S(0, 2, 2),
    _S(1, 1, 2), _S(2, 1, 1), _S(0, 1, 3), _S(1, 1, 3),
))
# Each entry moves the control byte.
MQTT_TABLE = DialectTable((
    _S(0, 1, 1), _S(0, 1, 2), _S(0, 1, 3), _S(0, 1, 4),
    _S(0, 2, 2), _S(0, 2, 3), _S(0, 1, 5), _S(0, 2, 4),
))

TABLES = {
    "ftp": FTP_TABLE,
    "ftp-shuffle": FTP_SHUFFLE_TABLE,
    "mqtt": MQTT_TABLE,
    "identity": DialectTable((DialectSpec.identity(),)),
}


def _always(_req: bytes) -> bool:
    return True


def _never(_req: bytes) -> bool:
    return False


def _is_connect(req: bytes) -> bool:
    return req[:1] == bytes([mqtt.PacketType.CONNECT])


def _not_disconnect(req: bytes) -> bool:
    return req[:1] != bytes([mqtt.PacketType.DISCONNECT])


@dataclass(frozen=True)
class Profile:
    """How a protocol uses dialects.

    The predicates look at a rendered request: whether it is dialect-bearing,
    whether its response is sent in the same dialect, and whether a response
    is expected at all.
    """

    name: str
    table: DialectTable
    parse_request: Callable[[bytes], object]
    parse_response: Callable[[bytes], object]
    request_is_dialected: Callable[[bytes], bool] = _always
    response_is_mirrored: Callable[[bytes], bool] = _never
    expects_response: Callable[[bytes], bool] = _always

    def with_table(self, table: DialectTable) -> Profile:
        return replace(self, table=table)


FTP = Profile("ftp", FTP_TABLE, ftp.ftp_parse, ftp.parse_response)
MQTT = Profile(
    "mqtt", MQTT_TABLE, mqtt.mqtt_parse, mqtt.mqtt_parse,
    request_is_dialected=_is_connect,
    response_is_mirrored=_is_connect,
    expects_response=_not_disconnect,
)

PROFILES = {"ftp": FTP, "mqtt": MQTT}


def profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise UnknownProtocol(f"unknown protocol {name!r}") from None


def named_table(name: str) -> DialectTable:
    try:
        return TABLES[name]
    except KeyError:
        raise UnknownProtocol(f"no built-in table {name!r}") from None
