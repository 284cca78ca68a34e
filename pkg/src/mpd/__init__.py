"""Keyed, per-message protocol dialects for moving-target defense."""

__version__ = "0.1.0"

from .dialects import IDENTITY, DialectSpec, Kind, apply, invert, validate_params
from .errors import MPDError
from .sync import (DialectTable, SyncState, cache_update, init_state, keyed_hash, map_index,
                   next_index, table_add, table_remove)
from .session import (ClientSession, DialectConfig, ServerSession, Status, recv_message,
                      send_message)

__all__ = [
    "IDENTITY", "DialectSpec", "Kind", "apply", "invert", "validate_params", "MPDError",
    "DialectTable", "SyncState", "cache_update", "init_state", "keyed_hash", "map_index",
    "next_index", "table_add", "table_remove", "ClientSession", "DialectConfig",
    "ServerSession", "Status", "recv_message", "send_message",
]
