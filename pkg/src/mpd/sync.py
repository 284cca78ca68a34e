"""Self-synchronizing dialect selection.

Both endpoints cache the last ``h`` wire payloads, feed them through a
keyed hash with the pre-shared key, and map the resulting integer onto a
dialect index.  Because the index depends only on recent traffic, the two
sides re-converge ``h`` handshakes after any loss or corruption.
"""

from __future__ import annotations

import functools
import hashlib
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .dialects import DialectSpec
from .errors import ConfigError, EmptyKey, InvalidDepth, LastDialect

DEFAULT_HASH = "md5"
DEFAULT_INITIAL_PACKET = b"MPD-INIT"
DEFAULT_DEPTH = 1

_IPAD = 0x36
_OPAD = 0x5C


def _prepare_key(key: bytes, hash_name: str) -> bytes:
    # RFC 2104 key handling: long keys are hashed first, then zero-padded.
    block = hashlib.new(hash_name).block_size
    if len(key) > block:
        key = hashlib.new(hash_name, key).digest()
    return key.ljust(block, b"\0")


@functools.lru_cache(maxsize=64)
def _prefix(key: bytes, hash_name: str):
    # (K ^ opad) || H(K ^ ipad) does not depend on the message: hash it once.
    k = _prepare_key(key, hash_name)
    inner = hashlib.new(hash_name, bytes(b ^ _IPAD for b in k)).digest()
    outer = hashlib.new(hash_name, bytes(b ^ _OPAD for b in k))
    outer.update(inner)
    return outer


def keyed_hash_digest(key: bytes, message: bytes, hash_name: str = DEFAULT_HASH) -> bytes:
    """``H((K ^ opad) || H(K ^ ipad) || M)``.

    Unlike RFC 2104 HMAC, the inner hash covers only the padded key; the
    message is appended outside it.
    """
    if not key:
        raise EmptyKey("the pre-shared key must not be empty")
    h = _prefix(bytes(key), hash_name).copy()
    h.update(message)
    return h.digest()


def keyed_hash(key: bytes, message: bytes, hash_name: str = DEFAULT_HASH) -> int:
    """Pseudo-random value in ``[0, s_max(hash_name)]`` (big-endian digest)."""
    return int.from_bytes(keyed_hash_digest(key, message, hash_name), "big")


@functools.lru_cache(maxsize=None)
def s_max(hash_name: str = DEFAULT_HASH) -> int:
    return (1 << (8 * hashlib.new(hash_name).digest_size)) - 1


def map_index(s: int, n_max: int, smax: int) -> int:
    """Consistent-hash quantization of ``s`` onto dialect indices ``1..n_max``."""
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if not 0 <= s <= smax:
        raise ValueError(f"value {s} outside [0, {smax}]")
    return s // (smax // n_max + 1) + 1


@dataclass(frozen=True)
class DialectTable:
    """Ordered dialect list; position ``n`` (1-based) is dialect index ``n``."""

    entries: tuple[DialectSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ConfigError("a dialect table needs at least one entry")
        for spec in self.entries:
            if not spec.is_well_formed():
                raise ConfigError(f"malformed dialect {spec}")

    @property
    def n_max(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, n: int) -> DialectSpec:
        if not 1 <= n <= self.n_max:
            raise IndexError(f"dialect index {n} outside 1..{self.n_max}")
        return self.entries[n - 1]

    def add(self, spec: DialectSpec) -> DialectTable:
        return DialectTable(self.entries + (spec,))

    def remove(self) -> DialectTable:
        if self.n_max < 2:
            raise LastDialect("cannot remove the only dialect")
        return DialectTable(self.entries[:-1])

    def dumps(self) -> str:
        return "".join(f"{spec}\n" for spec in self.entries)

    @classmethod
    def loads(cls, text: str) -> DialectTable:
        specs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                specs.append(DialectSpec.parse(line))
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        return cls(tuple(specs))

    @classmethod
    def load(cls, path) -> DialectTable:
        return cls.loads(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.dumps())


def table_add(table: DialectTable, spec: DialectSpec) -> DialectTable:
    return table.add(spec)


def table_remove(table: DialectTable) -> DialectTable:
    return table.remove()


@dataclass
class SyncState:
    """Per-connection selection state: key, cache depth and the payload FIFO.

    Not thread-safe; one instance belongs to one connection.
    """

    key: bytes
    depth: int
    buffer: deque = field(default_factory=deque)
    hash_name: str = DEFAULT_HASH

    def __post_init__(self):
        if not self.key:
            raise EmptyKey("the pre-shared key must not be empty")
        if self.depth < 1:
            raise InvalidDepth(f"buffer depth must be >= 1, got {self.depth}")
        self._prefix = _prefix(bytes(self.key), self.hash_name)  # also rejects unknown algorithms
        self._smax = s_max(self.hash_name)
        self.buffer = deque((bytes(b) for b in self.buffer), maxlen=self.depth)
        if len(self.buffer) != self.depth:
            raise InvalidDepth(f"buffer holds {len(self.buffer)} entries, depth is {self.depth}")
        self._s = None  # memoised pseudo_random() for the current buffer

    @property
    def cached(self) -> bytes:
        """Cached payloads concatenated oldest first."""
        return b"".join(self.buffer)

    def pseudo_random(self) -> int:
        if self._s is None:
            h = self._prefix.copy()
            for payload in self.buffer:  # same as hashing the concatenation
                h.update(payload)
            self._s = int.from_bytes(h.digest(), "big")
        return self._s

    def next_index(self, table: DialectTable) -> tuple[int, DialectSpec]:
        # runs once per handshake on both ends, so pseudo_random() and
        # map_index() are inlined
        s = self._s
        if s is None:
            h = self._prefix.copy()
            for payload in self.buffer:
                h.update(payload)
            s = self._s = int.from_bytes(h.digest(), "big")
        entries = table.entries
        n = s // (self._smax // len(entries) + 1) + 1
        return n, entries[n - 1]

    def update(self, wire_payload: bytes) -> None:
        self.buffer.append(bytes(wire_payload))
        self._s = None

    def snapshot(self) -> tuple[bytes, ...]:
        return tuple(self.buffer)


def init_state(key: bytes, depth: int = DEFAULT_DEPTH,
               initial_packet: bytes = DEFAULT_INITIAL_PACKET,
               hash_name: str = DEFAULT_HASH) -> SyncState:
    if depth < 1:
        raise InvalidDepth(f"buffer depth must be >= 1, got {depth}")
    return SyncState(key, depth, deque([initial_packet] * depth), hash_name)


def next_index(state: SyncState, table: DialectTable) -> tuple[int, DialectSpec]:
    return state.next_index(table)


def cache_update(state: SyncState, wire_payload: bytes) -> SyncState:
    state.update(wire_payload)
    return state


def parse_key(data: bytes) -> bytes:
    """Interpret key material as hex when it looks like hex, raw bytes otherwise."""
    text = data.strip()
    if text and len(text) % 2 == 0:
        try:
            return bytes.fromhex(text.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            pass
    if not data:
        raise EmptyKey("key file is empty")
    return bytes(data)


def load_key(path=None, env: str = "MPD_KEY") -> bytes:
    """Read the pre-shared key from ``path``, or hex from ``$MPD_KEY``."""
    if path is not None:
        return parse_key(Path(path).read_bytes())
    value = os.environ.get(env)
    if not value:
        raise ConfigError(f"no key given and ${env} is unset")
    try:
        key = bytes.fromhex(value.strip())
    except ValueError:
        raise ConfigError(f"${env} must be hex-encoded") from None
    if not key:
        raise EmptyKey(f"${env} is empty")
    return key
