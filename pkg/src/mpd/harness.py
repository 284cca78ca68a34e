"""Deterministic fault and adversary simulation.

A scenario runs one genuine client against one server session through a
:class:`ChannelPolicy` that can erase, patch or duplicate client frames.
Everything is in-process and clock-free: a "timeout" is simply a client
that is still waiting once no frame is left in flight, so a given config
always yields the same trace.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
import string
import tempfile
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

from .dialects import IDENTITY, DialectSpec, Kind
from .errors import ConfigError, MPDError, UnknownProtocol
from .protocols import Profile, named_table, profile as get_profile
from .protocols.ftp import FtpService, rget
from .protocols.mqtt import (CONNACK_ACCEPTED, Broker, MqttPacket, MqttService, PacketType,
                             mqtt_render)
from .session import ClientSession, DialectConfig, ServerSession
from .sync import DEFAULT_HASH, DEFAULT_INITIAL_PACKET, DialectTable, load_key, parse_key

REGRESSION_KEY = b"mpd-regression-key"

DEFAULT_FILES = {
    "sample.txt": b"sample file contents\n",
    "blog.css": b"body { margin: 0; }\n",
    "template.pdf": b"%PDF-1.4 placeholder\n",
}


class Action(enum.Enum):
    DELIVER = "deliver"
    DROP = "drop"
    MODIFY = "modify"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class Transfer:
    action: Action
    payloads: tuple[bytes, ...]


def _parse_ordinal(value):
    """``3`` -> 3 (whole handshake), ``"3:2"`` -> (3, 2) (second frame of it)."""
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    if isinstance(value, str) and ":" in value:
        hs, part = value.split(":", 1)
        return int(hs), int(part)
    return int(value)


def _format_ordinal(key) -> str | int:
    return f"{key[0]}:{key[1]}" if isinstance(key, tuple) else key


@dataclass(frozen=True)
class ChannelPolicy:
    """Fault schedule keyed by handshake ordinal (1-based).

    A key is either an int, meaning every frame of that handshake, or a
    ``(handshake, frame)`` pair addressing one sub-frame of a split
    handshake.  ``loss_rate`` adds seeded random erasures on top.
    """

    drop: frozenset = frozenset()
    modify: dict = field(default_factory=dict)
    replay: frozenset = frozenset()
    loss_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "drop", frozenset(_parse_ordinal(k) for k in self.drop))
        object.__setattr__(self, "replay", frozenset(_parse_ordinal(k) for k in self.replay))
        modify = {}
        for k, (offset, patch) in self.modify.items():
            if isinstance(patch, str):
                patch = bytes.fromhex(patch)
            modify[_parse_ordinal(k)] = (int(offset), bytes(patch))
        object.__setattr__(self, "modify", modify)
        seen = {}
        for name, keys in (("drop", self.drop), ("modify", modify), ("replay", self.replay)):
            for key in keys:
                hs = key[0] if isinstance(key, tuple) else key
                if hs in seen and seen[hs] != name:
                    raise ConfigError(f"handshake {hs} is scheduled for both {seen[hs]} and {name}")
                seen[hs] = name
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigError(f"loss_rate {self.loss_rate} outside [0, 1]")

    @property
    def scheduled(self) -> set[int]:
        keys = set(self.drop) | set(self.modify) | set(self.replay)
        return {k[0] if isinstance(k, tuple) else k for k in keys}

    @classmethod
    def from_dict(cls, d: dict | None) -> ChannelPolicy:
        d = dict(d or {})
        unknown = set(d) - {"drop", "modify", "replay", "loss_rate", "seed"}
        if unknown:
            raise ConfigError(f"unknown channel keys {sorted(unknown)}")
        return cls(frozenset(d.get("drop", ())), dict(d.get("modify", {})),
                   frozenset(d.get("replay", ())), float(d.get("loss_rate", 0.0)),
                   int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {
            "drop": sorted((_format_ordinal(k) for k in self.drop), key=str),
            "modify": {str(_format_ordinal(k)): [off, patch.hex()] for k, (off, patch) in self.modify.items()},
            "replay": sorted((_format_ordinal(k) for k in self.replay), key=str),
            "loss_rate": self.loss_rate,
            "seed": self.seed,
        }


def _lookup(schedule, ordinal: int, part: int):
    if (ordinal, part) in schedule:
        return (ordinal, part)
    if ordinal in schedule:
        return ordinal
    return None


def channel_transfer(policy: ChannelPolicy, ordinal: int, frame: bytes, part: int = 1) -> Transfer:
    """What the channel does to frame ``part`` of handshake ``ordinal``."""
    if _lookup(policy.drop, ordinal, part) is not None:
        return Transfer(Action.DROP, ())
    key = _lookup(policy.modify, ordinal, part)
    if key is not None:
        offset, patch = policy.modify[key]
        return Transfer(Action.MODIFY, (frame[:offset] + patch + frame[offset + len(patch):],))
    if _lookup(policy.replay, ordinal, part) is not None:
        return Transfer(Action.DUPLICATE, (frame, frame))
    if policy.loss_rate and random.Random(f"{policy.seed}:{ordinal}:{part}").random() < policy.loss_rate:
        return Transfer(Action.DROP, ())
    return Transfer(Action.DELIVER, (frame,))


@dataclass
class ScenarioMetrics:
    sent: int = 0
    accepted: int = 0
    rejected: int = 0
    timeouts: int = 0
    closed: int = 0
    resync_lag: list = field(default_factory=list)
    broker_registered_peak: int = 0
    connacks: int = 0
    genuine_sent: int = 0
    genuine_accepted: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _cache_tag(session) -> str | None:
    if session.state is None:
        return None
    return hashlib.md5(session.state.cached).hexdigest()[:12]


def _preview(data: bytes, limit: int = 40) -> str:
    text = data[:limit].decode("latin-1")
    return "".join(c if c in string.printable and c not in "\r\n\t\x0b\x0c" else "." for c in text)


class Simulator:
    """Moves frames between a client and a server session, applying faults."""

    def __init__(self, client: ClientSession, server: ServerSession, policy: ChannelPolicy | None = None):
        self.client = client
        self.server = server
        self.policy = policy or ChannelPolicy()

    def handshake(self, request: bytes, ordinal: int | None = None) -> dict:
        """Run one request to completion; ``ordinal=None`` bypasses the channel."""
        server, client = self.server, self.client
        before = server.handled
        to_server: deque[bytes] = deque()
        to_client: deque[bytes] = deque()
        faults = []
        part = 0

        def push(frames):
            nonlocal part
            for frame in frames:
                part += 1
                if ordinal is None:
                    to_server.append(frame)
                    continue
                t = channel_transfer(self.policy, ordinal, frame, part)
                if t.action is not Action.DELIVER:
                    faults.append([part, t.action.value])
                to_server.extend(t.payloads)

        push(client.request(request))
        while to_server or to_client:
            if to_client:
                push(client.receive(to_client.popleft()))
            elif not server.closed:
                to_client.extend(server.receive(to_server.popleft()))
            else:
                to_server.clear()
        if client.busy:
            client.expire()
        server.expire()

        res = client.last
        fresh = server.handled - before
        outs = [server.outcomes[-i] for i in range(fresh, 0, -1)]
        first = outs[0] if outs else None
        return {
            "ordinal": ordinal,
            "request": _preview(request),
            "client_index": res.index,
            "server_index": first.index_used if first else None,
            "outcome": first.status.value if first else "timeout",
            "client_timeout": res.timed_out,
            "faults": faults,
            "extra": [{"server_index": o.index_used, "outcome": o.status.value} for o in outs[1:]],
            "client_cache": _cache_tag(client),
            "server_cache": _cache_tag(server),
            "synced": client.state is None or client.state.snapshot() == server.state.snapshot(),
            "response": res.response,
        }


@dataclass(frozen=True)
class Step:
    """A dialect-bearing request plus plain follow-ups sent if ``proceed(reply)``."""

    request: bytes
    followups: tuple[bytes, ...] = ()
    proceed: Callable[[object], bool] | None = None


def _connack_ok(reply) -> bool:
    return isinstance(reply, MqttPacket) and reply.control is PacketType.CONNACK and reply.code == CONNACK_ACCEPTED


def mqtt_cycle(client_id: str, topic: str | None = None, payload: bytes = b"hi") -> Step:
    topic = topic or f"sensors/{client_id}"
    return Step(mqtt_render(MqttPacket.connect(client_id)),
                (mqtt_render(MqttPacket.publish(topic, payload)), mqtt_render(MqttPacket.disconnect())),
                _connack_ok)


def build_workload(protocol: str, spec: dict, files) -> list[Step]:
    spec = dict(spec or {})
    if "messages" in spec:
        if protocol == "mqtt":
            return [mqtt_cycle(str(cid)) for cid in spec["messages"]]
        return [Step(m.encode() if isinstance(m, str) else bytes(m)) for m in spec["messages"]]
    count = int(spec.get("count", 4))
    rng = random.Random(int(spec.get("seed", 0)))
    if protocol == "mqtt":
        return [mqtt_cycle(f"dev{rng.randrange(10**6):06d}") for _ in range(count)]
    names = sorted(files)
    return [Step(rget(rng.choice(names))) for _ in range(count)]


@dataclass
class ScenarioConfig:
    protocol: str = "ftp"
    key: bytes = REGRESSION_KEY
    table: DialectTable | None = None
    depth: int = 1
    initial_packet: bytes = DEFAULT_INITIAL_PACKET
    hash_name: str = DEFAULT_HASH
    channel: ChannelPolicy = field(default_factory=ChannelPolicy)
    workload: dict = field(default_factory=lambda: {"count": 4})
    root: str | None = None
    files: dict = field(default_factory=lambda: dict(DEFAULT_FILES))
    capacity: int = 64
    dialects: bool = True

    def __post_init__(self):
        prof = get_profile(self.protocol)
        if self.table is None:
            self.table = prof.table
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.protocol == "mqtt" and any(s.kind is Kind.SPLIT for s in self.table.entries):
            raise ConfigError("the mqtt profile only supports shuffle and identity dialects")

    @property
    def profile(self) -> Profile:
        return get_profile(self.protocol).with_table(self.table)

    def dialect_config(self) -> DialectConfig:
        return DialectConfig(self.key, self.table, self.depth, self.initial_packet, self.hash_name)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> ScenarioConfig:
        d = dict(d)
        base = Path(base_dir or ".")
        known = {"protocol", "key", "key_path", "table", "table_path", "depth", "initial_packet",
                 "hash", "channel", "workload", "root", "files", "capacity", "dialects"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        try:
            protocol = d.get("protocol", "ftp")
            get_profile(protocol)
            if "key_path" in d:
                key = load_key(base / d["key_path"])
            elif "key" in d:
                key = parse_key(d["key"].encode())
            else:
                key = REGRESSION_KEY
            if "table_path" in d:
                table = DialectTable.load(base / d["table_path"])
            elif "table" in d:
                table = named_table(d["table"])
            else:
                table = None
            files = {k: v.encode() if isinstance(v, str) else bytes(v)
                     for k, v in d.get("files", {}).items()} or dict(DEFAULT_FILES)
            root = d.get("root")
            return cls(
                protocol=protocol, key=key, table=table, depth=int(d.get("depth", 1)),
                initial_packet=d.get("initial_packet", DEFAULT_INITIAL_PACKET.decode()).encode(),
                hash_name=d.get("hash", DEFAULT_HASH),
                channel=ChannelPolicy.from_dict(d.get("channel")),
                workload=dict(d.get("workload", {"count": 4})),
                root=str(base / root) if root else None, files=files,
                capacity=int(d.get("capacity", 64)), dialects=bool(d.get("dialects", True)),
            )
        except (UnknownProtocol, OSError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ScenarioConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)


@dataclass
class ScenarioResult:
    metrics: ScenarioMetrics
    trace: list[dict]
    client: ClientSession
    server: ServerSession

    def trace_lines(self) -> str:
        """One JSON object per handshake, stable across runs."""
        rows = []
        for rec in self.trace:
            rec = {k: v for k, v in rec.items() if k != "response"}
            rows.append(json.dumps(rec, sort_keys=True))
        return "".join(r + "\n" for r in rows)


@contextmanager
def _ftp_root(config: ScenarioConfig) -> Iterator[Path]:
    if config.root:
        yield Path(config.root)
        return
    with tempfile.TemporaryDirectory(prefix="mpd-ftp-") as tmp:
        for name, data in config.files.items():
            (Path(tmp) / name).write_bytes(data)
        yield Path(tmp)


def resync_lags(trace: list[dict], fault_ordinals) -> list[tuple[int, int]]:
    """For each faulted handshake, how many rejections immediately followed it."""
    by_ordinal = {rec["ordinal"]: rec for rec in trace}
    lags = []
    for i in sorted(fault_ordinals):
        lag = 0
        while by_ordinal.get(i + lag + 1, {}).get("outcome") == "rejected":
            lag += 1
        lags.append((i, lag))
    return lags


def run_scenario(config) -> ScenarioResult:
    """Run a full client / channel / server pipeline and collect a trace."""
    if isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    started = time.perf_counter()
    profile = config.profile
    dialects = config.dialect_config() if config.dialects else None
    broker = Broker(config.capacity)
    with _ftp_root(config) as root:
        service = FtpService(root) if config.protocol == "ftp" else MqttService(broker)
        steps = build_workload(config.protocol, config.workload, config.files)
        if dialects is not None:
            client, server = dialects.client(profile), dialects.server(service)
        else:
            client, server = ClientSession(profile), ServerSession(service)
        sim = Simulator(client, server, config.channel)
        metrics = ScenarioMetrics()
        trace = []
        for ordinal, step in enumerate(steps, 1):
            if server.closed:
                break
            rec = sim.handshake(step.request, ordinal)
            trace.append(rec)
            metrics.sent += 1
            outcome = rec["outcome"]
            if outcome == "accepted":
                metrics.accepted += 1
            elif outcome == "rejected":
                metrics.rejected += 1
            elif outcome == "timeout":
                metrics.timeouts += 1
            else:
                metrics.closed += 1
            if step.followups and step.proceed is not None and step.proceed(rec["response"]):
                for follow in step.followups:
                    sim.handshake(follow)
    faulted = {rec["ordinal"] for rec in trace if rec["faults"]}
    metrics.resync_lag = resync_lags(trace, faulted)
    metrics.broker_registered_peak = broker.peak
    metrics.connacks = broker.connacks
    metrics.wall_time = time.perf_counter() - started
    return ScenarioResult(metrics, trace, client, server)


def attack_fixed_dialect(target: Callable[[], ServerSession], count: int,
                         spoofed_spec: DialectSpec = IDENTITY,
                         command: bytes = b"rget,secret.txt",
                         profile: Profile | None = None,
                         genuine: tuple[ClientSession, ServerSession] | None = None,
                         genuine_request: bytes = b"rget,sample.txt") -> ScenarioMetrics:
    """Inject ``count`` well-formed commands in one fixed dialect.

    ``target`` opens a server connection; the attacker keeps one connection
    for the whole run.  When ``genuine`` is given, a keyed client on its own
    connection sends one request after every injected command.
    """
    from .protocols import FTP
    started = time.perf_counter()
    attacker = ClientSession(profile or FTP, fixed_spec=spoofed_spec)
    server = target()
    sim = Simulator(attacker, server)
    gsim = Simulator(*genuine) if genuine else None
    metrics = ScenarioMetrics()
    for i in range(1, count + 1):
        if server.closed:
            server = target()
            sim = Simulator(attacker, server)
        rec = sim.handshake(command, i)
        metrics.sent += 1
        if rec["outcome"] == "accepted":
            metrics.accepted += 1
        elif rec["outcome"] == "rejected":
            metrics.rejected += 1
        else:
            metrics.closed += 1
        if gsim is not None:
            grec = gsim.handshake(genuine_request, i)
            metrics.genuine_sent += 1
            metrics.genuine_accepted += grec["outcome"] == "accepted" and grec["response"] is not None
    metrics.wall_time = time.perf_counter() - started
    return metrics


def attack_connect_flood(target: Callable[[], ServerSession], count: int, rate: float | None = None,
                         genuine: tuple[ClientSession, ServerSession] | None = None,
                         genuine_every: int = 100) -> ScenarioMetrics:
    """Flood undialected CONNECTs, each from a fresh connection and client id.

    Flood connections are never closed, so every accepted CONNECT holds a
    broker slot.  ``broker_registered_peak`` counts flood registrations
    only; ``rate`` is recorded for reporting and ignored by the simulation.
    """
    from .protocols import MQTT
    started = time.perf_counter()
    metrics = ScenarioMetrics()
    connections = []
    gsim = Simulator(*genuine) if genuine else None
    held = 0
    for i in range(1, count + 1):
        server = target()
        connections.append(server)
        attacker = ClientSession(MQTT, fixed_spec=IDENTITY)
        rec = Simulator(attacker, server).handshake(mqtt_render(MqttPacket.connect(f"flood-{i:06d}")), i)
        metrics.sent += 1
        if rec["outcome"] == "accepted":
            metrics.accepted += 1
        else:
            metrics.rejected += 1
        reply = rec["response"]
        if isinstance(reply, MqttPacket) and reply.control is PacketType.CONNACK:
            metrics.connacks += 1
            held += reply.code == CONNACK_ACCEPTED
            metrics.broker_registered_peak = max(metrics.broker_registered_peak, held)
        if gsim is not None and i % genuine_every == 0:
            metrics.genuine_sent += 1
            step = mqtt_cycle(f"genuine-{i:06d}")
            grec = gsim.handshake(step.request, i)
            if step.proceed(grec["response"]):
                metrics.genuine_accepted += 1
                for follow in step.followups:
                    gsim.handshake(follow)
    metrics.wall_time = time.perf_counter() - started
    return metrics


def acceptance_bound(table: DialectTable, command: bytes, spoofed_spec: DialectSpec, parse) -> float:
    """Fraction of table entries under which the spoofed command would parse.

    This is an upper bound on how often a keyless attacker using
    ``spoofed_spec`` gets a command accepted.
    """
    from .dialects import apply, invert
    units = apply(spoofed_spec, command)
    good = 0
    for spec in table.entries:
        # mirror ServerSession: a first frame of exactly t1 bytes opens a split
        if spec.kind is Kind.SPLIT and len(units[0]) == spec.params[0]:
            received = units
            if len(received) != 4:
                continue
        else:
            received = units[:1]
        try:
            parse(invert(spec, received))
        except (MPDError, ValueError):
            continue
        good += 1
    return good / table.n_max
