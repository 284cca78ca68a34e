"""Command-line entry points.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import selectors
import sys
import time
from pathlib import Path

from . import __version__
from .dialects import DialectSpec
from .errors import ConfigError, MPDError
from .harness import REGRESSION_KEY, ChannelPolicy, ScenarioConfig, ScenarioMetrics, run_scenario
from .net import ChannelProxy, DialectServer, connect, parse_address
from .protocols import TABLES, named_table, profile as get_profile
from .protocols.ftp import FtpCommand, FtpService, Verb, ftp_render
from .protocols.mqtt import Broker, MqttPacket, MqttService, PacketType, mqtt_parse, mqtt_render
from .session import (DEFAULT_PART_TIMEOUT, DEFAULT_TIMEOUT, ClientSession, DialectConfig,
                      run_handshake_client)
from .sync import DEFAULT_DEPTH, DEFAULT_INITIAL_PACKET, DialectTable, load_key

log = logging.getLogger("mpd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def resolve_table(value: str | None, protocol: str) -> DialectTable:
    if value is None:
        return get_profile(protocol).table
    path = Path(value)
    if path.is_file():
        return DialectTable.load(path)
    if value in TABLES:
        return named_table(value)
    raise ConfigError(f"{value!r} is neither a table file nor one of {sorted(TABLES)}")


def _dialects(args) -> DialectConfig | None:
    if getattr(args, "plain", False):
        return None
    key = load_key(args.key)
    return DialectConfig(key, resolve_table(args.table, args.protocol), args.depth,
                         args.initial_packet.encode())


def _add_common(p: argparse.ArgumentParser, plain: bool = True):
    p.add_argument("--protocol", choices=["ftp", "mqtt"], default="ftp")
    p.add_argument("--key", help="key file (raw or hex); defaults to hex in $MPD_KEY")
    p.add_argument("--table", help=f"table file or built-in name ({', '.join(sorted(TABLES))})")
    p.add_argument("--depth", type=int, default=DEFAULT_DEPTH, help="cached packets (h)")
    p.add_argument("--initial-packet", default=DEFAULT_INITIAL_PACKET.decode())
    if plain:
        p.add_argument("--plain", action="store_true", help="framing only, no dialects")


def peak_rss_kb() -> int | None:
    """High-water RSS of this process image; unlike ru_maxrss it restarts at exec."""
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1])
    except OSError:
        pass
    return None


def cmd_serve(args) -> int:
    dialects = _dialects(args)
    if args.protocol == "ftp":
        if args.root is None:
            raise UsageError("serve --protocol ftp needs --root")
        root = Path(args.root)
        if not root.is_dir():
            raise ConfigError(f"{root} is not a directory")
        factory = lambda: FtpService(root)
    else:
        broker = Broker(args.capacity)
        factory = lambda: MqttService(broker)
    server = DialectServer(parse_address(args.listen), factory, dialects, args.part_timeout,
                           max_connections=1 if args.once else None)
    with server:
        print(f"listening on {server.address}", flush=True)
        try:
            server.serve_forever(poll_interval=0.05)
        except KeyboardInterrupt:
            pass
    if args.once:
        peak = peak_rss_kb()
        if peak is not None:
            print(f"peak rss {peak} KB", flush=True)
    return 0


def _client_session(args) -> ClientSession:
    dialects = _dialects(args)
    prof = get_profile(args.protocol)
    if dialects is None:
        return ClientSession(prof)
    return dialects.client(prof.with_table(dialects.table))


def _ftp_request(words) -> FtpCommand:
    if not words:
        raise UsageError("missing command (rget NAME | ls | quit)")
    try:
        verb = Verb(words[0])
    except ValueError:
        raise UsageError(f"unknown ftp command {words[0]!r}") from None
    if verb is Verb.RGET:
        if len(words) != 2:
            raise UsageError("usage: rget NAME")
        return FtpCommand(verb, words[1])
    if len(words) != 1:
        raise UsageError(f"{verb.value} takes no argument")
    return FtpCommand(verb)


def _with_retries(session, request, transport, args):
    for attempt in range(args.retries + 1):
        reply = run_handshake_client(session, request, transport, args.timeout)
        if reply is not None:
            return reply
        log.warning("no reply (attempt %d)", attempt + 1)
    return None


def cmd_client(args) -> int:
    session = _client_session(args)
    with connect(args.connect) as transport:
        if args.protocol == "ftp":
            cmd = _ftp_request(args.words)
            reply = _with_retries(session, ftp_render(cmd), transport, args)
            if reply is None:
                print("error: no reply from server", file=sys.stderr)
                return 2
            if not reply.ok:
                print(f"error: {reply.error}", file=sys.stderr)
                return 2
            if cmd.verb is Verb.RGET:
                out = Path(args.output or cmd.arg)
                out.write_bytes(reply.body)
                print(f"{cmd.arg}: {len(reply.body)} bytes -> {out}")
            elif cmd.verb is Verb.LS:
                print(reply.body.decode("utf-8", "replace"))
            else:
                print("BYE")
            return 0
        return _mqtt_client(session, transport, args)


def _mqtt_client(session, transport, args) -> int:
    words = list(args.words)
    if len(words) < 2 or words[0] != "connect":
        raise UsageError("usage: connect CLIENT_ID [publish TOPIC MESSAGE]...")
    client_id, rest = words[1], words[2:]
    if len(rest) % 3:
        raise UsageError("publish takes TOPIC and MESSAGE")
    reply = _with_retries(session, mqtt_render(MqttPacket.connect(client_id)), transport, args)
    if reply is None or reply.control is not PacketType.CONNACK or reply.code != 0:
        print(f"error: connection refused ({reply})", file=sys.stderr)
        return 2
    print(f"CONNACK 0 for {client_id}")
    for i in range(0, len(rest), 3):
        if rest[i] != "publish":
            raise UsageError(f"unknown mqtt action {rest[i]!r}")
        pkt = MqttPacket.publish(rest[i + 1], rest[i + 2].encode())
        reply = run_handshake_client(session, mqtt_render(pkt), transport, args.timeout)
        if reply is None:
            print("error: no PUBACK", file=sys.stderr)
            return 2
        print(f"PUBACK {rest[i + 1]}")
    run_handshake_client(session, mqtt_render(MqttPacket.disconnect()), transport, args.timeout)
    return 0


def _attack_inject(args) -> ScenarioMetrics:
    spec = DialectSpec.parse(args.spec)
    prof = get_profile(args.protocol)
    command = args.command.encode()
    session = ClientSession(prof, fixed_spec=spec)
    metrics = ScenarioMetrics()
    start = time.perf_counter()
    with connect(args.connect) as transport:
        for _ in range(args.count):
            reply = run_handshake_client(session, command, transport, args.timeout)
            metrics.sent += 1
            if reply is None:
                metrics.rejected += 1
            else:
                metrics.accepted += 1
            _pace(args.rate, start, metrics.sent)
    metrics.wall_time = time.perf_counter() - start
    return metrics


def _attack_flood(args) -> ScenarioMetrics:
    """Undialected CONNECTs, one fresh connection each, fired in batches of ``--hold``.

    Each batch stays open until ``--timeout`` after its last send so the
    broker would see every flood client as connected at once.
    """
    metrics = ScenarioMetrics()
    start = time.perf_counter()
    sent = 0
    while sent < args.count:
        batch = min(args.hold, args.count - sent)
        sel = selectors.DefaultSelector()
        conns = []
        try:
            for _ in range(batch):
                sent += 1
                transport = connect(args.connect)
                conns.append(transport)
                transport.send(mqtt_render(MqttPacket.connect(f"flood-{sent:06d}")))
                sel.register(transport.sock, selectors.EVENT_READ, transport)
                metrics.sent += 1
                _pace(args.rate, start, sent)
            registered = 0
            deadline = time.monotonic() + args.timeout
            while sel.get_map() and (left := deadline - time.monotonic()) > 0:
                for key, _ in sel.select(left):
                    sel.unregister(key.fileobj)
                    try:
                        reply = mqtt_parse(key.data.recv(0))
                    except (MPDError, TypeError):
                        continue
                    if reply.control is PacketType.CONNACK:
                        metrics.connacks += 1
                        if reply.code == 0:
                            registered += 1
            metrics.accepted += registered
            metrics.broker_registered_peak = max(metrics.broker_registered_peak, registered)
        finally:
            sel.close()
            for t in conns:
                t.close()
    metrics.rejected = metrics.sent - metrics.accepted
    metrics.wall_time = time.perf_counter() - start
    return metrics


def _pace(rate, start, sent):
    if rate:
        delay = start + sent / rate - time.perf_counter()
        if delay > 0:
            time.sleep(delay)


def cmd_attack(args) -> int:
    if args.mode == "flood":
        if args.protocol != "mqtt":
            raise UsageError("flood mode targets the mqtt broker")
        metrics = _attack_flood(args)
    else:
        if args.command is None:
            args.command = "rget,secret.txt" if args.protocol == "ftp" else None
        if args.command is None:
            raise UsageError("inject mode needs --command for mqtt")
        metrics = _attack_inject(args)
    print(json.dumps(metrics.to_dict(), indent=2))
    return 0


def _parse_keys(text: str | None) -> list[str]:
    return [k for k in (text or "").split(",") if k]


def _parse_modify(items) -> dict:
    modify = {}
    for item in items or ():
        try:
            ordinal, rest = item.split("@", 1)
            offset, patch = rest.split("=", 1)
            modify[ordinal] = (int(offset), bytes.fromhex(patch))
        except ValueError:
            raise UsageError(f"bad --modify {item!r}; expected ORD[:PART]@OFFSET=HEX") from None
    return modify


def cmd_channel(args) -> int:
    policy = ChannelPolicy(frozenset(_parse_keys(args.drop)), _parse_modify(args.modify),
                           frozenset(_parse_keys(args.replay)), args.loss_rate, args.seed)
    proxy = ChannelProxy(parse_address(args.listen), args.upstream, policy)
    with proxy:
        host, port = proxy.server_address[:2]
        print(f"listening on {host}:{port} -> {args.upstream}", flush=True)
        try:
            proxy.serve_forever(poll_interval=0.05)
        except KeyboardInterrupt:
            pass
    return 0


def cmd_scenario(args) -> int:
    config = ScenarioConfig.load(args.config)
    result = run_scenario(config)
    text = result.trace_lines()
    if args.trace:
        Path(args.trace).write_text(text)
    else:
        sys.stdout.write(text)
    report = json.dumps(result.metrics.to_dict(), indent=2)
    if args.metrics:
        Path(args.metrics).write_text(report + "\n")
    else:
        print(report)
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_overhead
    report = bench_overhead(args.requests, args.runs, args.size, args.table)
    print(report.format())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if args.max_overhead is not None and report.elapsed_overhead > args.max_overhead:
        print(f"overhead above bound {args.max_overhead:.0%}", file=sys.stderr)
        return 2
    return 0


def generate_table(count: int, kind: str, seed: int, span: int = 6, anchored: bool = False) -> DialectTable:
    """Random table of distinct, well-formed dialects touching the first ``span`` bytes."""
    shuffles = [DialectSpec.shuffle(p, l, o)
                for p in range(span) for l in range(1, span) for o in range(l, span)
                if p + o + l <= span and (p == 0 or not anchored)]
    splits = [DialectSpec.split(a, b, c)
              for a in range(1, span) for b in range(1, span) for c in range(1, span)
              if a + b + c <= span]
    rng = random.Random(seed)
    if kind == "shuffle":
        pools = [(shuffles, count)]
    elif kind == "split":
        pools = [(splits, count)]
    else:
        pools = [(shuffles, count - count // 2), (splits, count // 2)]
    entries = []
    for pool, n in pools:
        if n > len(pool):
            raise ConfigError(f"only {len(pool)} distinct dialects fit in span {span}")
        entries += rng.sample(pool, n)
    rng.shuffle(entries)
    return DialectTable(tuple(entries))


def cmd_table_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be positive")
    if args.protocol == "mqtt" and args.kind != "shuffle":
        raise UsageError("mqtt tables are shuffle-only")
    table = generate_table(args.count, args.kind, args.seed, args.span, anchored=args.protocol == "mqtt")
    if args.out:
        table.save(args.out)
    else:
        sys.stdout.write(table.dumps())
    if args.scenario:
        if not args.out:
            raise UsageError("--scenario needs --out for the table it refers to")
        scenario = Path(args.scenario)
        table_path = Path(args.out).resolve()
        try:
            table_ref = str(table_path.relative_to(scenario.resolve().parent))
        except ValueError:
            table_ref = str(table_path)
        config = {
            "protocol": args.protocol,
            "key": REGRESSION_KEY.hex(),
            "table_path": table_ref,
            "depth": DEFAULT_DEPTH,
            "channel": {},
            "workload": {"count": 4, "seed": args.seed},
        }
        scenario.write_text(json.dumps(config, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpd", description="Protocol-dialect moving target defense toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("serve", help="run an ftp or mqtt server")
    _add_common(p)
    p.add_argument("--root", help="ftp file root")
    p.add_argument("--listen", default="127.0.0.1:2121")
    p.add_argument("--capacity", type=int, default=64, help="mqtt registration cap")
    p.add_argument("--part-timeout", type=float, default=DEFAULT_PART_TIMEOUT)
    p.add_argument("--once", action="store_true", help="exit after the first connection ends")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="send one command")
    _add_common(p)
    p.add_argument("--connect", default="127.0.0.1:2121")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--retries", type=int, default=1)
    p.add_argument("--output", "-o", help="where rget writes the file")
    p.add_argument("words", nargs="+", help="ftp: rget NAME | ls | quit; mqtt: connect ID [publish TOPIC MSG]")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("attack", help="keyless attacker: fixed-dialect injection or CONNECT flood")
    p.add_argument("--protocol", choices=["ftp", "mqtt"], default="ftp")
    p.add_argument("--mode", choices=["inject", "flood"], default="inject")
    p.add_argument("--connect", default="127.0.0.1:2121")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--spec", default="identity", help='spoofed dialect, e.g. "shuffle 1 1 3"')
    p.add_argument("--command", help="raw request to inject")
    p.add_argument("--timeout", type=float, default=0.2)
    p.add_argument("--rate", type=float, help="packets per second (default: unpaced)")
    p.add_argument("--hold", type=int, default=256, help="flood connections kept open")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("channel", help="fault-injecting TCP proxy")
    p.add_argument("--listen", default="127.0.0.1:2122")
    p.add_argument("--upstream", default="127.0.0.1:2121")
    p.add_argument("--drop", help="comma-separated ORD or ORD:PART")
    p.add_argument("--modify", action="append", help="ORD[:PART]@OFFSET=HEX")
    p.add_argument("--replay", help="comma-separated ORD or ORD:PART")
    p.add_argument("--loss-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_channel)

    p = sub.add_parser("scenario", help="run a simulated scenario from a JSON config")
    p.add_argument("config")
    p.add_argument("--trace", help="write the per-handshake trace here (JSON lines)")
    p.add_argument("--metrics", help="write the metrics report here (JSON)")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("bench", help="overhead of dialects vs plain framing over loopback")
    p.add_argument("--requests", type=int, default=10_000)
    p.add_argument("--runs", type=int, default=4)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--table", default="ftp-shuffle", choices=sorted(TABLES))
    p.add_argument("--max-overhead", type=float, help="fail (exit 2) above this relative overhead")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("table-gen", help="generate a random dialect table")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--kind", choices=["shuffle", "split", "mixed"], default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--span", type=int, default=6, help="dialects only touch the first SPAN bytes")
    p.add_argument("--protocol", choices=["ftp", "mqtt"], default="ftp")
    p.add_argument("--out", help="table file (default: stdout)")
    p.add_argument("--scenario", help="also write a scenario config using the table")
    p.set_defaults(func=cmd_table_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mpd: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mpd: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (MPDError, OSError) as exc:
        print(f"mpd: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
