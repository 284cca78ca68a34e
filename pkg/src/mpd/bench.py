"""Overhead benchmark: dialect-enabled vs framing-only mini-FTP over loopback.

Each run starts a fresh server process, drives ``requests`` rget commands
from this process and collects the server's CPU time with ``wait4`` and
its peak RSS from the line it prints on exit.  Plain and dialect runs alternate so slow drift on the machine
hits both sides alike.
"""

from __future__ import annotations

import os
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ChannelError
from .harness import REGRESSION_KEY
from .net import connect
from .protocols import FTP, named_table
from .protocols.ftp import rget
from .session import DialectConfig, ClientSession, run_handshake_client


@dataclass
class RunStats:
    elapsed: float
    server_maxrss_kb: int
    server_cpu: float
    failures: int


@dataclass
class BenchReport:
    requests: int
    size: int
    table: str
    plain: list[RunStats] = field(default_factory=list)
    mpd: list[RunStats] = field(default_factory=list)

    @staticmethod
    def _mean(runs, attr):
        return statistics.fmean(getattr(r, attr) for r in runs)

    @property
    def elapsed_overhead(self) -> float:
        """Relative increase of mean elapsed time, e.g. 0.0443 for 4.43%."""
        return self._mean(self.mpd, "elapsed") / self._mean(self.plain, "elapsed") - 1.0

    @property
    def memory_delta_kb(self) -> float:
        return self._mean(self.mpd, "server_maxrss_kb") - self._mean(self.plain, "server_maxrss_kb")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elapsed_overhead"] = self.elapsed_overhead
        d["memory_delta_kb"] = self.memory_delta_kb
        return d

    def format(self) -> str:
        rows = [
            f"workload: {self.requests} x rget of a {self.size}-byte file, table {self.table}",
            f"{'':24}{'plain':>12}{'mpd':>12}",
        ]
        for label, attr, fmt in (("elapsed time/s", "elapsed", "{:12.3f}"),
                                 ("server cpu time/s", "server_cpu", "{:12.3f}"),
                                 ("server max rss/KB", "server_maxrss_kb", "{:12.0f}")):
            rows.append(f"{label:24}" + fmt.format(self._mean(self.plain, attr))
                        + fmt.format(self._mean(self.mpd, attr)))
        rows.append(f"elapsed overhead: {self.elapsed_overhead:+.2%} over {len(self.mpd)} runs each")
        rows.append(f"memory delta: {self.memory_delta_kb:+.0f} KB")
        return "\n".join(rows)


def _server_cmd(root: Path, keyfile: Path, table: str | None) -> list[str]:
    cmd = [sys.executable, "-m", "mpd", "serve", "--protocol", "ftp", "--root", str(root),
           "--listen", "127.0.0.1:0", "--once"]
    if table is None:
        cmd.append("--plain")
    else:
        cmd += ["--key", str(keyfile), "--table", table]
    return cmd


def _env() -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
    return env


def _one_run(root: Path, keyfile: Path, table: str | None, requests: int, key: bytes) -> RunStats:
    proc = subprocess.Popen(_server_cmd(root, keyfile, table), stdout=subprocess.PIPE,
                            text=True, env=_env())
    try:
        line = proc.stdout.readline()
        if not line.startswith("listening on "):
            raise ChannelError(f"server failed to start: {line!r}")
        address = line.split()[-1]
        if table is None:
            session = ClientSession(FTP)
        else:
            session = DialectConfig(key, named_table(table)).client(FTP.with_table(named_table(table)))
        request = rget("sample.txt")
        failures = 0
        with connect(address) as transport:
            start = time.perf_counter()
            for _ in range(requests):
                reply = run_handshake_client(session, request, transport)
                failures += reply is None or not reply.ok
            elapsed = time.perf_counter() - start
        tail = proc.stdout.read().split()
        _, status, usage = os.wait4(proc.pid, 0)
        proc.returncode = os.waitstatus_to_exitcode(status)
        # ru_maxrss survives exec and would report this (larger) process
        peak = int(tail[-2]) if tail[-1:] == ["KB"] else usage.ru_maxrss
    finally:
        if proc.returncode is None:
            proc.kill()
            proc.wait()
        proc.stdout.close()
    return RunStats(elapsed, peak, usage.ru_utime + usage.ru_stime, failures)


def bench_overhead(requests: int = 10_000, runs: int = 4, size: int = 1024,
                   table: str = "ftp-shuffle", key: bytes = REGRESSION_KEY) -> BenchReport:
    report = BenchReport(requests, size, table)
    with tempfile.TemporaryDirectory(prefix="mpd-bench-") as tmp:
        root = Path(tmp, "files")
        root.mkdir()
        (root / "sample.txt").write_bytes(os.urandom(size))
        keyfile = Path(tmp, "key.bin")
        keyfile.write_text(key.hex())
        # one untimed warm-up pair
        _one_run(root, keyfile, None, min(requests, 200), key)
        _one_run(root, keyfile, table, min(requests, 200), key)
        for _ in range(runs):
            report.plain.append(_one_run(root, keyfile, None, requests, key))
            report.mpd.append(_one_run(root, keyfile, table, requests, key))
    return report
