"""Mini-FTP: a one-line command grammar for retrieving and listing files.

Commands are ``rget,<filename>``, ``ls`` and ``quit``.  The grammar is
deliberately strict so that a request mangled by the wrong dialect fails to
parse instead of being served.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import ParseError

_FILENAME = re.compile(r"[A-Za-z0-9_][A-Za-z0-9._-]{0,254}")


class Verb(enum.Enum):
    RGET = "rget"
    LS = "ls"
    QUIT = "quit"


@dataclass(frozen=True)
class FtpCommand:
    verb: Verb
    arg: str | None = None


def valid_filename(name: str) -> bool:
    return _FILENAME.fullmatch(name) is not None


def ftp_parse(data: bytes) -> FtpCommand:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("command is not ASCII") from None
    if text in ("ls", "quit"):
        return FtpCommand(Verb(text))
    verb, sep, arg = text.partition(",")
    if verb != Verb.RGET.value or not sep:
        raise ParseError(f"unknown command {data[:32]!r}")
    if not valid_filename(arg):
        raise ParseError(f"bad filename {arg[:32]!r}")
    return FtpCommand(Verb.RGET, arg)


def ftp_render(cmd: FtpCommand) -> bytes:
    if cmd.verb is Verb.RGET:
        if cmd.arg is None or not valid_filename(cmd.arg):
            raise ValueError(f"rget needs a valid filename, got {cmd.arg!r}")
        return f"rget,{cmd.arg}".encode("ascii")
    if cmd.arg is not None:
        raise ValueError(f"{cmd.verb.value} takes no argument")
    return cmd.verb.value.encode("ascii")


def rget(filename: str) -> bytes:
    return ftp_render(FtpCommand(Verb.RGET, filename))


OK = b"OK,"
NOT_FOUND = b"ERR,notfound"
IO_ERROR = b"ERR,io"
BYE = b"BYE"


def ftp_handle(cmd: FtpCommand, root) -> bytes:
    root = Path(root)
    if cmd.verb is Verb.QUIT:
        return BYE
    try:
        if cmd.verb is Verb.LS:
            names = sorted(p.name for p in root.iterdir() if p.is_file())
            return OK + "\n".join(names).encode("utf-8", "replace")
        path = root / cmd.arg
        if not path.is_file():
            return NOT_FOUND
        return OK + path.read_bytes()
    except OSError:
        return IO_ERROR


@dataclass(frozen=True)
class FtpResponse:
    ok: bool
    body: bytes = b""
    error: str | None = None
    bye: bool = False


def parse_response(data: bytes) -> FtpResponse:
    if data.startswith(OK):
        return FtpResponse(True, data[len(OK):])
    if data in (NOT_FOUND, IO_ERROR):
        return FtpResponse(False, error=data[4:].decode())
    if data == BYE:
        return FtpResponse(True, bye=True)
    raise ParseError(f"unexpected FTP response {data[:32]!r}")


class FtpService:
    """Server-side state for one mini-FTP connection."""

    def __init__(self, root):
        self.root = Path(root)
        self.closed = False

    def expects_dialect(self) -> bool:
        return True

    def parse(self, data: bytes) -> FtpCommand:
        return ftp_parse(data)

    def handle(self, cmd: FtpCommand) -> bytes:
        if cmd.verb is Verb.QUIT:
            self.closed = True
        return ftp_handle(cmd, self.root)

    def mirror(self, cmd) -> bool:
        return False

    def close(self):
        self.closed = True
