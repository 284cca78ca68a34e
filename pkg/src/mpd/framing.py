"""Length-prefixed framing: ``len:u32 big-endian || payload``."""

from __future__ import annotations

import socket
import struct

from .errors import ChannelError, FrameError

HEADER = struct.Struct("!I")
MAX_PAYLOAD = 1 << 24

ACK = b"\x06"


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the {MAX_PAYLOAD}-byte cap")
    return HEADER.pack(len(payload)) + payload


class FrameDecoder:
    """Incremental decoder: feed bytes in, iterate complete payloads out."""

    def __init__(self, max_payload: int = MAX_PAYLOAD):
        self.max_payload = max_payload
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > self.max_payload:
                raise FrameError(f"frame header announces {length} bytes")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(bytes(self._buf[HEADER.size:end]))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_frames(data: bytes) -> list[bytes]:
    dec = FrameDecoder()
    frames = dec.feed(data)
    if dec.pending:
        raise FrameError(f"{dec.pending} trailing bytes do not form a frame")
    return frames


class FramedSocket:
    """Blocking frame transport over a connected stream socket.

    ``recv`` returns ``None`` when ``timeout`` expires and raises
    :class:`ChannelError` when the peer goes away.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._decoder = FrameDecoder()
        self._ready: list[bytes] = []

    def send(self, payload: bytes) -> None:
        try:
            self.sock.sendall(encode_frame(payload))
        except OSError as exc:
            raise ChannelError(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> bytes | None:
        while not self._ready:
            self.sock.settimeout(timeout)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return None
            except OSError as exc:
                raise ChannelError(f"recv failed: {exc}") from exc
            if not chunk:
                raise ChannelError("peer closed the connection")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
