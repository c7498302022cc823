"""Sender/receiver sessions over TCP: one length-prefixed container per connection.

Request::

    4s   magic b"I2IS"
    32s  checkpoint fingerprint (sha256 of the model file)
    u8   mode (0 = A, 1 = T)
    u32  container length, followed by the container bytes

Reply::

    u8   status (see ``Status``)
    32s  sha256 of the decoded PNG file (zeros unless status is OK)
    u16  message length, followed by a UTF-8 message
"""
from __future__ import annotations

import enum
import hashlib
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import Codec, CodecError
from .container import ContainerError
from .imageio import save_png
from .model import Model
from .networks import Mode

SESSION_MAGIC = b"I2IS"
_REQ = struct.Struct("<4s32sBI")
_REP = struct.Struct("<B32sH")
MAX_CONTAINER = 64 << 20


class Status(enum.IntEnum):
    OK = 0
    FINGERPRINT_MISMATCH = 1
    BAD_CONTAINER = 2
    STYLE_REQUIRED = 3
    PROTOCOL_ERROR = 4


class ProtocolError(ConnectionError):
    pass


@dataclass
class SessionHeader:
    fingerprint: bytes
    mode: Mode
    length: int

    def pack(self) -> bytes:
        return _REQ.pack(SESSION_MAGIC, self.fingerprint, int(self.mode), self.length)

    @classmethod
    def unpack(cls, raw: bytes) -> "SessionHeader":
        magic, fp, mode, length = _REQ.unpack(raw)
        if magic != SESSION_MAGIC:
            raise ProtocolError("bad session magic")
        if mode not in (0, 1):
            raise ProtocolError(f"bad mode byte {mode}")
        if length > MAX_CONTAINER:
            raise ProtocolError(f"container length {length} exceeds limit")
        return cls(fp, Mode(mode), length)


@dataclass
class Reply:
    status: Status
    digest: bytes
    message: str = ""

    def pack(self) -> bytes:
        msg = self.message.encode()[:65535]
        return _REP.pack(int(self.status), self.digest, len(msg)) + msg

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


# -- receiver --------------------------------------------------------------------

StyleProvider = Callable[[int], np.ndarray | None]


class Receiver:
    """Decoding context shared by sessions; the model is read-only."""

    def __init__(self, model: Model, out_dir: str | Path, style_for_target: StyleProvider | None = None):
        self.model = model
        self.fingerprint = model.fingerprint
        self.codec = Codec(model)
        self.out_dir = Path(out_dir)
        self.style_for_target = style_for_target
        self._lock = threading.Lock()
        self._count = 0

    def _next_path(self) -> Path:
        with self._lock:
            k = self._count
            self._count += 1
        return self.out_dir / f"session_{k:04d}.png"

    def handle(self, sock: socket.socket) -> Reply:
        try:
            header = SessionHeader.unpack(recv_exact(sock, _REQ.size))
        except (ProtocolError, struct.error) as exc:
            return Reply(Status.PROTOCOL_ERROR, bytes(32), str(exc))
        # refuse before reading the payload or building any table
        if header.fingerprint != self.fingerprint:
            return Reply(Status.FINGERPRINT_MISMATCH, bytes(32),
                         "checkpoint fingerprint differs from the receiver's model")
        blob = recv_exact(sock, header.length)
        try:
            container = self.codec.parse(blob)
        except (ContainerError, CodecError) as exc:
            return Reply(Status.BAD_CONTAINER, bytes(32), str(exc))
        if container.header.mode != header.mode:
            return Reply(Status.PROTOCOL_ERROR, bytes(32), "session mode disagrees with container")
        style = None
        if header.mode == Mode.T and not container.has_style:
            style = self.style_for_target(container.header.target) if self.style_for_target else None
            if style is None:
                return Reply(Status.STYLE_REQUIRED, bytes(32),
                             "container has no style and the receiver has none configured")
        try:
            image = self.codec.decode(blob, style)
        except (ContainerError, CodecError) as exc:
            return Reply(Status.BAD_CONTAINER, bytes(32), str(exc))
        path = self._next_path()
        png = save_png(path, image)
        return Reply(Status.OK, hashlib.sha256(png).digest(), str(path))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        receiver: Receiver = self.server.receiver
        try:
            reply = receiver.handle(self.request)
        except ProtocolError:
            return  # truncated stream: abort the session silently
        try:
            self.request.sendall(reply.pack())
            if not reply.ok:
                _discard_rest(self.request)
        except OSError:
            pass


def _discard_rest(sock: socket.socket, timeout: float = 5.0) -> None:
    """Drop unread request bytes so closing does not reset the connection before the
    sender has read the refusal; nothing is parsed."""
    sock.shutdown(socket.SHUT_WR)
    sock.settimeout(timeout)
    left = MAX_CONTAINER + _REQ.size
    while left > 0:
        chunk = sock.recv(min(left, 1 << 16))
        if not chunk:
            break
        left -= len(chunk)


class SessionServer(socketserver.TCPServer):
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], receiver: Receiver):
        super().__init__(address, _Handler)
        self.receiver = receiver


class ThreadedSessionServer(socketserver.ThreadingMixIn, SessionServer):
    daemon_threads = True


def make_server(address: str, receiver: Receiver, concurrent: bool = False) -> SessionServer:
    cls = ThreadedSessionServer if concurrent else SessionServer
    return cls(parse_address(address), receiver)


# -- sender --------------------------------------------------------------------------

def send(address: str, blob: bytes, fingerprint: bytes, mode: Mode, timeout: float = 30.0) -> Reply:
    header = SessionHeader(fingerprint, Mode.parse(mode), len(blob))
    with socket.create_connection(parse_address(address), timeout=timeout) as sock:
        try:
            sock.sendall(header.pack() + blob)
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass  # the receiver may refuse early; its reply is still readable
        status, digest, n = _REP.unpack(recv_exact(sock, _REP.size))
        message = recv_exact(sock, n).decode() if n else ""
    return Reply(Status(status), digest, message)
