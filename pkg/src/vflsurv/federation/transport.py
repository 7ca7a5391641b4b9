"""Message transports.

Two interchangeable channels with identical semantics:

* in-process pairs of deques, used for tests and the equivalence runs
  (arrays cross at full 64-bit precision, nothing is serialized);
* TCP sockets carrying length-prefixed encoded frames (u32 length then the
  frame bytes), the realistic deployment mode, where payloads are 32-bit
  on the wire.

Both expose a tiny duplex interface: ``send(msg)`` / ``recv() -> msg``.
The server buffers one connection per client and always processes clients
in index order, which keeps rounds deterministic no matter the arrival
order on the sockets.
"""

from __future__ import annotations

import socket
import struct
from collections import deque

from .messages import DecodeError, decode_message, encode_message

__all__ = ["TransportError", "InProcPair", "make_inproc_network",
           "TcpClientChannel", "TcpServerChannel", "serve_clients"]


class TransportError(RuntimeError):
    pass


class InProcPair:
    """One client <-> server duplex link backed by two deques."""

    def __init__(self):
        self._to_server: deque = deque()
        self._to_client: deque = deque()

    # client endpoint ------------------------------------------------------
    def send(self, msg):
        self._to_server.append(msg)

    def recv(self):
        if not self._to_client:
            raise TransportError("no message pending for client")
        return self._to_client.popleft()

    # server endpoint ------------------------------------------------------
    def server_send(self, msg):
        self._to_client.append(msg)

    def server_recv(self):
        if not self._to_server:
            raise TransportError("no message pending for server")
        return self._to_server.popleft()


def make_inproc_network(n_clients: int) -> list[InProcPair]:
    return [InProcPair() for _ in range(n_clients)]


def _send_framed(sock: socket.socket, data: bytes) -> None:
    sock.sendall(struct.pack("<I", len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            raise TransportError("connection closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def _recv_framed(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


class TcpClientChannel:
    """Client endpoint: connects to the server and exchanges messages."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg) -> None:
        _send_framed(self.sock, encode_message(msg))

    def recv(self):
        try:
            return decode_message(_recv_framed(self.sock))
        except DecodeError as exc:
            raise TransportError(f"bad frame from server: {exc}") from exc

    def close(self) -> None:
        self.sock.close()


class TcpServerChannel:
    """Server endpoint for one connected client."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def server_send(self, msg) -> None:
        _send_framed(self.sock, encode_message(msg))

    def server_recv(self):
        try:
            return decode_message(_recv_framed(self.sock))
        except DecodeError as exc:
            raise TransportError(f"bad frame from client: {exc}") from exc

    def close(self) -> None:
        self.sock.close()


def serve_clients(host: str, port: int, n_clients: int,
                  timeout: float = 120.0):
    """Accept n_clients connections; returns (channels by client index,
    bound port).  Each client must open with a start control message that
    carries its index."""
    listener = socket.create_server((host, port))
    listener.settimeout(timeout)
    bound_port = listener.getsockname()[1]
    channels: dict[int, TcpServerChannel] = {}
    starts: dict[int, object] = {}
    try:
        while len(channels) < n_clients:
            conn, _ = listener.accept()
            conn.settimeout(timeout)
            chan = TcpServerChannel(conn)
            hello = chan.server_recv()
            kind = getattr(hello, "kind", None)
            if kind != "start":
                chan.close()
                raise TransportError("client must open with a start message")
            if hello.client in channels:
                chan.close()
                raise TransportError(f"duplicate client index {hello.client}")
            channels[hello.client] = chan
            starts[hello.client] = hello
    finally:
        listener.close()
    ordered = [channels[k] for k in sorted(channels)]
    hellos = [starts[k] for k in sorted(starts)]
    return ordered, hellos, bound_port
