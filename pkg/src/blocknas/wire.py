"""Newline-delimited JSON framing over stream sockets.

One message is one JSON object on one line, UTF-8, terminated by ``\\n``.
Job messages look like ``{"id": "...", "codes": [[1,1,3,0,0], ...],
"epochs": 12, "seed": 7}``; see docs/protocol.md for the full schema and
byte-exact examples.
"""

from __future__ import annotations

import json
import socket
from typing import Any


class WireError(RuntimeError):
    """The peer sent something that is not a JSON object line."""


def send_json_line(sock: socket.socket, payload: dict[str, Any]) -> None:
    sock.sendall((json.dumps(payload, separators=(",", ":")) + "\n").encode("utf-8"))


class LineReader:
    """Buffers a socket and yields one decoded JSON object per line."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buffer = bytearray()

    def read_message(self, timeout: float | None = None) -> dict[str, Any] | None:
        """Next message, ``None`` on clean EOF; raises socket.timeout on delay."""
        self._sock.settimeout(timeout)
        while b"\n" not in self._buffer:
            chunk = self._sock.recv(65536)
            if not chunk:
                if self._buffer:
                    raise WireError("connection closed mid-line")
                return None
            self._buffer.extend(chunk)
        line, _, rest = bytes(self._buffer).partition(b"\n")
        self._buffer = bytearray(rest)
        try:
            message = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WireError(f"bad message line: {exc}") from None
        if not isinstance(message, dict):
            raise WireError("message is not a JSON object")
        return message
