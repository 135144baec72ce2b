"""Length-prefixed encodings used on every channel and socket.

Field list:  count (1 byte) || per field: 4-byte big-endian length || bytes
Stream frame: 4-byte big-endian length || payload
"""

import socket
import struct

from .errors import PeerClosed, WireFormatError

MAX_FIELDS = 255
MAX_STREAM_FRAME = 16 * 1024 * 1024

_LEN = struct.Struct(">I")


def encode_fields(fields) -> bytes:
    fields = list(fields)
    if len(fields) > MAX_FIELDS:
        raise WireFormatError(f"too many fields: {len(fields)}")
    out = bytearray([len(fields)])
    for f in fields:
        if isinstance(f, str):
            f = f.encode("utf-8")
        out += _LEN.pack(len(f))
        out += f
    return bytes(out)


def decode_fields(data: bytes) -> list[bytes]:
    if not data:
        raise WireFormatError("empty field list")
    count = data[0]
    pos = 1
    fields = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise WireFormatError("truncated field length")
        (n,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + n > len(data):
            raise WireFormatError("truncated field body")
        fields.append(bytes(data[pos:pos + n]))
        pos += n
    if pos != len(data):
        raise WireFormatError(f"{len(data) - pos} trailing bytes after field list")
    return fields


def u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def u32(n: int) -> bytes:
    return n.to_bytes(4, "big")


def from_be(b: bytes) -> int:
    return int.from_bytes(b, "big")


# stream sockets ---------------------------------------------------------

def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PeerClosed("stream closed by peer")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    if n > MAX_STREAM_FRAME:
        raise WireFormatError(f"stream frame too large: {n}")
    return _recv_exact(sock, n)
