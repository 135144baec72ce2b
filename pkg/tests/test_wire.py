import socket
import struct

import pytest
from hypothesis import given, strategies as st

from agentee.errors import PeerClosed, WireFormatError
from agentee.wire import decode_fields, encode_fields, recv_frame, send_frame


def test_encoding_layout():
    """count byte, then 4-byte big-endian length before each field."""
    assert encode_fields([b"ab", "c"]) == b"\x02" + struct.pack(">I", 2) + b"ab" + struct.pack(">I", 1) + b"c"
    assert encode_fields([]) == b"\x00"


@given(st.lists(st.binary(max_size=64), max_size=20))
def test_round_trip(fields):
    assert decode_fields(encode_fields(fields)) == fields


def test_rejects_trailing_and_truncated():
    good = encode_fields([b"abc"])
    with pytest.raises(WireFormatError):
        decode_fields(good + b"x")
    with pytest.raises(WireFormatError):
        decode_fields(good[:-1])
    with pytest.raises(WireFormatError):
        decode_fields(b"")


def test_field_count_limit():
    with pytest.raises(WireFormatError):
        encode_fields([b""] * 256)


def test_stream_frames_over_socketpair():
    a, b = socket.socketpair()
    with a, b:
        send_frame(a, b"hello")
        send_frame(a, b"")
        assert recv_frame(b) == b"hello"
        assert recv_frame(b) == b""
        a.close()
        with pytest.raises(PeerClosed):
            recv_frame(b)
