"""Tests for fissionserve.utils_wire — frame encoding, incremental decoding and sockets."""

import json
import socket
import struct
import threading
import pytest

from fissionserve.utils_errors import ProtocolError
from fissionserve.utils_wire import (
    MAX_HEADER_BYTES,
    FrameConnection,
    FrameDecoder,
    FrameServer,
    encode_frame,
    read_frame,
    write_frame,
)


def _raw_frame(header_bytes, body=b""):
    return struct.pack(">I", len(header_bytes)) + header_bytes + body


class TestFrameDecoder:

    def test_byte_at_a_time(self):
        data = encode_frame({"type": "envelope", "ref_id": "r/1", "seq": 3}, b"\x00\x01payload")
        decoder = FrameDecoder()
        frames = []
        for i in range(len(data)):
            frames.extend(decoder.feed(data[i : i + 1]))
        assert len(frames) == 1
        header, body = frames[0]
        assert header["ref_id"] == "r/1"
        assert header["body_len"] == 9
        assert body == b"\x00\x01payload"
        assert decoder.buffered == 0

    def test_several_frames_in_one_read(self):
        data = b"".join(encode_frame({"type": "ack", "seq": n}, b"x" * n) for n in range(4))
        decoder = FrameDecoder()
        frames = decoder.feed(data[:-2])
        assert [h["seq"] for h, _ in frames] == [0, 1, 2]
        frames = decoder.feed(data[-2:])
        assert [(h["seq"], b) for h, b in frames] == [(3, b"xxx")]

    def test_empty_body(self):
        ((header, body),) = FrameDecoder().feed(encode_frame({"type": "shutdown"}))
        assert header == {"type": "shutdown", "body_len": 0}
        assert body == b""

    def test_unknown_type_on_encode(self):
        with pytest.raises(ProtocolError, match="unknown frame type"):
            encode_frame({"type": "gossip"})

    def test_unknown_type_on_decode(self):
        with pytest.raises(ProtocolError, match="unknown frame type"):
            FrameDecoder().feed(_raw_frame(b'{"type": "gossip"}'))

    def test_malformed_header(self):
        with pytest.raises(ProtocolError, match="malformed"):
            FrameDecoder().feed(_raw_frame(b"{not json"))

    def test_negative_body_length(self):
        with pytest.raises(ProtocolError, match="body_len"):
            FrameDecoder().feed(_raw_frame(json.dumps({"type": "ack", "body_len": -1}).encode()))

    def test_oversized_header_length(self):
        with pytest.raises(ProtocolError, match="exceeds"):
            FrameDecoder().feed(struct.pack(">I", MAX_HEADER_BYTES + 1))


# ---------------------------------------------------------------------------
# Sockets
# ---------------------------------------------------------------------------


class TestSockets:

    def test_read_write_over_a_socket_pair(self):
        left, right = socket.socketpair()
        try:
            write_frame(left, {"type": "chunk", "seq": 0}, b"abc" * 1000)
            write_frame(left, {"type": "output_done"})
            header, body = read_frame(right)
            assert header["type"] == "chunk"
            assert body == b"abc" * 1000
            assert read_frame(right)[0]["type"] == "output_done"
            left.close()
            assert read_frame(right) is None
        finally:
            right.close()

    def test_eof_inside_a_body(self):
        left, right = socket.socketpair()
        try:
            data = encode_frame({"type": "envelope"}, b"0123456789")
            left.sendall(data[:-4])
            left.close()
            with pytest.raises(ProtocolError, match="inside a frame body"):
                read_frame(right)
        finally:
            right.close()

    def test_connection_serve_and_close(self):
        left, right = socket.socketpair()
        received, closed = [], threading.Event()
        reader = FrameConnection(right, name="reader")
        reader.serve(lambda header, body: received.append((header["seq"], body)), lambda error: closed.set())
        writer = FrameConnection(left, name="writer")
        for n in range(3):
            writer.send({"type": "envelope", "seq": n}, bytes([n]) * 4)
        writer.close()
        assert closed.wait(5.0)
        assert received == [(0, b"\x00" * 4), (1, b"\x01" * 4), (2, b"\x02" * 4)]
        with pytest.raises(ProtocolError, match="closed"):
            writer.send({"type": "ack"})


@pytest.mark.integration
class TestFrameServer:

    def test_round_trip_over_tcp(self):
        def echo(conn, header, body):
            conn.send({"type": "ack", "seq": header["seq"]}, body[::-1])

        server = FrameServer("127.0.0.1", 0, echo).start()
        try:
            client = FrameConnection.connect(*server.address)
            try:
                for n in range(5):
                    client.send({"type": "envelope", "seq": n}, f"frame-{n}".encode())
                    header, body = client.recv()
                    assert header["seq"] == n
                    assert body == f"frame-{n}".encode()[::-1]
            finally:
                client.close()
        finally:
            server.stop()
