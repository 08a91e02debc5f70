import json
import socket
import struct
import logging
import threading
import socketserver

from fissionserve.utils_errors import ProtocolError

logger = logging.getLogger("FissionServe")

MAX_HEADER_BYTES = 16 * 1024 * 1024

FRAME_TYPES = frozenset(
    {
        "dispatch",
        "status",
        "chunk",
        "output_done",
        "result",
        "error",
        "cancel",
        "envelope",
        "ack",
        "fail",
        "spawn",
        "spawned",
        "shutdown",
        "stats",
    }
)

_PREFIX = struct.Struct(">I")


def encode_frame(header, body=b""):
    if header.get("type") not in FRAME_TYPES:
        raise ProtocolError(f"unknown frame type {header.get('type')!r}")
    header = dict(header, body_len=len(body))
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    if len(raw) > MAX_HEADER_BYTES:
        raise ProtocolError(f"frame header of {len(raw)} bytes exceeds {MAX_HEADER_BYTES}")
    return _PREFIX.pack(len(raw)) + raw + bytes(body)


def _decode_header(raw):
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ProtocolError(f"malformed frame header: {err}") from None
    if not isinstance(header, dict) or header.get("type") not in FRAME_TYPES:
        raise ProtocolError(f"unknown frame type in header {str(header)[:80]}")
    if not isinstance(header.get("body_len", 0), int) or header.get("body_len", 0) < 0:
        raise ProtocolError("frame body_len must be a non-negative integer")
    return header


class FrameDecoder:
    """Incremental decoder for a byte stream that may split frames anywhere."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data):
        self._buffer.extend(data)
        frames = []
        while True:
            if len(self._buffer) < _PREFIX.size:
                break
            (header_len,) = _PREFIX.unpack_from(self._buffer)
            if header_len > MAX_HEADER_BYTES:
                raise ProtocolError(f"frame header length {header_len} exceeds {MAX_HEADER_BYTES}")
            start = _PREFIX.size
            if len(self._buffer) < start + header_len:
                break
            header = _decode_header(bytes(self._buffer[start : start + header_len]))
            body_len = header.get("body_len", 0)
            end = start + header_len + body_len
            if len(self._buffer) < end:
                break
            body = bytes(self._buffer[start + header_len : end])
            del self._buffer[:end]
            frames.append((header, body))
        return frames

    @property
    def buffered(self):
        return len(self._buffer)


def _recv_exact(sock, n):
    chunks = []
    while n > 0:
        data = sock.recv(min(n, 1 << 20))
        if not data:
            return None
        chunks.append(data)
        n -= len(data)
    return b"".join(chunks)


def read_frame(sock):
    """Read one frame; returns None on a clean EOF between frames."""
    prefix = _recv_exact(sock, _PREFIX.size)
    if prefix is None:
        return None
    (header_len,) = _PREFIX.unpack(prefix)
    if header_len > MAX_HEADER_BYTES:
        raise ProtocolError(f"frame header length {header_len} exceeds {MAX_HEADER_BYTES}")
    raw = _recv_exact(sock, header_len)
    if raw is None:
        raise ProtocolError("connection closed inside a frame header")
    header = _decode_header(raw)
    body = b""
    if header.get("body_len"):
        body = _recv_exact(sock, header["body_len"])
        if body is None:
            raise ProtocolError("connection closed inside a frame body")
    return header, body


def write_frame(sock, header, body=b""):
    sock.sendall(encode_frame(header, body))


class FrameConnection:
    """A socket carrying frames both ways, with a locked writer."""

    def __init__(self, sock, name="frames"):
        self.sock = sock
        self.name = name
        self._write_lock = threading.Lock()
        self._reader = None
        self.closed = False

    @classmethod
    def connect(cls, host, port, timeout=5.0, name="frames"):
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, name=name)

    def send(self, header, body=b""):
        data = encode_frame(header, body)
        with self._write_lock:
            if self.closed:
                raise ProtocolError(f"{self.name}: connection is closed")
            self.sock.sendall(data)

    def recv(self):
        return read_frame(self.sock)

    def serve(self, on_frame, on_close=None):
        """Read frames on a background thread until EOF or error."""

        def loop():
            error = None
            try:
                while True:
                    frame = read_frame(self.sock)
                    if frame is None:
                        break
                    on_frame(*frame)
            except (OSError, ProtocolError) as err:
                if not self.closed:
                    logger.error("%s: reader stopped: %s", self.name, err)
                    error = err
            finally:
                self.closed = True
                if on_close is not None:
                    on_close(error)

        self._reader = threading.Thread(target=loop, name=f"{self.name}-reader", daemon=True)
        self._reader.start()
        return self._reader

    def close(self):
        with self._write_lock:
            if self.closed:
                return
            self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        conn = FrameConnection(self.request, name=self.server.name)
        self.server.connections.append(conn)
        try:
            while True:
                frame = read_frame(self.request)
                if frame is None:
                    return
                self.server.on_frame(conn, *frame)
        except (OSError, ProtocolError) as err:
            if not conn.closed:
                logger.error("%s: connection dropped: %s", self.server.name, err)
        finally:
            conn.closed = True


class FrameServer(socketserver.ThreadingTCPServer):
    """TCP server calling ``on_frame(conn, header, body)`` for each frame."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, host, port, on_frame, name="frame-server"):
        self.on_frame = on_frame
        self.name = name
        self.connections = []
        super().__init__((host, port), _Handler)
        self._thread = None

    @property
    def address(self):
        host, port = self.server_address[:2]
        return host, port

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, name=self.name, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        for conn in self.connections:
            conn.close()
