"""
Blocking message handoff between stages over filesystem-addressed Unix
stream sockets.

The producer listens on <runtime>/<app>/<stage>.sock and stays blocked
until every successor has read and acknowledged its frame. Consumers may
start first; they retry the connect until the socket shows up.

Frame layout (big-endian, no padding):

    "PLXM" | version u8 | producer_id_len u16 | producer_id
           | payload_len u32 | payload | crc32(payload) u32
"""

from __future__ import annotations

import logging
import socket
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

from pallex.errors import (
    AddressInUse,
    BadMagic,
    BadProducerId,
    BadVersion,
    CrcMismatch,
    FrameError,
    HandoffError,
    HandoffTimeout,
    TrailingData,
    Truncated,
)

MAGIC = b"PLXM"
VERSION = 0x01
ACK = b"\x06"
NAK = b"\x15"

DEFAULT_RETRY_INTERVAL_MS = 50
DEFAULT_TIMEOUT_MS = 30_000

_ID_LEN = struct.Struct(">H")
_U32 = struct.Struct(">I")
MAX_PAYLOAD = 0xFFFFFFFF


# =====================
# Frame codec
# =====================


@dataclass(frozen=True)
class Frame:
    producer_id: str
    payload: bytes
    version: int = VERSION


def encode_frame(frame: Frame) -> bytes:
    producer = frame.producer_id.encode("utf-8")
    if len(producer) > 0xFFFF:
        raise HandoffError("producer id longer than 65535 bytes")
    if len(frame.payload) > MAX_PAYLOAD:
        raise HandoffError("payload larger than 4 GiB - 1")
    return b"".join(
        (
            MAGIC,
            bytes([frame.version]),
            _ID_LEN.pack(len(producer)),
            producer,
            _U32.pack(len(frame.payload)),
            frame.payload,
            _U32.pack(zlib.crc32(frame.payload)),
        )
    )


class _Reader:
    """
    Cursor over a buffer; running out of bytes is always Truncated.
    """

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise Truncated(f"frame truncated in {what} ({len(self.data) - self.pos}/{n} bytes)")
        chunk = self.data[self.pos:end].tobytes()
        self.pos = end
        return chunk


def _check_magic(magic: bytes):
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")


def _check_version(raw: bytes):
    if raw[0] != VERSION:
        raise BadVersion(f"unsupported frame version {raw[0]}")


def _check_crc(payload: bytes, crc_raw: bytes):
    expected = _U32.unpack(crc_raw)[0]
    actual = zlib.crc32(payload)
    if actual != expected:
        raise CrcMismatch(f"crc32 mismatch: frame says {expected:08x}, payload is {actual:08x}")


def _decode_producer(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadProducerId(f"producer id is not UTF-8 ({exc})") from exc


def decode_frame(data: bytes) -> Frame:
    reader = _Reader(data)
    head = bytes(data[:4])
    if len(head) < 4:
        if MAGIC.startswith(head):
            raise Truncated(f"frame truncated in magic ({len(head)}/4 bytes)")
        raise BadMagic(f"bad magic {head!r}, expected {MAGIC!r}")
    _check_magic(reader.take(4, "magic"))
    _check_version(reader.take(1, "version"))
    id_len = _ID_LEN.unpack(reader.take(2, "producer_id_len"))[0]
    producer = _decode_producer(reader.take(id_len, "producer_id"))
    payload_len = _U32.unpack(reader.take(4, "payload_len"))[0]
    payload = reader.take(payload_len, "payload")
    _check_crc(payload, reader.take(4, "crc32"))
    if reader.pos != len(data):
        raise TrailingData(f"{len(data) - reader.pos} bytes after frame end")
    return Frame(producer_id=producer, payload=payload)


def _recv_exact(sock: socket.socket, n: int, what: str) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        read = sock.recv_into(view[got:], n - got)
        if read == 0:
            raise Truncated(f"connection closed in {what} ({got}/{n} bytes)")
        got += read
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    """
    Reads exactly one frame from a stream, validating as it goes.
    """
    _check_magic(_recv_exact(sock, 4, "magic"))
    _check_version(_recv_exact(sock, 1, "version"))
    id_len = _ID_LEN.unpack(_recv_exact(sock, 2, "producer_id_len"))[0]
    producer = _decode_producer(_recv_exact(sock, id_len, "producer_id"))
    payload_len = _U32.unpack(_recv_exact(sock, 4, "payload_len"))[0]
    payload = _recv_exact(sock, payload_len, "payload")
    _check_crc(payload, _recv_exact(sock, 4, "crc32"))
    return Frame(producer_id=producer, payload=payload)


# =====================
# Endpoints
# =====================


def socket_path(runtime_dir: str | Path, app_id: str, stage_id: str) -> Path:
    return Path(runtime_dir) / app_id / f"{stage_id}.sock"


@dataclass(frozen=True)
class HandoffEndpoint:
    app_id: str
    stage_id: str
    runtime_dir: Path
    role: str = "producer"

    @property
    def socket_path(self) -> Path:
        return socket_path(self.runtime_dir, self.app_id, self.stage_id)


@dataclass(frozen=True)
class Delivery:
    consumer: int
    bytes_sent: int
    elapsed_ms: float


@dataclass(frozen=True)
class DeliveryReport:
    stage_id: str
    expected: int
    deliveries: tuple[Delivery, ...] = ()

    @property
    def delivered(self) -> int:
        return len(self.deliveries)


def _remaining(deadline: float) -> float:
    return deadline - time.monotonic()


# =====================
# Producer
# =====================


def serve_handoff(
    endpoint: HandoffEndpoint,
    payload: bytes,
    successor_count: int,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> DeliveryReport:
    """
    Blocks until successor_count consumers have acknowledged the full frame.
    Consumers are served one after another. The socket file is removed on
    every exit path once this call has bound it.
    """
    if successor_count < 0:
        raise ValueError("successor_count must be >= 0")
    if successor_count == 0:
        return DeliveryReport(endpoint.stage_id, 0)

    path = endpoint.socket_path
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        raise AddressInUse(f"socket path already in use: {path}")

    frame = encode_frame(Frame(endpoint.stage_id, payload))
    started = time.monotonic()
    deadline = started + timeout_ms / 1000
    deliveries: list[Delivery] = []

    server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        server.bind(str(path))
    except OSError as exc:
        server.close()
        # the path belongs to whoever bound it first
        raise AddressInUse(f"socket path already in use: {path} ({exc})") from exc

    try:
        server.listen(successor_count)
        logging.info(
            "stage %s listening on %s for %d consumer(s)",
            endpoint.stage_id,
            path,
            successor_count,
        )

        while len(deliveries) < successor_count:
            remaining = _remaining(deadline)
            if remaining <= 0:
                break
            server.settimeout(remaining)
            try:
                conn, _ = server.accept()
            except socket.timeout:
                break
            with conn:
                conn.settimeout(max(_remaining(deadline), 0.001))
                try:
                    conn.sendall(frame)
                    reply = conn.recv(1)
                except socket.timeout:
                    logging.warning("stage %s: consumer did not acknowledge in time", endpoint.stage_id)
                    break
                except OSError as exc:
                    logging.warning("stage %s: consumer connection failed: %s", endpoint.stage_id, exc)
                    continue
            if reply == ACK:
                deliveries.append(
                    Delivery(
                        consumer=len(deliveries) + 1,
                        bytes_sent=len(frame),
                        elapsed_ms=(time.monotonic() - started) * 1000,
                    )
                )
                logging.debug(
                    "stage %s: delivery %d/%d confirmed",
                    endpoint.stage_id,
                    len(deliveries),
                    successor_count,
                )
            else:
                logging.warning(
                    "stage %s: consumer rejected the frame (reply %r)", endpoint.stage_id, reply
                )
    finally:
        server.close()
        try:
            path.unlink()
        except FileNotFoundError:
            pass

    if len(deliveries) < successor_count:
        raise HandoffTimeout(
            f"stage {endpoint.stage_id}: timeout after {timeout_ms} ms with "
            f"{len(deliveries)}/{successor_count} deliveries",
            delivered=len(deliveries),
        )
    logging.info("stage %s delivered to %d consumer(s)", endpoint.stage_id, len(deliveries))
    return DeliveryReport(endpoint.stage_id, successor_count, tuple(deliveries))


# =====================
# Consumer
# =====================


def connect_endpoint(
    endpoint: HandoffEndpoint,
    retry_interval_ms: int,
    deadline: float,
) -> tuple[socket.socket, int]:
    """
    Connects to a producer that may not exist yet. Attempts are scheduled
    on a fixed grid from the first one, so sleep overhead does not add up.
    Returns the socket and the number of attempts.
    """
    path = str(endpoint.socket_path)
    interval = retry_interval_ms / 1000
    first = time.monotonic()
    attempts = 0
    while True:
        attempts += 1
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.connect(path)
            logging.debug("connected to %s after %d attempt(s)", path, attempts)
            return sock, attempts
        except (FileNotFoundError, ConnectionRefusedError):
            sock.close()
        next_attempt = first + attempts * interval
        if next_attempt >= deadline:
            raise HandoffTimeout(
                f"producer {endpoint.stage_id} did not appear at {path}",
                missing=(endpoint.stage_id,),
            )
        time.sleep(max(next_attempt - time.monotonic(), 0))


def collect_handoff(
    predecessors: list[HandoffEndpoint],
    retry_interval_ms: int = DEFAULT_RETRY_INTERVAL_MS,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> dict[str, bytes]:
    """
    Reads one frame from every predecessor, in list order, within one
    overall timeout. Returns {producer stage id: payload}.
    """
    if retry_interval_ms < 1:
        raise ValueError("retry_interval_ms must be >= 1")
    deadline = time.monotonic() + timeout_ms / 1000
    payloads: dict[str, bytes] = {}

    for idx, endpoint in enumerate(predecessors):
        missing = tuple(e.stage_id for e in predecessors[idx:])
        try:
            sock, attempts = connect_endpoint(endpoint, retry_interval_ms, deadline)
        except HandoffTimeout as exc:
            raise HandoffTimeout(
                f"timeout after {timeout_ms} ms waiting for: {', '.join(missing)}",
                missing=missing,
            ) from exc

        with sock:
            sock.settimeout(max(_remaining(deadline), 0.001))
            try:
                frame = read_frame(sock)
            except socket.timeout as exc:
                raise HandoffTimeout(
                    f"timeout after {timeout_ms} ms reading from: {', '.join(missing)}",
                    missing=missing,
                ) from exc
            except FrameError as exc:
                _reply(sock, NAK)
                raise exc.with_producer(endpoint.stage_id) from exc
            if frame.producer_id != endpoint.stage_id:
                _reply(sock, NAK)
                raise HandoffError(
                    f"{endpoint.stage_id}: frame names producer {frame.producer_id!r}"
                )
            _reply(sock, ACK)

        logging.info(
            "received %d bytes from %s (%d connect attempt(s))",
            len(frame.payload),
            endpoint.stage_id,
            attempts,
        )
        payloads[endpoint.stage_id] = frame.payload
    return payloads


def _reply(sock: socket.socket, byte: bytes):
    try:
        sock.sendall(byte)
    except OSError as exc:
        logging.warning("could not send handoff reply: %s", exc)
