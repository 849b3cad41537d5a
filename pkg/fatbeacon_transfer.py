"""
FatBeacon Content Transfer
==========================
The connection half of the FatBeacon protocol: a beacon-side server that serves
an atomic ContentBundle in MTU-sized chunks, and a client that connects, reads
until completion and closes, timing the whole session from connect to close.

Wire format on the stream, after connection:

    client -> server   requested MTU        2 bytes, big endian
    server -> client   agreed MTU           2 bytes, big endian
    server -> client   total length         4 bytes, big endian
    server -> client   content              chunks of (MTU - 3) bytes, last may be short
    server closes

Each side drives a TransferSession state machine and logs one record per state
change as `ts_ns state event`.
"""

import logging
import math
import queue
import socket
import struct
import time
from dataclasses import dataclass
from enum import Enum

from beacon_frames import Classification, FatBeaconFrame, FrameKind
from html_bundler import validate_atomic

session_logger = logging.getLogger(__name__ + ".session")

# Configuration
ATT_HEADER_BYTES = 3
MIN_MTU = 23  # BLE 4.0 default ATT MTU
MAX_MTU = 512
DEFAULT_MTU = MIN_MTU
DEFAULT_IDLE_TIMEOUT_S = 90.0
LENGTH_HEADER = struct.Struct(">I")
MTU_FIELD = struct.Struct(">H")


class TransferError(Exception):
    """Base class for transfer failures"""


class LinkDropped(TransferError):
    def __init__(self, message="link dropped", received=0):
        super().__init__(message)
        self.received = received


class TransferTimeout(TransferError):
    pass


class LengthMismatch(TransferError):
    def __init__(self, expected, received):
        super().__init__(f"header announced {expected} bytes, received {received}")
        self.expected = expected
        self.received = received


class InvalidBundle(TransferError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("bundle is not atomic: " + ", ".join(str(v) for v in self.violations))


class NotAFatBeacon(TransferError):
    pass


class IllegalTransition(TransferError):
    pass


class NegativeInterval(ValueError):
    pass


class SessionState(Enum):
    IDLE = "idle"
    CONNECTING = "connecting"
    NEGOTIATING = "negotiating"
    TRANSFERRING = "transferring"
    CLOSING = "closing"
    DONE = "done"
    FAILED = "failed"


TRANSITIONS = {
    SessionState.IDLE: {SessionState.CONNECTING},
    SessionState.CONNECTING: {SessionState.NEGOTIATING},
    SessionState.NEGOTIATING: {SessionState.TRANSFERRING},
    SessionState.TRANSFERRING: {SessionState.CLOSING},
    SessionState.CLOSING: {SessionState.DONE},
    SessionState.DONE: set(),
    SessionState.FAILED: set(),
}
TERMINAL_STATES = {SessionState.DONE, SessionState.FAILED}


def is_legal_transition(current, target):
    if current in TERMINAL_STATES:
        return False
    return target is SessionState.FAILED or target in TRANSITIONS[current]


@dataclass(frozen=True)
class ChunkParams:
    mtu: int = DEFAULT_MTU

    def __post_init__(self):
        if not MIN_MTU <= self.mtu <= MAX_MTU:
            raise ValueError(f"mtu {self.mtu} outside [{MIN_MTU}, {MAX_MTU}]")

    @property
    def chunk_payload(self):
        return self.mtu - ATT_HEADER_BYTES


def compute_duration(start_ns, end_ns):
    """Milliseconds between two nanosecond samples"""
    if end_ns < start_ns:
        raise NegativeInterval(f"end {end_ns} precedes start {start_ns}")
    return (end_ns - start_ns) / 1e6


@dataclass(frozen=True)
class TransferTiming:
    start_time_ns: int
    end_time_ns: int
    difference_ms: float

    @classmethod
    def between(cls, start_ns, end_ns):
        return cls(start_ns, end_ns, compute_duration(start_ns, end_ns))

    @property
    def elapsed_s(self):
        return self.difference_ms / 1e3


def chunk_count(size_bytes, chunk_payload):
    return math.ceil(size_bytes / chunk_payload)


class MonotonicClock:
    def now_ns(self):
        return time.monotonic_ns()

    def sleep_until(self, deadline_ns):
        remaining = deadline_ns - time.monotonic_ns()
        if remaining > 0:
            time.sleep(remaining / 1e9)


class VirtualClock:
    """Only moves when someone sleeps on it"""

    def __init__(self, start_ns=0):
        self._now = start_ns

    def now_ns(self):
        return self._now

    def sleep_until(self, deadline_ns):
        self._now = max(self._now, int(deadline_ns))


class TransferSession:
    """One side of one content fetch"""

    def __init__(self, role, clock=None):
        self.role = role
        self.clock = clock or MonotonicClock()
        self.state = SessionState.IDLE
        self.failure_reason = None
        self.events = []
        self.bytes_moved = 0
        self.chunks = 0

    def transition(self, target, event=""):
        if not is_legal_transition(self.state, target):
            raise IllegalTransition(f"{self.state.name} -> {target.name}")
        self.state = target
        self._record(event or target.value)

    def fail(self, reason):
        if self.state in TERMINAL_STATES:
            return
        self.failure_reason = str(reason)
        self.transition(SessionState.FAILED, f"{self.role} failed: {reason}")

    def note(self, event):
        """Record an event without changing state"""
        self._record(event)

    def _record(self, event):
        line = f"{self.clock.now_ns()} {self.state.name} {event}"
        self.events.append(line)
        session_logger.info(line)


class Link:
    """A reliable in-order byte stream between a beacon and a client"""

    def open(self):
        pass

    def send(self, data):
        raise NotImplementedError

    def recv(self, max_bytes):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def recv_exact(self, n):
        data = bytearray()
        while len(data) < n:
            piece = self.recv(n - len(data))
            if not piece:
                raise LinkDropped(f"stream ended after {len(data)} of {n} bytes",
                                  received=len(data))
            data.extend(piece)
        return bytes(data)


class LoopbackLink(Link):
    """In-memory link end; build connected ends with LoopbackLink.pair()"""

    _EOF = None

    def __init__(self, inbox, outbox, timeout_s=DEFAULT_IDLE_TIMEOUT_S):
        self._inbox = inbox
        self._outbox = outbox
        self._buffer = bytearray()
        self._eof = False
        self._closed = False
        self.timeout_s = timeout_s
        self.sends = 0

    @classmethod
    def pair(cls, timeout_s=DEFAULT_IDLE_TIMEOUT_S):
        a_to_b, b_to_a = queue.Queue(), queue.Queue()
        return cls(b_to_a, a_to_b, timeout_s), cls(a_to_b, b_to_a, timeout_s)

    def send(self, data):
        if self._closed:
            raise LinkDropped("send on closed link")
        self._outbox.put(bytes(data))
        self.sends += 1

    def recv(self, max_bytes):
        if not self._buffer and not self._eof:
            try:
                item = self._inbox.get(timeout=self.timeout_s)
            except queue.Empty:
                raise TransferTimeout(f"no data for {self.timeout_s} s") from None
            if item is self._EOF:
                self._eof = True
            else:
                self._buffer.extend(item)
        data = bytes(self._buffer[:max_bytes])
        del self._buffer[:max_bytes]
        return data

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(self._EOF)


class SocketLink(Link):
    """TCP stream link; connects lazily in open() when given an address"""

    def __init__(self, sock=None, address=None, timeout_s=DEFAULT_IDLE_TIMEOUT_S):
        self.sock = sock
        self.address = address
        self.timeout_s = timeout_s
        if sock is not None:
            sock.settimeout(timeout_s)

    def open(self):
        if self.sock is not None:
            return
        try:
            self.sock = socket.create_connection(self.address, timeout=self.timeout_s)
        except socket.timeout as e:
            raise TransferTimeout(f"connect to {self.address} timed out") from e
        except OSError as e:
            raise LinkDropped(f"connect to {self.address} failed: {e}") from e
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data):
        try:
            self.sock.sendall(data)
        except socket.timeout as e:
            raise TransferTimeout("send timed out") from e
        except OSError as e:
            raise LinkDropped(f"send failed: {e}") from e

    def recv(self, max_bytes):
        try:
            return self.sock.recv(max_bytes)
        except socket.timeout as e:
            raise TransferTimeout(f"no data for {self.timeout_s} s") from e
        except OSError as e:
            raise LinkDropped(f"receive failed: {e}") from e

    def close(self):
        if self.sock is None:
            return
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class ChunkPacer:
    """Client-side hook around each protocol step; the default adds no delay"""

    def on_connect(self, clock, start_ns):
        pass

    def on_header(self, total_bytes, chunk_payload):
        pass

    def after_chunk(self, index):
        pass


def serve(bundle, params, link, session=None):
    """Serve bundle over an accepted link; returns bytes served (header included)"""
    violations = validate_atomic(bundle)
    if violations:
        raise InvalidBundle(violations)

    session = session or TransferSession("server")
    payload = bundle.payload
    try:
        session.transition(SessionState.CONNECTING, "accepted")
        session.transition(SessionState.NEGOTIATING)
        (requested,) = MTU_FIELD.unpack(link.recv_exact(MTU_FIELD.size))
        agreed = ChunkParams(min(max(requested, MIN_MTU), params.mtu))
        link.send(MTU_FIELD.pack(agreed.mtu))

        session.transition(SessionState.TRANSFERRING, f"mtu={agreed.mtu} size={len(payload)}")
        link.send(LENGTH_HEADER.pack(len(payload)))
        session.bytes_moved = LENGTH_HEADER.size
        step = agreed.chunk_payload
        for offset in range(0, len(payload), step):
            chunk = payload[offset:offset + step]
            link.send(chunk)
            session.chunks += 1
            session.bytes_moved += len(chunk)

        session.transition(SessionState.CLOSING, f"chunks={session.chunks}")
        link.close()
        session.transition(SessionState.DONE, f"served={session.bytes_moved}")
    except TransferError as e:
        session.fail(e)
        link.close()
        raise
    return session.bytes_moved


def _fatbeacon_of(peer):
    if isinstance(peer, Classification):
        if peer.kind is not FrameKind.FATBEACON:
            raise NotAFatBeacon(f"peer classified as {peer.kind.value}")
        peer = peer.frame
    if not isinstance(peer, FatBeaconFrame):
        raise NotAFatBeacon(f"{peer!r} is not a FatBeacon frame")
    return peer


def fetch(peer, link, params=None, pacer=None, clock=None, session=None):
    """Connect, read the whole content, close; timed from connect to close"""
    frame = _fatbeacon_of(peer)
    params = params or ChunkParams()
    pacer = pacer or ChunkPacer()
    clock = clock or MonotonicClock()
    session = session or TransferSession("client", clock)

    received = bytearray()
    try:
        start_ns = clock.now_ns()
        session.transition(SessionState.CONNECTING, f"connect title={frame.title!r}")
        link.open()
        pacer.on_connect(clock, start_ns)

        session.transition(SessionState.NEGOTIATING, f"request mtu={params.mtu}")
        link.send(MTU_FIELD.pack(params.mtu))
        (mtu,) = MTU_FIELD.unpack(link.recv_exact(MTU_FIELD.size))
        agreed = ChunkParams(mtu)

        (total,) = LENGTH_HEADER.unpack(link.recv_exact(LENGTH_HEADER.size))
        session.transition(SessionState.TRANSFERRING, f"mtu={agreed.mtu} size={total}")
        pacer.on_header(total, agreed.chunk_payload)
        index = 0
        while len(received) < total:
            want = min(agreed.chunk_payload, total - len(received))
            try:
                received.extend(link.recv_exact(want))
            except LinkDropped as e:
                raise LinkDropped(str(e), received=len(received) + e.received) from e
            pacer.after_chunk(index)
            index += 1
        session.chunks = index
        session.bytes_moved = len(received)

        session.transition(SessionState.CLOSING, f"chunks={index}")
        trailing = link.recv(1)
        if trailing:
            raise LengthMismatch(total, len(received) + len(trailing))
        link.close()
        end_ns = clock.now_ns()
        session.transition(SessionState.DONE, f"received={len(received)}")
    except TransferError as e:
        session.fail(e)
        link.close()
        raise
    except Exception as e:
        # an out-of-range MTU from the server, or the pacer giving up on the link
        session.fail(e)
        link.close()
        raise TransferError(str(e)) from e

    return bytes(received), TransferTiming.between(start_ns, end_ns)
