"""
Loopback Radio
==============
Stands in for the two phones of a field test on one machine. A UDP port plays
the advertising channel and a TCP port plays the GATT connection.

Advertising works like BLE active scanning: a scanner sends SCAN_REQ to the
advertiser's UDP port (and repeats it every second), and the advertiser sends
its encoded RawAdvPacket to every live scanner once per advertising interval.
Datagrams carry the packet bytes exactly, so a capture is a frames.hex file.
"""

import collections
import errno
import ipaddress
import logging
import os
import select
import socket
import threading
import time
from dataclasses import dataclass

from beacon_frames import FatBeaconFrame, FrameError, FrameKind, RawAdvPacket, classify_frame, encode_fatbeacon
from fatbeacon_transfer import (
    ChunkParams,
    InvalidBundle,
    MonotonicClock,
    SocketLink,
    TransferError,
    TransferSession,
    fetch,
    serve,
)
from html_bundler import validate_atomic
from radio_sim import AdvertiserConfig, LinkOutOfRange, SimulatedPacer, rssi_at

logger = logging.getLogger(__name__)

# Configuration
DEFAULT_HOST = "127.0.0.1"
DEFAULT_ADV_PORT = 47800
DEFAULT_CONN_PORT = 47801
SCAN_REQ = b"SCAN_REQ"
SCAN_REQUEST_INTERVAL_S = 1.0
SUBSCRIPTION_TTL_S = 5.0
ACCEPT_POLL_S = 0.2
MAX_DATAGRAM = 64
SESSION_HISTORY = 32


class LoopbackError(Exception):
    """Base class for advertiser / scanner failures"""


class PortInUse(LoopbackError):
    pass


class ScanTimeout(LoopbackError):
    pass


@dataclass(frozen=True)
class LoopbackEndpoint:
    host: str = DEFAULT_HOST
    adv_port: int = DEFAULT_ADV_PORT
    conn_port: int = DEFAULT_CONN_PORT

    def __post_init__(self):
        if self.host != "localhost" and not ipaddress.ip_address(self.host).is_loopback:
            raise ValueError(f"{self.host} is not a loopback address")
        # port 0 on both sides asks the OS for two ephemeral ports
        if self.adv_port == self.conn_port and self.adv_port != 0:
            raise ValueError(f"adv_port and conn_port must differ, both are {self.adv_port}")

    @classmethod
    def from_env(cls, host=None, adv_port=None, conn_port=None):
        """Explicit values win over FATBEACON_* variables, which win over defaults"""
        return cls(
            host=host or os.getenv("FATBEACON_HOST", DEFAULT_HOST),
            adv_port=int(adv_port if adv_port is not None
                         else os.getenv("FATBEACON_ADV_PORT", DEFAULT_ADV_PORT)),
            conn_port=int(conn_port if conn_port is not None
                          else os.getenv("FATBEACON_CONN_PORT", DEFAULT_CONN_PORT)),
        )


class Advertiser:
    """Broadcasts one bundle's FatBeacon frame and serves the bundle on connect"""

    def __init__(self, bundle, endpoint=None, config=None, params=None, idle_timeout_s=None):
        violations = validate_atomic(bundle)
        if violations:
            raise InvalidBundle(violations)
        if not bundle.title:
            raise LoopbackError("bundle has no title to advertise")

        self.bundle = bundle
        self.endpoint = endpoint or LoopbackEndpoint.from_env()
        self.config = config or AdvertiserConfig()
        self.params = params or ChunkParams()
        self.idle_timeout_s = idle_timeout_s
        self.packet = encode_fatbeacon(FatBeaconFrame(self.config.tx_power_dbm, bundle.title))

        # only the most recent sessions are kept
        self.sessions = collections.deque(maxlen=SESSION_HISTORY)
        self.transfers_served = 0
        self.advertisements_sent = 0
        self._subscribers = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads = []
        self._udp = None
        self._tcp = None

    def start(self):
        host = self.endpoint.host
        udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            udp.bind((host, self.endpoint.adv_port))
        except OSError as e:
            udp.close()
            if e.errno == errno.EADDRINUSE:
                raise PortInUse(f"advertising port {self.endpoint.adv_port} is taken") from e
            raise

        tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            tcp.bind((host, self.endpoint.conn_port))
        except OSError as e:
            udp.close()
            tcp.close()
            if e.errno == errno.EADDRINUSE:
                raise PortInUse(f"connection port {self.endpoint.conn_port} is taken") from e
            raise
        tcp.listen(8)
        tcp.settimeout(ACCEPT_POLL_S)

        self._udp, self._tcp = udp, tcp
        self.endpoint = LoopbackEndpoint(host, udp.getsockname()[1], tcp.getsockname()[1])
        self._stop.clear()
        self._threads = [
            threading.Thread(target=self._radio_loop, name="fatbeacon-radio", daemon=True),
            threading.Thread(target=self._accept_loop, name="fatbeacon-accept", daemon=True),
        ]
        for thread in self._threads:
            thread.start()
        logger.info("advertising %r every %d ms on %s", self.bundle.title,
                    self.config.interval_ms, self.endpoint)
        return self

    def stop(self):
        self._stop.set()
        for thread in self._threads:
            thread.join()
        self._threads = []
        for sock in (self._udp, self._tcp):
            if sock is not None:
                sock.close()
        self._udp = self._tcp = None

    def wait(self):
        """Block until stop() is called from another thread"""
        while not self._stop.wait(0.5):
            pass

    def serve_forever(self):
        self.start()
        try:
            self.wait()
        finally:
            self.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    @property
    def subscriber_count(self):
        with self._lock:
            return len(self._subscribers)

    def _radio_loop(self):
        interval = self.config.interval_ms / 1000
        next_adv = time.monotonic()
        while not self._stop.is_set():
            wait = min(ACCEPT_POLL_S, max(0.0, next_adv - time.monotonic()))
            ready, _, _ = select.select([self._udp], [], [], wait)
            now = time.monotonic()
            if ready:
                try:
                    data, addr = self._udp.recvfrom(MAX_DATAGRAM)
                except OSError:
                    continue
                if data == SCAN_REQ:
                    with self._lock:
                        if addr not in self._subscribers:
                            logger.debug("scanner subscribed from %s:%d", *addr)
                        self._subscribers[addr] = now
            if now >= next_adv:
                self._advertise(now)
                next_adv += interval
                if next_adv < now:
                    next_adv = now + interval

    def _advertise(self, now):
        with self._lock:
            expired = [a for a, seen in self._subscribers.items() if now - seen > SUBSCRIPTION_TTL_S]
            for addr in expired:
                del self._subscribers[addr]
            targets = list(self._subscribers)
        for addr in targets:
            try:
                self._udp.sendto(self.packet.data, addr)
                self.advertisements_sent += 1
            except OSError as e:
                logger.debug("advertisement to %s:%d failed: %s", *addr, e)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, addr = self._tcp.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve_one, args=(conn, addr),
                             name="fatbeacon-serve", daemon=True).start()

    def _serve_one(self, conn, addr):
        session = TransferSession("server")
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        kwargs = {} if self.idle_timeout_s is None else {"timeout_s": self.idle_timeout_s}
        link = SocketLink(conn, **kwargs)
        try:
            served = serve(self.bundle, self.params, link, session)
            logger.info("served %d bytes to %s:%d", served, *addr)
        except TransferError as e:
            logger.warning("transfer to %s:%d failed: %s", *addr, e)
        finally:
            with self._lock:
                self.sessions.append(session)
                self.transfers_served += 1


@dataclass(frozen=True)
class ScanResult:
    title: str
    content: bytes
    elapsed_s: float
    packet: RawAdvPacket
    timing: object
    events: tuple


def scan(endpoint, timeout_s, rssi_dbm=None, capture=None):
    """Wait for the first FatBeacon advertisement; returns (classification, packet)"""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind((endpoint.host, 0))
    target = (endpoint.host, endpoint.adv_port)
    deadline = time.monotonic() + timeout_s
    next_request = time.monotonic()
    try:
        while True:
            now = time.monotonic()
            if now >= deadline:
                raise ScanTimeout(f"no FatBeacon seen on {endpoint.host}:{endpoint.adv_port} "
                                  f"within {timeout_s} s")
            if now >= next_request:
                try:
                    sock.sendto(SCAN_REQ, target)
                except OSError:
                    pass
                next_request = now + SCAN_REQUEST_INTERVAL_S

            ready, _, _ = select.select([sock], [], [], max(0.0, min(deadline, next_request) - now))
            if not ready:
                continue
            try:
                data, _ = sock.recvfrom(MAX_DATAGRAM)
            except ConnectionRefusedError:
                # nothing listening yet on the advertising port
                continue
            try:
                packet = RawAdvPacket(data, rssi_dbm)
            except FrameError:
                continue
            if capture is not None:
                capture.append(packet)

            classification = classify_frame(packet)
            if classification.kind is FrameKind.FATBEACON:
                return classification, packet
            logger.debug("ignoring %s advertisement", classification.kind.value)
    finally:
        sock.close()


def scan_and_fetch(endpoint, timeout_s, profile=None, distance_m=1.0, seed=None,
                   notify=print, capture=None, params=None, clock=None,
                   idle_timeout_s=None):
    """Scan, notify the title, then fetch the content it names"""
    rssi = round(rssi_at(profile, distance_m)) if profile is not None else None
    classification, packet = scan(endpoint, timeout_s, rssi, capture)
    title = classification.frame.title

    clock = clock or MonotonicClock()
    session = TransferSession("client", clock)
    line = f"📶 FatBeacon nearby: {title}"
    if rssi is not None:
        line += f" ({rssi} dBm)"
    notify(line)
    session.note(f"notified title={title!r}")

    pacer = None
    if profile is not None:
        try:
            pacer = SimulatedPacer(profile, distance_m, seed)
        except LinkOutOfRange as e:
            session.fail(e)
            raise TransferError(f"cannot connect to {title!r}: {e}") from e
    kwargs = {} if idle_timeout_s is None else {"timeout_s": idle_timeout_s}
    link = SocketLink(address=(endpoint.host, endpoint.conn_port), **kwargs)
    content, timing = fetch(classification, link, params, pacer, clock, session)
    return ScanResult(
        title=title,
        content=content,
        elapsed_s=timing.elapsed_s,
        packet=packet,
        timing=timing,
        events=tuple(session.events),
    )
