"""
Beacon Advertisement Frames
===========================
Encodes and classifies the advertisement packets a scanner sees: classic
Eddystone-URL beacons (a compressed URL to fetch over the Internet) and
FatBeacons (a title for content served over a Bluetooth connection).

Both frame kinds share the Eddystone service-data layout:

    AA FE | 0x10 | tx power | scheme | body
    uuid    type   int8 dBm   byte     URL or title bytes

Scheme bytes 0x00-0x03 are URL prefixes; 0x0E marks a FatBeacon whose body is
the UTF-8 title of the hosted page.
"""

import struct
from dataclasses import dataclass
from enum import Enum

# Configuration
SERVICE_DATA_HEADER = b"\xaa\xfe"  # 16-bit UUID 0xFEAA, little endian
FRAME_TYPE_URL = 0x10
FATBEACON_SCHEME = 0x0E
MAX_PACKET_BYTES = 31
MAX_URL_BYTES = 18  # scheme byte + up to 17 compressed URL bytes
MAX_TITLE_BYTES = 26
TX_POWER_RANGE = (-100, 20)

URL_SCHEMES = {
    0x00: "http://www.",
    0x01: "https://www.",
    0x02: "http://",
    0x03: "https://",
}

URL_EXPANSIONS = {
    0x00: ".com/",
    0x01: ".org/",
    0x02: ".edu/",
    0x03: ".net/",
    0x04: ".info/",
    0x05: ".biz/",
    0x06: ".gov/",
    0x07: ".com",
    0x08: ".org",
    0x09: ".edu",
    0x0A: ".net",
    0x0B: ".info",
    0x0C: ".biz",
    0x0D: ".gov",
}

# longest first, so ".com/" wins over ".com"
_SCHEMES_BY_LENGTH = sorted(URL_SCHEMES.items(), key=lambda kv: -len(kv[1]))
_EXPANSIONS_BY_LENGTH = sorted(URL_EXPANSIONS.items(), key=lambda kv: -len(kv[1]))


class FrameError(ValueError):
    """Base class for frame encoding failures"""


class UrlTooLong(FrameError):
    pass


class UnsupportedScheme(FrameError):
    pass


class InvalidUrlCharacter(FrameError):
    pass


class TitleTooLong(FrameError):
    pass


class InvalidTitle(FrameError):
    pass


class TxPowerOutOfRange(FrameError):
    pass


def _check_tx_power(tx_power_dbm):
    low, high = TX_POWER_RANGE
    if not isinstance(tx_power_dbm, int) or not low <= tx_power_dbm <= high:
        raise TxPowerOutOfRange(f"tx power {tx_power_dbm!r} outside [{low}, {high}] dBm")


@dataclass(frozen=True)
class EddystoneUrlFrame:
    tx_power_dbm: int
    url: str


@dataclass(frozen=True)
class FatBeaconFrame:
    tx_power_dbm: int
    title: str


@dataclass(frozen=True)
class RawAdvPacket:
    data: bytes
    rssi_dbm: int = None

    def __post_init__(self):
        if len(self.data) > MAX_PACKET_BYTES:
            raise FrameError(f"advertisement of {len(self.data)} bytes exceeds {MAX_PACKET_BYTES}")


class FrameKind(Enum):
    URL_BEACON = "url"
    FATBEACON = "fatbeacon"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Classification:
    kind: FrameKind
    frame: object = None


UNKNOWN = Classification(FrameKind.UNKNOWN)


def compress_url(url):
    """Split url into its scheme byte and compressed body"""
    for code, prefix in _SCHEMES_BY_LENGTH:
        if url.startswith(prefix):
            scheme, rest = code, url[len(prefix):]
            break
    else:
        raise UnsupportedScheme(f"no Eddystone scheme prefix matches {url!r}")

    body = bytearray()
    i = 0
    while i < len(rest):
        for code, expansion in _EXPANSIONS_BY_LENGTH:
            if rest.startswith(expansion, i):
                body.append(code)
                i += len(expansion)
                break
        else:
            ch = rest[i]
            if not 0x21 <= ord(ch) <= 0x7E:
                raise InvalidUrlCharacter(f"{ch!r} cannot be carried in an Eddystone URL")
            body.append(ord(ch))
            i += 1

    if 1 + len(body) > MAX_URL_BYTES:
        raise UrlTooLong(f"{url!r} compresses to {1 + len(body)} bytes, limit {MAX_URL_BYTES}")
    return scheme, bytes(body)


def expand_url(scheme, body):
    if scheme not in URL_SCHEMES:
        raise UnsupportedScheme(f"unknown scheme byte 0x{scheme:02x}")
    parts = [URL_SCHEMES[scheme]]
    for byte in body:
        if byte in URL_EXPANSIONS:
            parts.append(URL_EXPANSIONS[byte])
        elif 0x21 <= byte <= 0x7E:
            parts.append(chr(byte))
        else:
            raise InvalidUrlCharacter(f"byte 0x{byte:02x} is neither an expansion nor printable")
    return "".join(parts)


def _frame_header(tx_power_dbm, scheme):
    return SERVICE_DATA_HEADER + struct.pack("BbB", FRAME_TYPE_URL, tx_power_dbm, scheme)


def encode_eddystone_url(frame):
    _check_tx_power(frame.tx_power_dbm)
    scheme, body = compress_url(frame.url)
    return RawAdvPacket(_frame_header(frame.tx_power_dbm, scheme) + body)


def encode_fatbeacon(frame):
    _check_tx_power(frame.tx_power_dbm)
    title = frame.title.encode("utf-8")
    if not title:
        raise InvalidTitle("FatBeacon title must be non-empty")
    if len(title) > MAX_TITLE_BYTES:
        raise TitleTooLong(f"title is {len(title)} bytes, limit {MAX_TITLE_BYTES}")
    return RawAdvPacket(_frame_header(frame.tx_power_dbm, FATBEACON_SCHEME) + title)


def classify_frame(packet):
    """Total classifier: anything malformed is UNKNOWN"""
    data = packet.data if isinstance(packet, RawAdvPacket) else bytes(packet)
    header_len = len(SERVICE_DATA_HEADER) + 3
    if len(data) < header_len or len(data) > MAX_PACKET_BYTES:
        return UNKNOWN
    if not data.startswith(SERVICE_DATA_HEADER):
        return UNKNOWN

    frame_type, tx_power, scheme = struct.unpack("BbB", data[2:header_len])
    body = data[header_len:]
    if frame_type != FRAME_TYPE_URL:
        return UNKNOWN
    low, high = TX_POWER_RANGE
    if not low <= tx_power <= high:
        return UNKNOWN

    if scheme == FATBEACON_SCHEME:
        if not body or len(body) > MAX_TITLE_BYTES:
            return UNKNOWN
        try:
            title = body.decode("utf-8")
        except UnicodeDecodeError:
            return UNKNOWN
        return Classification(FrameKind.FATBEACON, FatBeaconFrame(tx_power, title))

    if 1 + len(body) > MAX_URL_BYTES:
        return UNKNOWN
    try:
        url = expand_url(scheme, body)
    except FrameError:
        return UNKNOWN
    return Classification(FrameKind.URL_BEACON, EddystoneUrlFrame(tx_power, url))


# Hex dumps: lowercase, space separated, one packet per line, '#' comments

def format_hex(data):
    return " ".join(f"{b:02x}" for b in data)


def read_hex_dump(text):
    packets = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            packets.append(bytes.fromhex(line))
    return packets


def format_hex_dump(packets, comments=None):
    lines = []
    for i, packet in enumerate(packets):
        if comments and comments[i]:
            lines.append(f"# {comments[i]}")
        data = packet.data if isinstance(packet, RawAdvPacket) else packet
        lines.append(format_hex(data))
    return "\n".join(lines) + "\n"
