import hashlib
import socket
import statistics
import time

import pytest

import loopback_radio
from beacon_frames import FrameKind, classify_frame
from fatbeacon_transfer import InvalidBundle, SessionState, TransferError, VirtualClock
from html_bundler import ContentBundle
from loopback_radio import (
    SCAN_REQ,
    Advertiser,
    LoopbackEndpoint,
    PortInUse,
    ScanTimeout,
    scan_and_fetch,
)
from radio_sim import AdvertiserConfig, calibrated_ble4_profile, rssi_at, simulate_transfer

EPHEMERAL = LoopbackEndpoint("127.0.0.1", 0, 0)


def free_port(kind=socket.SOCK_DGRAM):
    with socket.socket(socket.AF_INET, kind) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture
def advertise():
    started = []

    def start(bundle, **kwargs):
        advertiser = Advertiser(bundle, EPHEMERAL, **kwargs).start()
        started.append(advertiser)
        return advertiser

    yield start
    for advertiser in started:
        advertiser.stop()


@pytest.mark.parametrize("size_kb", [10, 20, 40, 100, 200])
def test_end_to_end_integrity(advertise, corpus, size_kb):
    bundle = corpus[size_kb]
    advertiser = advertise(bundle)
    result = scan_and_fetch(advertiser.endpoint, timeout_s=10, notify=lambda line: None)

    assert result.title == bundle.title
    assert hashlib.sha256(result.content).digest() == bundle.content_hash
    assert result.packet.data == advertiser.packet.data


def test_unprofiled_fetch_is_fast(advertise, corpus):
    advertiser = advertise(corpus[40])
    result = scan_and_fetch(advertiser.endpoint, timeout_s=10, notify=lambda line: None)
    assert 0 < result.elapsed_s < 1.0


def test_notification_precedes_connection(advertise, corpus):
    advertiser = advertise(corpus[10])
    notifications = []
    result = scan_and_fetch(advertiser.endpoint, timeout_s=10, notify=notifications.append)

    assert notifications == [f"📶 FatBeacon nearby: {corpus[10].title}"]
    states = [line.split()[1] for line in result.events]
    assert states[0] == "IDLE" and "notified" in result.events[0]
    assert states.index("IDLE") < states.index("CONNECTING")
    assert states[-1] == "DONE"


def test_profiled_fetch_in_real_time(advertise, corpus):
    profile = calibrated_ble4_profile()
    advertiser = advertise(corpus[40])
    result = scan_and_fetch(advertiser.endpoint, timeout_s=10, profile=profile,
                            distance_m=1.0, seed=1, notify=lambda line: None)

    assert result.content == corpus[40].payload
    assert result.elapsed_s == pytest.approx(7.439, rel=0.15)
    assert result.packet.rssi_dbm == round(rssi_at(profile, 1.0))


def test_profiled_fetches_average_near_distance_median(advertise, corpus):
    profile = calibrated_ble4_profile()
    advertiser = advertise(corpus[40])
    near, far = [], []
    for seed in range(10):
        for distance, times in ((1.0, near), (15.0, far)):
            result = scan_and_fetch(advertiser.endpoint, timeout_s=10, profile=profile,
                                    distance_m=distance, seed=seed, notify=lambda line: None,
                                    clock=VirtualClock())
            assert result.elapsed_s == pytest.approx(
                simulate_transfer(profile, 40 * 1024, distance, seed=seed), abs=1e-6)
            times.append(result.elapsed_s)

    assert statistics.fmean(near) == pytest.approx(7.439, rel=0.15)
    assert statistics.fmean(far) > statistics.fmean(near)


def test_scan_timeout_without_advertiser():
    endpoint = LoopbackEndpoint("127.0.0.1", free_port(), free_port(socket.SOCK_STREAM))
    started = time.monotonic()
    with pytest.raises(ScanTimeout):
        scan_and_fetch(endpoint, timeout_s=0.5, notify=lambda line: None)
    assert time.monotonic() - started >= 0.5


def test_out_of_range_fetch_never_connects(advertise, corpus):
    advertiser = advertise(corpus[10])
    notifications = []
    with pytest.raises(TransferError, match="cannot connect"):
        scan_and_fetch(advertiser.endpoint, timeout_s=10, profile=calibrated_ble4_profile(),
                       distance_m=100.0, seed=1, notify=notifications.append)

    assert notifications == [f"📶 FatBeacon nearby: {corpus[10].title} (-47 dBm)"]
    time.sleep(0.3)
    assert advertiser.transfers_served == 0


def test_session_history_is_bounded(advertise, corpus, monkeypatch):
    monkeypatch.setattr(loopback_radio, "SESSION_HISTORY", 2)
    advertiser = advertise(corpus[10])
    for _ in range(3):
        scan_and_fetch(advertiser.endpoint, timeout_s=10, notify=lambda line: None)

    deadline = time.monotonic() + 5
    while advertiser.transfers_served < 3 and time.monotonic() < deadline:
        time.sleep(0.05)
    assert advertiser.transfers_served == 3
    assert len(advertiser.sessions) == 2
    assert all(s.state is SessionState.DONE for s in advertiser.sessions)


def test_second_advertiser_gets_port_in_use(advertise, corpus):
    first = advertise(corpus[10])
    with pytest.raises(PortInUse):
        Advertiser(corpus[10], first.endpoint).start()


def test_non_atomic_bundle_is_refused_before_broadcast():
    with pytest.raises(InvalidBundle):
        Advertiser(ContentBundle.from_html('<title>x</title><img src="http://x/y.png">'), EPHEMERAL)


def test_untitled_bundle_is_refused():
    with pytest.raises(loopback_radio.LoopbackError):
        Advertiser(ContentBundle.from_html("<p>no title</p>"), EPHEMERAL)


def test_advertising_rate(advertise, corpus):
    advertiser = advertise(corpus[40], config=AdvertiserConfig(interval_ms=100))
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.bind(("127.0.0.1", 0))
        sock.settimeout(0.5)
        sock.sendto(SCAN_REQ, ("127.0.0.1", advertiser.endpoint.adv_port))
        sock.recvfrom(64)

        packets = []
        deadline = time.monotonic() + 1.0
        while time.monotonic() < deadline:
            try:
                packets.append(sock.recvfrom(64)[0])
            except socket.timeout:
                break

    assert 7 <= len(packets) <= 13
    assert set(packets) == {advertiser.packet.data}
    assert classify_frame(packets[0]).kind is FrameKind.FATBEACON


def test_subscriptions_expire(advertise, corpus, monkeypatch):
    monkeypatch.setattr(loopback_radio, "SUBSCRIPTION_TTL_S", 0.3)
    advertiser = advertise(corpus[10])
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.bind(("127.0.0.1", 0))
        sock.sendto(SCAN_REQ, ("127.0.0.1", advertiser.endpoint.adv_port))
        time.sleep(0.15)
        assert advertiser.subscriber_count == 1
        time.sleep(0.6)
        assert advertiser.subscriber_count == 0


def test_capture_records_advertisements(advertise, corpus):
    advertiser = advertise(corpus[20])
    capture = []
    scan_and_fetch(advertiser.endpoint, timeout_s=10, notify=lambda line: None, capture=capture)
    assert capture and capture[-1].data == advertiser.packet.data


def test_endpoint_validation(monkeypatch):
    with pytest.raises(ValueError):
        LoopbackEndpoint("10.0.0.1", 1, 2)
    with pytest.raises(ValueError):
        LoopbackEndpoint("127.0.0.1", 5000, 5000)

    monkeypatch.setenv("FATBEACON_ADV_PORT", "41000")
    monkeypatch.setenv("FATBEACON_CONN_PORT", "41001")
    assert LoopbackEndpoint.from_env() == LoopbackEndpoint("127.0.0.1", 41000, 41001)
    assert LoopbackEndpoint.from_env(conn_port=42000).conn_port == 42000
