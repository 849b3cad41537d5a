"""
Radio Channel Simulator
=======================
Deterministic, seedable model of the BLE link between a FatBeacon and a phone:
log-distance RSSI, a logistic packet error rate in SNR, and a transfer time made
of a fixed connection setup plus per-chunk airtime multiplied by geometric
retransmission counts.

Also carries the closed-form BLE5 / 2G / 3G download times measured against
BLE4, and the fits that calibrate the BLE4 profile from those measurements.

Units: sizes in kb are KiB (1024 bytes); phy_rate_kbps counts 1024-bit kilobits,
so bytes per second = phy_rate_kbps * 128.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.linear_model import LinearRegression
from sklearn.metrics import mean_squared_error, r2_score

from fatbeacon_transfer import ATT_HEADER_BYTES, DEFAULT_MTU, ChunkPacer

logger = logging.getLogger(__name__)

# Configuration
BYTES_PER_KB = 1024
DEFAULT_CHUNK_PAYLOAD = DEFAULT_MTU - ATT_HEADER_BYTES
DEFAULT_TX_POWER_DBM = -7
DEFAULT_INTERVAL_MS = 100
DEFAULT_NOISE_FLOOR_DBM = -90.0
DEFAULT_PATH_LOSS_EXPONENT = 2.0
PATH_LOSS_EXPONENT_RANGE = (1.6, 4.0)
INTERVAL_MS_RANGE = (20, 10240)
PER_SLOPE_PER_DB = 0.8
PER_MIDPOINT_SNR_DB = 8.0
MAX_USABLE_PER = 0.99
BLE5_SPEEDUP = 4.0
REFERENCE_SIZES_KB = (10, 20, 40, 100, 200)


class Protocol(Enum):
    BLE4 = "BLE4"
    BLE5 = "BLE5"
    G2 = "2G"
    G3 = "3G"

    @classmethod
    def parse(cls, text):
        text = str(text).strip()
        for member in cls:
            if text.upper() in (member.name, member.value):
                return member
        raise ValueError(f"unknown protocol {text!r}")


# Download times in seconds per size in kb. BLE4 is measured at 1 m (medians of
# five runs); BLE5 follows the BLE5 specification, 2G/3G the 3GPP rates. 3G times
# under half a second are printed as 0.
BASELINE_TABLE = {
    Protocol.BLE4: {10: 5.21, 20: 8.82, 40: 7.43, 100: 15.18, 200: 28.14},
    Protocol.BLE5: {10: 1.30, 20: 2.20, 40: 1.85, 100: 3.79, 200: 7.03},
    Protocol.G2: {10: 5, 20: 11, 40: 23, 100: 58, 200: 107},
    Protocol.G3: {10: 0, 20: 0, 40: 0, 100: 2, 200: 4},
}

# 40 kb medians (best and worst discarded) per distance in metres
DISTANCE_REFERENCE_40KB = {1.0: 7.439, 5.0: 6.718, 10.0: 7.117, 15.0: 8.075}


class RadioError(Exception):
    """Base class for simulator failures"""


class ProfileError(RadioError, ValueError):
    pass


class NonPositiveDistance(RadioError, ValueError):
    pass


class LinkOutOfRange(RadioError):
    pass


class DegenerateFit(RadioError, ValueError):
    pass


class OutOfRange(RadioError, ValueError):
    pass


@dataclass(frozen=True)
class LinkProfile:
    phy_rate_kbps: float
    setup_latency_s: float
    per_chunk_overhead_s: float = 0.0
    path_loss_exponent: float = DEFAULT_PATH_LOSS_EXPONENT
    tx_power_dbm: int = DEFAULT_TX_POWER_DBM
    noise_floor_dbm: float = DEFAULT_NOISE_FLOOR_DBM
    rng_seed: int = 0

    def __post_init__(self):
        if not self.phy_rate_kbps > 0:
            raise ProfileError(f"phy_rate_kbps must be > 0, got {self.phy_rate_kbps}")
        if self.setup_latency_s < 0 or self.per_chunk_overhead_s < 0:
            raise ProfileError("latencies must be >= 0")
        low, high = PATH_LOSS_EXPONENT_RANGE
        if not low <= self.path_loss_exponent <= high:
            raise ProfileError(f"path_loss_exponent {self.path_loss_exponent} outside [{low}, {high}]")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ProfileError("rng_seed must fit in 64 bits")

    @property
    def bytes_per_second(self):
        return self.phy_rate_kbps * BYTES_PER_KB / 8

    @classmethod
    def from_mapping(cls, values):
        known = {k: v for k, v in values.items() if k in _PROFILE_FIELDS}
        missing = {"phy_rate_kbps", "setup_latency_s"} - known.keys()
        if missing:
            raise ProfileError(f"profile is missing {', '.join(sorted(missing))}")
        try:
            return cls(**{k: _PROFILE_FIELDS[k](v) for k, v in known.items()})
        except (TypeError, ValueError) as e:
            if isinstance(e, ProfileError):
                raise
            raise ProfileError(f"bad profile value: {e}") from e

    def to_mapping(self):
        return {name: getattr(self, name) for name in _PROFILE_FIELDS}


_PROFILE_FIELDS = {
    "phy_rate_kbps": float,
    "setup_latency_s": float,
    "per_chunk_overhead_s": float,
    "path_loss_exponent": float,
    "tx_power_dbm": int,
    "noise_floor_dbm": float,
    "rng_seed": int,
}


@dataclass(frozen=True)
class AdvertiserConfig:
    interval_ms: int = DEFAULT_INTERVAL_MS
    tx_power_dbm: int = DEFAULT_TX_POWER_DBM

    def __post_init__(self):
        low, high = INTERVAL_MS_RANGE
        if not low <= self.interval_ms <= high:
            raise ProfileError(f"interval_ms {self.interval_ms} outside [{low}, {high}]")

    @property
    def per_second(self):
        return 1000 / self.interval_ms

    @classmethod
    def from_mapping(cls, values):
        kwargs = {}
        if "interval_ms" in values:
            kwargs["interval_ms"] = int(values["interval_ms"])
        if "tx_power_dbm" in values:
            kwargs["tx_power_dbm"] = int(values["tx_power_dbm"])
        return cls(**kwargs)


@dataclass(frozen=True)
class BaselineModel:
    protocol: Protocol
    reference_times: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(REFERENCE_SIZES_KB) - set(self.reference_times)
        if missing:
            raise ProfileError(f"{self.protocol.value} table lacks sizes {sorted(missing)}")


def baseline_models():
    return {p: BaselineModel(p, dict(times)) for p, times in BASELINE_TABLE.items()}


def baseline_time(model, size_kb, interpolate=True, extrapolate=False):
    """Table time for size_kb; linear between reference sizes"""
    table = model.reference_times
    if size_kb in table:
        return float(table[size_kb])

    sizes = sorted(table)
    times = [float(table[s]) for s in sizes]
    if not interpolate:
        raise OutOfRange(f"{size_kb} kb is not a reference size and interpolation is off")
    if sizes[0] <= size_kb <= sizes[-1]:
        return float(np.interp(size_kb, sizes, times))
    if not extrapolate:
        raise OutOfRange(f"{size_kb} kb outside [{sizes[0]}, {sizes[-1]}]")

    i = 0 if size_kb < sizes[0] else len(sizes) - 2
    slope = (times[i + 1] - times[i]) / (sizes[i + 1] - sizes[i])
    return max(0.0, times[i] + slope * (size_kb - sizes[i]))


def rssi_at(profile, distance_m):
    """Log-distance path loss referenced to the calibrated power at 1 m"""
    if not distance_m > 0:
        raise NonPositiveDistance(f"distance must be > 0 m, got {distance_m}")
    return profile.tx_power_dbm - 10 * profile.path_loss_exponent * math.log10(distance_m)


def packet_error_rate(rssi_dbm, noise_floor_dbm):
    snr = rssi_dbm - noise_floor_dbm
    return float(expit(-PER_SLOPE_PER_DB * (snr - PER_MIDPOINT_SNR_DB)))


def _chunk_times(profile, size_bytes, chunk_payload):
    if size_bytes < 0:
        raise ValueError(f"size must be >= 0 bytes, got {size_bytes}")
    if chunk_payload < 1:
        raise ValueError("chunk payload must be >= 1 byte")
    full, tail = divmod(size_bytes, chunk_payload)
    sizes = np.full(full, chunk_payload, dtype=float)
    if tail:
        sizes = np.append(sizes, float(tail))
    return sizes / profile.bytes_per_second + profile.per_chunk_overhead_s


def _usable_per(profile, distance_m):
    per = packet_error_rate(rssi_at(profile, distance_m), profile.noise_floor_dbm)
    if per > MAX_USABLE_PER:
        raise LinkOutOfRange(f"packet error rate {per:.3f} at {distance_m} m, no usable link")
    return per


def chunk_delays(profile, size_bytes, distance_m, chunk_payload=DEFAULT_CHUNK_PAYLOAD, seed=None):
    """Airtime of every chunk including its retransmissions"""
    per = _usable_per(profile, distance_m)
    chunk_times = _chunk_times(profile, size_bytes, chunk_payload)
    rng = np.random.default_rng(profile.rng_seed if seed is None else seed)
    attempts = rng.geometric(1.0 - per, size=chunk_times.size)
    return chunk_times * attempts


def simulate_transfer(profile, size_bytes, distance_m, chunk_payload=DEFAULT_CHUNK_PAYLOAD, seed=None):
    delays = chunk_delays(profile, size_bytes, distance_m, chunk_payload, seed)
    return profile.setup_latency_s + float(delays.sum())


def expected_transfer_time(profile, size_bytes, distance_m, chunk_payload=DEFAULT_CHUNK_PAYLOAD):
    per = _usable_per(profile, distance_m)
    airtime = float(_chunk_times(profile, size_bytes, chunk_payload).sum())
    return profile.setup_latency_s + airtime / (1.0 - per)


@dataclass(frozen=True)
class Residual:
    size_kb: float
    measured_s: float
    predicted_s: float

    @property
    def relative_error(self):
        return (self.predicted_s - self.measured_s) / self.measured_s


@dataclass(frozen=True)
class Calibration:
    profile: LinkProfile
    setup_latency_s: float
    rate_kBps: float
    r2: float
    rmse_s: float
    residuals: tuple

    @property
    def worst_relative_error(self):
        return max(abs(r.relative_error) for r in self.residuals)


def calibrate_ble4(medians, base=None):
    """Least-squares fit of time = setup + size / rate over (size_kb, seconds) pairs"""
    if isinstance(medians, Mapping):
        pairs = list(medians.items())
    else:
        pairs = [tuple(p) for p in medians]
    if len(pairs) < 2:
        raise DegenerateFit("need at least two (size, time) points")

    sizes = np.array([float(s) for s, _ in pairs])
    times = np.array([float(t) for _, t in pairs])
    if np.ptp(sizes) == 0:
        raise DegenerateFit("all sizes are equal, the rate is undetermined")

    X = sizes.reshape(-1, 1)
    model = LinearRegression().fit(X, times)
    slope, intercept = float(model.coef_[0]), float(model.intercept_)
    if slope <= 0:
        raise DegenerateFit(f"time does not grow with size (slope {slope:.4g} s/kb)")
    if intercept < 0:
        raise DegenerateFit(f"negative setup latency {intercept:.4g} s")

    predicted = model.predict(X)
    rate_kBps = 1.0 / slope
    base = base or LinkProfile(phy_rate_kbps=1.0, setup_latency_s=0.0)
    profile = replace(base, phy_rate_kbps=rate_kBps * 8, setup_latency_s=intercept)
    residuals = tuple(
        Residual(float(s), float(t), float(p)) for s, t, p in zip(sizes, times, predicted)
    )
    logger.info("calibrated BLE4: setup %.4f s, rate %.4f kB/s", intercept, rate_kBps)
    return Calibration(
        profile=profile,
        setup_latency_s=intercept,
        rate_kBps=rate_kBps,
        r2=float(r2_score(times, predicted)) if len(pairs) > 2 else 1.0,
        rmse_s=float(np.sqrt(mean_squared_error(times, predicted))),
        residuals=residuals,
    )


def anchor_to_distances(profile, size_bytes, near, far, chunk_payload=DEFAULT_CHUNK_PAYLOAD,
                        iterations=50):
    """
    Fit the profile to two (distance_m, seconds) references for one size.

    The rate stays; setup latency is moved so the expected time at the near
    distance matches, and the noise floor is solved so the expected time at the
    far distance matches.
    """
    (d_near, t_near), (d_far, t_far) = near, far
    if d_far <= d_near or t_far <= t_near:
        raise DegenerateFit("far reference must be further away and slower than near")
    airtime = float(_chunk_times(profile, size_bytes, chunk_payload).sum())
    if airtime <= 0:
        raise DegenerateFit("size must be > 0 to anchor airtime")

    rssi_near, rssi_far = rssi_at(profile, d_near), rssi_at(profile, d_far)
    factor_near = 1.0
    for _ in range(iterations):
        setup = t_near - airtime * factor_near
        if setup < 0:
            raise DegenerateFit(f"near reference {t_near} s is below the airtime {airtime:.3f} s")
        factor_far = (t_far - setup) / airtime
        per_far = 1.0 - 1.0 / factor_far
        snr_far = PER_MIDPOINT_SNR_DB + math.log((1.0 - per_far) / per_far) / PER_SLOPE_PER_DB
        noise_floor = rssi_far - snr_far
        updated = 1.0 / (1.0 - packet_error_rate(rssi_near, noise_floor))
        converged = abs(updated - factor_near) < 1e-15
        factor_near = updated
        if converged:
            break

    setup = t_near - airtime * factor_near
    return replace(profile, setup_latency_s=setup, noise_floor_dbm=noise_floor)


def scale_profile(profile, factor=BLE5_SPEEDUP):
    """A profile `factor` times faster in both rate and setup"""
    return replace(
        profile,
        phy_rate_kbps=profile.phy_rate_kbps * factor,
        setup_latency_s=profile.setup_latency_s / factor,
        per_chunk_overhead_s=profile.per_chunk_overhead_s / factor,
    )


def calibrated_ble4_profile(size_kb=40, near_m=1.0, far_m=15.0):
    """BLE4 size ladder fit anchored on the 40 kb distance medians"""
    fit = calibrate_ble4(BASELINE_TABLE[Protocol.BLE4])
    return anchor_to_distances(
        fit.profile,
        size_kb * BYTES_PER_KB,
        near=(near_m, DISTANCE_REFERENCE_40KB[near_m]),
        far=(far_m, DISTANCE_REFERENCE_40KB[far_m]),
    )


# Profile files: flat key=value lines, '#' comments

def parse_key_values(text):
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ProfileError(f"line {number}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_profile(path):
    return LinkProfile.from_mapping(parse_key_values(Path(path).read_text()))


def load_advertiser_config(path):
    return AdvertiserConfig.from_mapping(parse_key_values(Path(path).read_text()))


def format_profile(profile, advertiser=None, comments=()):
    lines = [f"# {c}" for c in comments]
    for key, value in profile.to_mapping().items():
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    if advertiser is not None:
        lines.append(f"interval_ms={advertiser.interval_ms}")
    return "\n".join(lines) + "\n"


def dump_profile(profile, path, advertiser=None, comments=()):
    Path(path).write_text(format_profile(profile, advertiser, comments))


class SimulatedPacer(ChunkPacer):
    """Holds a real or virtual transfer to the simulated BLE schedule"""

    def __init__(self, profile, distance_m, seed=None):
        _usable_per(profile, distance_m)
        self.profile = profile
        self.distance_m = distance_m
        self.seed = seed
        self._clock = None
        self._origin_ns = 0
        self._deadlines = np.zeros(0, dtype=np.int64)

    def on_connect(self, clock, start_ns):
        self._clock = clock
        self._origin_ns = start_ns + round(self.profile.setup_latency_s * 1e9)
        clock.sleep_until(self._origin_ns)

    def on_header(self, total_bytes, chunk_payload):
        delays = chunk_delays(self.profile, total_bytes, self.distance_m, chunk_payload, self.seed)
        offsets = np.round(np.cumsum(delays) * 1e9).astype(np.int64)
        self._deadlines = self._origin_ns + offsets

    def after_chunk(self, index):
        self._clock.sleep_until(int(self._deadlines[index]))
