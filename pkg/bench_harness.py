"""
FatBeacon Benchmark Harness
===========================
Runs the transfer-time measurement protocol over the radio simulator, then
aggregates trials the way the field measurements were aggregated: five runs per
cell, the median, and the mean after dropping the best and worst run.

Also computes size/distance correlations, the trail coverage layer difference
over raster masks, and renders CSV / Markdown reports.
"""

import hashlib
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from radio_sim import (
    BYTES_PER_KB,
    DEFAULT_CHUNK_PAYLOAD,
    Protocol,
    RadioError,
    baseline_models,
    baseline_time,
    calibrated_ble4_profile,
    load_profile,
    scale_profile,
    simulate_transfer,
)

logger = logging.getLogger(__name__)

# Configuration
TRIAL_COLUMNS = ["protocol", "size_kb", "distance_m", "trial_index", "elapsed_s"]
REPORT_COLUMNS = [
    "protocol", "size_kb", "distance_m", "n",
    "median_s", "trimmed_mean_s", "min_s", "max_s",
]
GROUP_COLUMNS = ["protocol", "size_kb", "distance_m"]
PUBLISHED_SIZE_CORRELATION = 0.9468
PUBLISHED_DISTANCE_CORRELATION = 0.6851


class BenchError(Exception):
    """Base class for harness failures"""


class ExperimentConfigError(BenchError, ValueError):
    pass


class TooFewSamples(BenchError, ValueError):
    pass


class EmptyInput(BenchError, ValueError):
    pass


class LengthMismatchError(BenchError, ValueError):
    pass


class ZeroVariance(BenchError, ValueError):
    pass


class DimensionMismatch(BenchError, ValueError):
    pass


class EmptyLayerA(BenchError, ValueError):
    pass


class PbmError(BenchError, ValueError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    protocol: Protocol
    size_kb: int
    distance_m: float
    trial_index: int
    elapsed_s: float
    error: str = ""

    @property
    def ok(self):
        return not self.error


@dataclass(frozen=True)
class AggregateRow:
    protocol: Protocol
    size_kb: int
    distance_m: float
    n: int
    median_s: float
    trimmed_mean_s: float
    min_s: float
    max_s: float


@dataclass(frozen=True)
class ExperimentConfig:
    protocols: list
    sizes_kb: list
    distances_m: list
    trials_per_cell: int = 5
    base_seed: int = 0
    profile: object = None
    ble5_profile: object = None
    chunk_payload: int = DEFAULT_CHUNK_PAYLOAD

    @classmethod
    def from_mapping(cls, values, root="."):
        root = Path(root)
        try:
            profile = values.get("profile")
            ble5_profile = values.get("ble5_profile")
            return cls(
                protocols=[Protocol.parse(p) for p in values["protocols"]],
                sizes_kb=[int(s) for s in values["sizes_kb"]],
                distances_m=[float(d) for d in values["distances_m"]],
                trials_per_cell=int(values.get("trials_per_cell", 5)),
                base_seed=int(values.get("base_seed", 0)),
                profile=load_profile(root / profile) if profile else None,
                ble5_profile=load_profile(root / ble5_profile) if ble5_profile else None,
                chunk_payload=int(values.get("chunk_payload", DEFAULT_CHUNK_PAYLOAD)),
            )
        except KeyError as e:
            raise ExperimentConfigError(f"experiment config is missing {e}") from e

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        with open(path) as f:
            return cls.from_mapping(json.load(f), root=path.parent)


def trial_seed(base_seed, protocol, size_kb, distance_m, trial_index):
    """Stable 64-bit seed per trial, independent of run order"""
    key = f"{base_seed}|{protocol.value}|{size_kb}|{float(distance_m)!r}|{trial_index}"
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


def run_experiment(config):
    if config.trials_per_cell < 1:
        raise ExperimentConfigError(f"trials_per_cell must be >= 1, got {config.trials_per_cell}")

    ble4 = config.profile or calibrated_ble4_profile()
    profiles = {
        Protocol.BLE4: ble4,
        Protocol.BLE5: config.ble5_profile or scale_profile(ble4),
    }
    models = baseline_models()

    records = []
    for protocol in config.protocols:
        for size_kb in config.sizes_kb:
            for distance_m in config.distances_m:
                for index in range(1, config.trials_per_cell + 1):
                    seed = trial_seed(config.base_seed, protocol, size_kb, distance_m, index)
                    try:
                        if protocol in profiles:
                            elapsed = simulate_transfer(
                                profiles[protocol], size_kb * BYTES_PER_KB, distance_m,
                                config.chunk_payload, seed,
                            )
                        else:
                            elapsed = baseline_time(models[protocol], size_kb, extrapolate=True)
                        error = ""
                    except (RadioError, ValueError) as e:
                        logger.warning("trial %s/%s kb/%s m/#%d failed: %s",
                                       protocol.value, size_kb, distance_m, index, e)
                        elapsed, error = math.nan, str(e)
                    records.append(
                        TrialRecord(protocol, size_kb, float(distance_m), index, elapsed, error)
                    )
    return records


def trimmed_mean(samples):
    """Mean after dropping exactly one lowest and one highest sample"""
    values = sorted(samples)
    if len(values) < 3:
        raise TooFewSamples(f"need at least 3 samples, got {len(values)}")
    kept = values[1:-1]
    return math.fsum(kept) / len(kept)


def median(samples):
    values = list(samples)
    if not values:
        raise EmptyInput("median of no samples")
    return statistics.median(values)


def pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise LengthMismatchError(f"lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise TooFewSamples("pearson needs at least 2 pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ZeroVariance("one of the inputs is constant")

    # max-norm scaling keeps 1e-200 and 1e200 inputs inside float range
    xc, yc = x - x.mean(), y - y.mean()
    xc, yc = xc / np.abs(xc).max(), yc / np.abs(yc).max()
    denominator = math.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if not math.isfinite(denominator) or denominator <= 0:
        raise ZeroVariance("inputs have no measurable spread")
    r = np.dot(xc, yc) / denominator
    return float(np.clip(r, -1.0, 1.0))


# Records <-> tables

def records_to_frame(records):
    rows = [
        {
            "protocol": r.protocol.value,
            "size_kb": r.size_kb,
            "distance_m": r.distance_m,
            "trial_index": r.trial_index,
            "elapsed_s": r.elapsed_s,
            "error": r.error,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=TRIAL_COLUMNS + ["error"])


def write_trials_csv(records, path):
    frame = records_to_frame(records)
    if not (frame["error"] != "").any():
        frame = frame.drop(columns=["error"])
    frame.to_csv(path, index=False)


def read_trials_csv(path):
    frame = pd.read_csv(path, dtype={"protocol": str}, float_precision="round_trip")
    missing = set(TRIAL_COLUMNS) - set(frame.columns)
    if missing:
        raise BenchError(f"{path}: missing columns {', '.join(sorted(missing))}")
    if "error" not in frame.columns:
        frame["error"] = ""
    frame["error"] = frame["error"].fillna("").astype(str)

    return [
        TrialRecord(
            protocol=Protocol.parse(row.protocol),
            size_kb=int(row.size_kb),
            distance_m=float(row.distance_m),
            trial_index=int(row.trial_index),
            elapsed_s=float(row.elapsed_s),
            error=row.error,
        )
        for row in frame.itertuples(index=False)
    ]


def read_baseline_csv(path):
    """protocol,size_kb,time_s rows -> {Protocol: {size_kb: seconds}}"""
    frame = pd.read_csv(path, dtype={"protocol": str}, float_precision="round_trip")
    missing = {"protocol", "size_kb", "time_s"} - set(frame.columns)
    if missing:
        raise BenchError(f"{path}: missing columns {', '.join(sorted(missing))}")
    table = {}
    for row in frame.itertuples(index=False):
        table.setdefault(Protocol.parse(row.protocol), {})[int(row.size_kb)] = float(row.time_s)
    return table


def aggregate(records):
    """One row per (protocol, size, distance); failed trials are left out"""
    frame = records_to_frame([r for r in records if r.ok])
    rows = []
    for (protocol, size_kb, distance_m), group in frame.groupby(GROUP_COLUMNS, sort=True):
        samples = group["elapsed_s"].tolist()
        trimmed = trimmed_mean(samples) if len(samples) >= 3 else statistics.fmean(samples)
        rows.append(
            AggregateRow(
                protocol=Protocol.parse(protocol),
                size_kb=int(size_kb),
                distance_m=float(distance_m),
                n=len(samples),
                median_s=median(samples),
                trimmed_mean_s=trimmed,
                min_s=min(samples),
                max_s=max(samples),
            )
        )
    return rows


class ReportFormat(Enum):
    CSV = "csv"
    MARKDOWN = "markdown"


def _row_cells(row):
    return [
        row.protocol.value,
        str(row.size_kb),
        f"{row.distance_m:.4f}",
        str(row.n),
        f"{row.median_s:.4f}",
        f"{row.trimmed_mean_s:.4f}",
        f"{row.min_s:.4f}",
        f"{row.max_s:.4f}",
    ]


def _render(header, body, fmt):
    fmt = ReportFormat(fmt) if not isinstance(fmt, ReportFormat) else fmt
    if fmt is ReportFormat.CSV:
        lines = [",".join(header)] + [",".join(cells) for cells in body]
    else:
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(cells) + " |" for cells in body]
    return "\n".join(lines) + "\n"


def emit_report(rows, fmt=ReportFormat.CSV):
    return _render(REPORT_COLUMNS, [_row_cells(r) for r in rows], fmt)


def trial_matrix(records, column="size_kb", fmt=ReportFormat.MARKDOWN):
    """Trials as rows, sizes (or distances) as columns, then Median and Trimmed mean"""
    frame = records_to_frame([r for r in records if r.ok])
    if frame.empty:
        raise EmptyInput("no successful trials to tabulate")
    table = frame.pivot_table(index="trial_index", columns=column,
                              values="elapsed_s", aggfunc="first")

    def label(value):
        return f"{value:g}m" if column == "distance_m" else f"{value:g}kb"

    header = ["trial"] + [label(c) for c in table.columns]
    body = [
        [str(index)] + ["" if pd.isna(v) else f"{v:.4f}" for v in values]
        for index, values in zip(table.index, table.to_numpy())
    ]
    columns = [table[c].dropna().tolist() for c in table.columns]
    body.append(["Median"] + [f"{median(v):.4f}" for v in columns])
    body.append(["Trimmed mean"] + [
        f"{trimmed_mean(v):.4f}" if len(v) >= 3 else "" for v in columns
    ])
    return _render(header, body, fmt)


@dataclass(frozen=True)
class CorrelationResult:
    label: str
    n: int
    value: float
    published_value: float

    @property
    def discrepancy(self):
        return self.value - self.published_value


def correlation_report(records):
    """Size and/or distance against elapsed time, raw and over medians"""
    ok = [r for r in records if r.ok]
    results = []
    axes = [("size_kb", "size", PUBLISHED_SIZE_CORRELATION),
            ("distance_m", "distance", PUBLISHED_DISTANCE_CORRELATION)]
    for attribute, name, published_value in axes:
        if len({getattr(r, attribute) for r in ok}) < 2:
            continue
        x = [getattr(r, attribute) for r in ok]
        y = [r.elapsed_s for r in ok]
        results.append(CorrelationResult(f"{name} vs time (raw samples)", len(x),
                                         pearson(x, y), published_value))

        grouped = {}
        for r in ok:
            grouped.setdefault(getattr(r, attribute), []).append(r.elapsed_s)
        keys = sorted(grouped)
        medians = [median(grouped[k]) for k in keys]
        results.append(CorrelationResult(f"{name} vs time (medians)", len(keys),
                                         pearson(keys, medians), published_value))
    return results


# Coverage layer difference over raster masks

@dataclass(frozen=True)
class RasterMask:
    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.size != self.width * self.height:
            raise DimensionMismatch(
                f"{bits.size} bits for a {self.width}x{self.height} mask"
            )
        object.__setattr__(self, "bits", bits.reshape(self.height, self.width))

    @property
    def count(self):
        return int(self.bits.sum())


@dataclass(frozen=True)
class CoverageResult:
    covered_fraction: float
    uncovered_fraction: float
    layer_a_pixels: int
    overlap_pixels: int
    overlap: RasterMask = field(repr=False)


def coverage_diff(layer_a, layer_b):
    """Share of layer A's pixels that also appear in layer B"""
    if (layer_a.width, layer_a.height) != (layer_b.width, layer_b.height):
        raise DimensionMismatch(
            f"{layer_a.width}x{layer_a.height} vs {layer_b.width}x{layer_b.height}"
        )
    total = layer_a.count
    if total == 0:
        raise EmptyLayerA("layer A has no set pixels")

    overlap = layer_a.bits & layer_b.bits
    shared = int(overlap.sum())
    covered = shared / total
    return CoverageResult(
        covered_fraction=covered,
        uncovered_fraction=1.0 - covered,
        layer_a_pixels=total,
        overlap_pixels=shared,
        overlap=RasterMask(layer_a.width, layer_a.height, overlap),
    )


def parse_pbm(text):
    """Plain PBM (P1); 1 is a set pixel"""
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if len(tokens) < 3 or tokens[0] != "P1":
        raise PbmError("not a plain PBM (P1) bitmap")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError as e:
        raise PbmError(f"bad PBM dimensions: {e}") from e

    digits = "".join(tokens[3:])
    if set(digits) - {"0", "1"}:
        raise PbmError("PBM pixels must be 0 or 1")
    if len(digits) != width * height:
        raise PbmError(f"expected {width * height} pixels, found {len(digits)}")
    bits = np.frombuffer(digits.encode("ascii"), dtype=np.uint8) == ord("1")
    return RasterMask(width, height, bits)


def read_pbm(path):
    return parse_pbm(Path(path).read_text())


def format_pbm(mask, comment=None):
    lines = ["P1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{mask.width} {mask.height}")
    for row in mask.bits:
        lines.append(" ".join("1" if b else "0" for b in row))
    return "\n".join(lines) + "\n"
