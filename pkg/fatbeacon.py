#!/usr/bin/env python3
"""
FatBeacon Command Line
======================
One entry point for the whole toolkit:

  bundle      inline a page's CSS, scripts and images into one atomic HTML file
  corpus      write the benchmark pages (10, 20, 40, 100, 200 kb)
  advertise   broadcast a bundle as a FatBeacon on the loopback radio and serve it
  scan        wait for a FatBeacon, show its title, fetch its content
  bench       run simulated experiments, analyze trial CSVs, compare coverage masks
  calibrate   fit the BLE4 link profile to the reference measurements

Exit codes: 0 ok, 1 failure, 2 usage, 3 scan timeout, 4 transfer failure.
"""

import argparse
import logging
import sys
from dataclasses import replace
from functools import partial
from pathlib import Path

from beacon_frames import FrameError, format_hex_dump
from bench_harness import (
    BenchError,
    ExperimentConfig,
    ReportFormat,
    aggregate,
    correlation_report,
    coverage_diff,
    emit_report,
    format_pbm,
    read_baseline_csv,
    read_pbm,
    read_trials_csv,
    run_experiment,
    trial_matrix,
    write_trials_csv,
)
from fatbeacon_transfer import DEFAULT_MTU, ChunkParams, InvalidBundle, TransferError
from html_bundler import (
    DEFAULT_CORPUS_SEED,
    BundleError,
    ContentBundle,
    DirectoryResolver,
    generate_corpus,
    inline_bundle,
)
from loopback_radio import Advertiser, LoopbackEndpoint, LoopbackError, ScanTimeout, scan_and_fetch
from radio_sim import (
    BASELINE_TABLE,
    BYTES_PER_KB,
    DISTANCE_REFERENCE_40KB,
    REFERENCE_SIZES_KB,
    AdvertiserConfig,
    Protocol,
    RadioError,
    anchor_to_distances,
    calibrate_ble4,
    dump_profile,
    expected_transfer_time,
    load_advertiser_config,
    load_profile,
)

# Configuration
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_SCAN_TIMEOUT = 3
EXIT_TRANSFER_FAILED = 4
DEFAULT_SCAN_TIMEOUT_S = 30.0
SESSION_LOGGER = "fatbeacon_transfer.session"


def banner(title, out=print):
    out("=" * 70)
    out(title)
    out("=" * 70)


def attach_event_log(path, echo=False):
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    session_log = logging.getLogger(SESSION_LOGGER)
    session_log.setLevel(logging.INFO)
    session_log.propagate = echo
    session_log.addHandler(handler)
    return handler


def detach_event_log(handler):
    session_log = logging.getLogger(SESSION_LOGGER)
    session_log.removeHandler(handler)
    session_log.setLevel(logging.NOTSET)
    session_log.propagate = True
    handler.close()


def read_bundle(path, title=None):
    html = Path(path).read_bytes().decode("utf-8")
    return ContentBundle.from_html(html, title)


# bundle / corpus

def cmd_bundle(args):
    source = Path(args.input)
    banner("FatBeacon Bundler")
    print(f"\n[1/3] Reading {source}...")
    html = source.read_bytes().decode("utf-8")

    print(f"[2/3] Inlining resources from {args.root or source.parent}...")
    resolver = DirectoryResolver(args.root or source.parent, fetch_remote=args.fetch_remote)
    bundle = inline_bundle(html, resolver)
    if args.title:
        bundle = ContentBundle.from_html(bundle.html, args.title)

    print(f"[3/3] Writing {args.out}...")
    Path(args.out).write_bytes(bundle.payload)
    print(f"   ✓ {bundle.size_bytes} bytes, title {bundle.title!r}")
    print(f"   ✓ sha256 {bundle.content_hash.hex()}")
    return EXIT_OK


def cmd_corpus(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    banner("Benchmark Corpus")
    for bundle, size_kb in zip(generate_corpus(args.sizes, args.seed), args.sizes):
        path = out_dir / f"corpus_{size_kb}kb.html"
        path.write_bytes(bundle.payload)
        print(f"   ✓ {path} ({bundle.size_bytes} bytes)")
    return EXIT_OK


# advertise / scan

def advertiser_config(args):
    config = load_advertiser_config(args.profile) if args.profile else AdvertiserConfig()
    if args.interval_ms is not None:
        config = replace(config, interval_ms=args.interval_ms)
    if args.tx_power is not None:
        config = replace(config, tx_power_dbm=args.tx_power)
    return AdvertiserConfig(config.interval_ms, config.tx_power_dbm)


def cmd_advertise(args):
    bundle = read_bundle(args.bundle, args.title)
    endpoint = LoopbackEndpoint.from_env(args.host, args.adv_port, args.conn_port)
    advertiser = Advertiser(bundle, endpoint, advertiser_config(args), ChunkParams(args.mtu))

    banner("FatBeacon Advertiser")
    print(f"\n📡 Title:     {bundle.title}")
    print(f"   Content:   {bundle.size_bytes} bytes ({bundle.content_hash.hex()[:16]}...)")
    print(f"   Interval:  {advertiser.config.interval_ms} ms, "
          f"tx {advertiser.config.tx_power_dbm} dBm")
    try:
        advertiser.start()
        print(f"   Listening: adv {advertiser.endpoint.adv_port}/udp, "
              f"conn {advertiser.endpoint.conn_port}/tcp")
        print("\nPress Ctrl+C to stop.")
        advertiser.wait()
    except KeyboardInterrupt:
        pass
    finally:
        advertiser.stop()
    print(f"\n✓ Stopped after {advertiser.transfers_served} transfer(s)")
    return EXIT_OK


def cmd_scan(args):
    # content on stdout keeps progress lines on stderr
    say = print if args.out else partial(print, file=sys.stderr)
    endpoint = LoopbackEndpoint.from_env(args.host, args.adv_port, args.conn_port)
    profile = load_profile(args.profile) if args.profile else None
    capture = [] if args.capture else None

    say(f"🔍 Scanning {endpoint.host}:{endpoint.adv_port} for up to {args.timeout:g} s...")
    try:
        result = scan_and_fetch(
            endpoint, args.timeout, profile, args.distance, args.seed,
            notify=say, capture=capture, params=ChunkParams(args.mtu),
        )
    finally:
        if capture is not None:
            Path(args.capture).write_text(format_hex_dump(capture))

    say(f"✓ Fetched {len(result.content)} bytes in {result.elapsed_s:.3f} s")
    if args.out:
        Path(args.out).write_bytes(result.content)
        say(f"✓ Saved to {args.out}")
    else:
        sys.stdout.buffer.write(result.content)
        sys.stdout.flush()
    return EXIT_OK


# bench

def cmd_bench_run(args):
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config = replace(config, base_seed=args.seed)

    banner("FatBeacon Benchmark")
    cells = len(config.protocols) * len(config.sizes_kb) * len(config.distances_m)
    print(f"\n[1/2] Running {cells} cells x {config.trials_per_cell} trials "
          f"(seed {config.base_seed})...")
    records = run_experiment(config)
    failed = sum(1 for r in records if not r.ok)
    if failed:
        print(f"   ⚠️  {failed} trial(s) had no usable link")

    print(f"[2/2] Writing {args.out}...")
    write_trials_csv(records, args.out)
    print(f"   ✓ {len(records)} trials\n")
    print(emit_report(aggregate(records), ReportFormat.MARKDOWN))
    return EXIT_OK


def matrices(records, fmt):
    """Trial matrices: sizes across at each distance, or distances across at one size"""
    ok = [r for r in records if r.ok]
    sections = []
    for protocol in sorted({r.protocol for r in ok}, key=lambda p: p.value):
        subset = [r for r in ok if r.protocol is protocol]
        distances = sorted({r.distance_m for r in subset})
        if len({r.size_kb for r in subset}) > 1:
            for distance in distances:
                group = [r for r in subset if r.distance_m == distance]
                sections.append((f"{protocol.value} at {distance:g} m",
                                 trial_matrix(group, "size_kb", fmt)))
        else:
            sections.append((f"{protocol.value}, {subset[0].size_kb} kb",
                             trial_matrix(subset, "distance_m", fmt)))
    return sections


def cmd_bench_analyze(args):
    records = read_trials_csv(args.in_path)
    fmt = ReportFormat(args.format)
    parts = [emit_report(aggregate(records), fmt)]

    if args.tables:
        for title, table in matrices(records, fmt):
            parts.append(f"{title}\n\n{table}")

    if args.correlations:
        lines = []
        for result in correlation_report(records):
            lines.append(f"{result.label}: r = {result.value:.4f} (n = {result.n}), "
                         f"published {result.published_value:.4f}, "
                         f"difference {result.discrepancy:+.4f}")
        parts.append("\n".join(lines) + "\n" if lines else "no varying size or distance\n")

    report = "\n".join(parts)
    if args.out:
        Path(args.out).write_text(report)
        print(f"✓ Report saved to {args.out}")
    else:
        print(report, end="")
    return EXIT_OK


def cmd_bench_coverage(args):
    trails, signal = read_pbm(args.trails), read_pbm(args.signal)
    result = coverage_diff(trails, signal)

    banner("Coverage Layer Difference")
    print(f"\n📊 Trail pixels:  {result.layer_a_pixels}")
    print(f"   With signal:   {result.overlap_pixels}")
    print(f"   Covered:       {result.covered_fraction:.2%}")
    print(f"   Not covered:   {result.uncovered_fraction:.2%}")
    if args.out:
        Path(args.out).write_text(format_pbm(result.overlap, comment="trail pixels with signal"))
        print(f"\n✓ Overlap mask saved to {args.out}")
    return EXIT_OK


# calibrate

def medians_by(records, attribute, **where):
    rows = aggregate(r for r in records
                     if all(getattr(r, k) == v for k, v in where.items()))
    return {getattr(row, attribute): row.median_s for row in rows}


def cmd_calibrate(args):
    banner("BLE4 Link Calibration")

    print("\n[1/3] Fitting setup + size / rate...")
    if args.size_trials:
        medians = medians_by(read_trials_csv(args.size_trials), "size_kb", protocol=Protocol.BLE4)
    elif args.baseline:
        medians = read_baseline_csv(args.baseline)[Protocol.BLE4]
    else:
        medians = BASELINE_TABLE[Protocol.BLE4]
    fit = calibrate_ble4(medians)
    print(f"   Setup latency: {fit.setup_latency_s:.4f} s")
    print(f"   Rate:          {fit.rate_kBps:.4f} kB/s")
    print(f"   R²:            {fit.r2:.4f}   RMSE: {fit.rmse_s:.4f} s")
    for r in fit.residuals:
        print(f"   {r.size_kb:>5g} kb  measured {r.measured_s:7.3f}  "
              f"predicted {r.predicted_s:7.3f}  ({r.relative_error:+.1%})")

    print(f"\n[2/3] Anchoring on the {args.size} kb distance medians...")
    if args.distance_trials:
        references = medians_by(read_trials_csv(args.distance_trials), "distance_m",
                                protocol=Protocol.BLE4, size_kb=args.size)
    else:
        references = DISTANCE_REFERENCE_40KB
    near, far = min(references), max(references)
    size_bytes = args.size * BYTES_PER_KB
    profile = anchor_to_distances(fit.profile, size_bytes,
                                  near=(near, references[near]), far=(far, references[far]))
    print(f"   Setup latency: {profile.setup_latency_s:.4f} s")
    print(f"   Noise floor:   {profile.noise_floor_dbm:.4f} dBm")
    for distance in sorted(references):
        expected = expected_transfer_time(profile, size_bytes, distance)
        print(f"   {distance:>5g} m  measured {references[distance]:7.3f}  expected {expected:7.3f}")

    print("\n[3/3] Saving profile...")
    if args.out:
        dump_profile(profile, args.out, AdvertiserConfig(), comments=[
            "BLE4 link profile: size ladder fit anchored on the distance medians",
            f"near {near:g} m, far {far:g} m, {args.size} kb",
        ])
        print(f"   ✓ Saved to {args.out}")
    else:
        print("   (no --out given, nothing written)")
    return EXIT_OK


def size_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected sizes like 10,20,40, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fatbeacon.py",
        description="FatBeacon toolkit: bundle, advertise, scan, benchmark",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("bundle", help="inline external resources into one HTML file")
    p.add_argument("--in", dest="input", required=True, help="HTML page to bundle")
    p.add_argument("--root", help="directory resources resolve against (default: page's directory)")
    p.add_argument("--out", required=True, help="bundled HTML output")
    p.add_argument("--title", help="advertised title (default: the page's <title>)")
    p.add_argument("--fetch-remote", action="store_true", help="download absolute http(s) resources")
    p.set_defaults(func=cmd_bundle)

    p = commands.add_parser("corpus", help="write the benchmark pages")
    p.add_argument("--sizes", type=size_list, default=list(REFERENCE_SIZES_KB),
                   help="comma separated sizes in kb (default 10,20,40,100,200)")
    p.add_argument("--seed", type=int, default=DEFAULT_CORPUS_SEED)
    p.add_argument("--out-dir", default="corpus")
    p.set_defaults(func=cmd_corpus)

    def endpoint_flags(p):
        p.add_argument("--host", help="loopback address (env FATBEACON_HOST)")
        p.add_argument("--adv-port", type=int, help="advertising UDP port (env FATBEACON_ADV_PORT)")
        p.add_argument("--conn-port", type=int, help="transfer TCP port (env FATBEACON_CONN_PORT)")
        p.add_argument("--mtu", type=int, default=DEFAULT_MTU, help="ATT MTU to use")
        p.add_argument("--event-log", help="write session events to this file")

    p = commands.add_parser("advertise", help="broadcast a bundle and serve it")
    p.add_argument("bundle", help="atomic HTML bundle")
    p.add_argument("--title", help="advertised title (default: the bundle's <title>)")
    p.add_argument("--interval-ms", type=int, help="advertising interval (default 100)")
    p.add_argument("--tx-power", type=int, help="calibrated tx power at 0 m, dBm")
    p.add_argument("--profile", help="key=value file with interval_ms / tx_power_dbm")
    endpoint_flags(p)
    p.set_defaults(func=cmd_advertise)

    p = commands.add_parser("scan", help="find a FatBeacon and fetch its content")
    p.add_argument("--timeout", type=float, default=DEFAULT_SCAN_TIMEOUT_S)
    p.add_argument("--profile", help="link profile; adds simulated BLE timing to the fetch")
    p.add_argument("--distance", type=float, default=1.0, help="simulated distance in metres")
    p.add_argument("--seed", type=int, help="seed for the simulated retransmissions")
    p.add_argument("--out", help="write content here instead of stdout")
    p.add_argument("--capture", help="write received advertisements as a hex dump")
    endpoint_flags(p)
    p.set_defaults(func=cmd_scan)

    bench = commands.add_parser("bench", help="benchmark tools").add_subparsers(
        dest="bench_command", required=True)

    p = bench.add_parser("run", help="run a simulated experiment")
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--seed", type=int, help="override base_seed")
    p.add_argument("--out", required=True, help="trial CSV output")
    p.set_defaults(func=cmd_bench_run)

    p = bench.add_parser("analyze", help="aggregate a trial CSV")
    p.add_argument("--in", dest="in_path", required=True, help="trial CSV")
    p.add_argument("--tables", action="store_true", help="also print trial matrices")
    p.add_argument("--correlations", action="store_true", help="also print correlations")
    p.add_argument("--format", choices=[f.value for f in ReportFormat], default="markdown")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_bench_analyze)

    p = bench.add_parser("coverage", help="share of trail pixels with signal")
    p.add_argument("--trails", required=True, help="trail mask (PBM)")
    p.add_argument("--signal", required=True, help="coverage mask (PBM)")
    p.add_argument("--out", help="write the overlap mask (PBM)")
    p.set_defaults(func=cmd_bench_coverage)

    p = commands.add_parser("calibrate", help="fit the BLE4 link profile")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--baseline", help="protocol,size_kb,time_s CSV (default: built-in table)")
    source.add_argument("--size-trials", help="trial CSV at one distance, sizes across")
    p.add_argument("--distance-trials", help="trial CSV at one size, distances across")
    p.add_argument("--size", type=int, default=40, help="size of the distance experiment, kb")
    p.add_argument("--out", help="profile file to write")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    event_log = getattr(args, "event_log", None)
    handler = attach_event_log(event_log, echo=args.verbose) if event_log else None
    try:
        return args.func(args)
    except ScanTimeout as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_SCAN_TIMEOUT
    except InvalidBundle as e:
        print("❌ Bundle is not atomic:", file=sys.stderr)
        for violation in e.violations:
            print(f"   {violation}", file=sys.stderr)
        return EXIT_FAILURE
    except TransferError as e:
        print(f"❌ Transfer failed: {e}", file=sys.stderr)
        return EXIT_TRANSFER_FAILED
    except (BundleError, FrameError, RadioError, BenchError, LoopbackError,
            OSError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if handler is not None:
            detach_event_log(handler)


if __name__ == '__main__':
    sys.exit(main())
