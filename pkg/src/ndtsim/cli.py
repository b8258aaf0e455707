"""Benchmark command line: htap, transform, and delta experiments.

Exit codes: 0 ok, 1 configuration error, 2 runtime error, 3 verification
failure.  NDT_LOG controls verbosity (DEBUG/INFO/WARNING).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import random
import sys

import numpy as np

from .columns import canonical_compare
from .delta import delta_cost, masked_view
from .device import DeviceConfig, ledger_csv_rows, modeled_time
from .engine import MODE_MATERIALIZE, MODE_STREAM, columns_from_batches
from .errors import InvalidConfig, NdtError
from .host import (
    HostSystem,
    Q6Params,
    WorkloadConfig,
    WorkloadDriver,
    q6_columnar,
    q6_default_params,
    unix_seconds,
)
from .layout import PAGE_SIZE
from .result_file import write_handle

log = logging.getLogger("ndtsim")

ROWS_PER_SF = 3000


class VerificationFailure(Exception):
    pass


def _device_config(args) -> DeviceConfig:
    cfg = DeviceConfig()
    if getattr(args, "pe", None):
        cfg.pe_count = args.pe
    if getattr(args, "scratchpad_bytes", None):
        cfg.scratchpad_bytes = args.scratchpad_bytes
    cfg.validate()
    return cfg


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    log.info("wrote %s (%d rows)", path, len(rows))


def _q6_params(args) -> Q6Params:
    if args.q6_year_lo or args.q6_year_hi:
        lo = unix_seconds(args.q6_year_lo or 1999)
        hi = unix_seconds(args.q6_year_hi or 2020)
        return Q6Params(lo, hi, args.q6_qty_lo, args.q6_qty_hi)
    base = q6_default_params()
    return Q6Params(base.date_lo_unix, base.date_hi_unix, args.q6_qty_lo, args.q6_qty_hi)


def cmd_htap(args) -> int:
    """Foreground-impact experiment: OLTP alone vs OLTP with a concurrent
    transformation; the host-work counters must match exactly."""
    rows = args.sf * ROWS_PER_SF
    intervals = args.intervals
    per_interval = args.tx_count // intervals

    def run(with_ndt: bool):
        system = HostSystem(_device_config(args))
        shadow = system.load_orderlines(rows, seed=args.seed)
        system.merge_to_cold()
        driver = WorkloadDriver(system, WorkloadConfig(seed=args.seed, tx_count=args.tx_count),
                                shadow)
        counters = []
        ndt_rows = 0
        for i in range(intervals):
            before = system.store.op_count
            driver.run(per_interval)
            counters.append(system.store.op_count - before)
            if with_ndt and i == intervals // 2 - 1:
                _, handle = system.transform_snapshot(mode=MODE_MATERIALIZE,
                                                      pe_count=args.pe or None)
                ndt_rows = handle.visible_rows
        return counters, ndt_rows, system

    base_counters, _, _ = run(False)
    co_counters, ndt_rows, system = run(True)

    out_rows = [
        (i, base_counters[i], co_counters[i], ndt_rows if i == intervals // 2 - 1 else 0)
        for i in range(intervals)
    ]
    if args.csv:
        _write_csv(args.csv, ["interval", "oltp_ops_baseline", "oltp_ops_coexec", "ndt_rows"],
                   out_rows)
    print(f"htap: {intervals} intervals x {per_interval} tx, table {rows} rows")
    print(f"  baseline oltp ops: {sum(base_counters)}")
    print(f"  co-exec  oltp ops: {sum(co_counters)} (ndt transformed {ndt_rows} rows)")
    print(f"  admin ops (invocation + grants): {system.admin_ops}")
    if base_counters != co_counters:
        raise VerificationFailure("host-work counters diverged under co-execution")
    print("  host-work counters identical: PASS")
    return 0


def cmd_transform(args) -> int:
    """One transformation with movement split, against an export baseline."""
    rows = args.sf * ROWS_PER_SF
    system = HostSystem(_device_config(args))
    system.load_orderlines(rows, seed=args.seed)
    system.merge_to_cold()

    mode = MODE_STREAM if args.mode == "stream" else MODE_MATERIALIZE
    before = system.device.ledger.snapshot()
    inv, result = system.transform_snapshot(mode=mode, pe_count=args.pe or None)
    delta = system.device.ledger.delta_since(before)
    times = modeled_time(delta, system.device.cfg)

    nsm_pages = sum(1 for loc in system.shared.l2p.values() if loc[0] != "HOST")
    baseline_bytes = nsm_pages * PAGE_SIZE
    baseline_ns = baseline_bytes / (system.device.cfg.host_read_gib_s * 1024 ** 3) * 1e9

    if mode == MODE_MATERIALIZE:
        result_bytes = result.column_bytes
        out_rows = result.visible_rows
    else:
        result_bytes = sum(b.payload_bytes for b in result)
        view = columns_from_batches(system.schema, inv.projection, result, inv.pe_count)
        out_rows = view.n_rows

    print(f"transform: {rows} rows loaded, mode={args.mode}, pe={inv.pe_count}, "
          f"scratchpad={system.device.cfg.scratchpad_bytes}")
    print(f"  result rows: {out_rows}, result bytes: {result_bytes}")
    print(f"  device-internal read/write: {delta['device_internal_bytes_read']}/"
          f"{delta['device_internal_bytes_written']}")
    print(f"  device-to-host: {delta['device_to_host_bytes']} bytes "
          f"(export baseline would move {baseline_bytes})")
    print(f"  modeled total: {times['total_ns'] / 1e6:.3f} ms "
          f"(baseline link time {baseline_ns / 1e6:.3f} ms)")

    if args.q6:
        params = _q6_params(args)
        if mode == MODE_MATERIALIZE:
            view = masked_view(result)
        expected = system.q6_rowstore(inv.descriptor, params)
        got = q6_columnar(view, params)
        print(f"  q6 columnar: {got}  rowstore: {expected}")
        if got != expected:
            raise VerificationFailure(f"q6 mismatch: {got} vs {expected}")

    if args.csv:
        _write_csv(args.csv, ["category", "bytes", "ops", "modeled_ns"],
                   ledger_csv_rows(delta, system.device.cfg))
    if args.out:
        if mode != MODE_MATERIALIZE:
            print("  --out requires materialize mode; skipping export", file=sys.stderr)
        else:
            write_handle(args.out, result)
            print(f"  exported {args.out}")
    return 0


def _parse_fractions(text: str) -> list:
    text = text.strip()
    if ".." in text:
        span, _, step = text.partition(":")
        lo, _, hi = span.partition("..")
        step = int(step) if step else 10
        return list(range(int(lo), int(hi) + 1, step))
    return [int(p) for p in text.split(",") if p]


def cmd_delta(args) -> int:
    """Incremental-refresh experiment over increasing modification fractions."""
    rows = args.rows or args.sf * ROWS_PER_SF
    system = HostSystem(_device_config(args))
    shadow = system.load_orderlines(rows, seed=args.seed)
    system.merge_to_cold()

    before = system.device.ledger.snapshot()
    _, handle = system.transform_snapshot(mode=MODE_MATERIALIZE, pe_count=args.pe or None)
    initial_delta = system.device.ledger.delta_since(before)
    initial_bytes = handle.column_bytes
    print(f"delta: table {rows} rows, initial materialization {initial_bytes} bytes")

    rng = random.Random(args.seed + 1)
    fractions = _parse_fractions(args.delta_fractions)
    out_rows = []
    vids = list(shadow)
    for fraction in fractions:
        n_mod = rows * fraction // 100
        targets = rng.sample(vids, n_mod)
        t = system.store.begin_tx()
        for vid in targets:
            old = shadow[vid]
            row = old[:6] + (old[6] + 1,) + old[7:]
            system.store.install_version(t, vid, row)
            shadow[vid] = row
        system.store.commit_tx(t)
        system.merge_to_cold()

        inv_caller = system.store.begin_tx()
        inv = system.prepare_invocation(inv_caller, handle.projection,
                                        MODE_MATERIALIZE, args.pe or None,
                                        prior_handle=handle)
        report = delta_cost(handle, inv, grantor=system.grant_space)
        system.store.commit_tx(inv_caller)

        if args.verify:
            snap = handle.snapshot
            expected = system.oracle_column_set(snap, handle.projection)
            got = masked_view(handle)
            cmp = canonical_compare(got.sorted_by_vid(), expected.sorted_by_vid())
            if not cmp.equal:
                raise VerificationFailure(f"fraction {fraction}%: {cmp.reason}")
        out_rows.append((
            fraction, report.appended_rows, report.appended_bytes,
            report.ledger_delta["device_internal_bytes_read"],
            report.ledger_delta["device_internal_bytes_written"],
            round(report.modeled_ns["total_ns"]),
        ))
        print(f"  {fraction:3d}%: appended {report.appended_rows} rows / "
              f"{report.appended_bytes} bytes, modeled {report.modeled_ns['total_ns'] / 1e6:.3f} ms")

    mods = np.array([r[1] for r in out_rows], dtype=float)
    appended = np.array([r[2] for r in out_rows], dtype=float)
    slope, intercept = np.polyfit(mods, appended, 1)
    predicted = slope * mods + intercept
    ss_res = float(np.sum((appended - predicted) ** 2))
    ss_tot = float(np.sum((appended - appended.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    print(f"  linear fit: appended_bytes = {slope:.2f} * rows + {intercept:.1f}, R^2 = {r2:.6f}")
    if 100 in fractions:
        full_bytes = out_rows[fractions.index(100)][2]
        ratio = full_bytes / initial_bytes
        print(f"  100% refresh vs initial bytes: {ratio:.4f}")
        if abs(ratio - 1.0) > 0.05:
            raise VerificationFailure(f"100% refresh bytes off initial by {ratio:.3f}")
    if r2 < 0.99:
        raise VerificationFailure(f"linear fit R^2 {r2:.4f} < 0.99")

    if args.csv:
        _write_csv(args.csv, ["fraction", "modified_rows", "appended_bytes",
                              "internal_read", "internal_write", "modeled_ns"], out_rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ndtsim",
        description="Near-storage row-to-columnar transformation benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=7)
        p.add_argument("--sf", type=int, default=10, help="scale factor (3000 rows per unit)")
        p.add_argument("--pe", type=int, default=0, help="processing elements (default: device max)")
        p.add_argument("--scratchpad-bytes", type=int, default=0)
        p.add_argument("--csv", help="write per-row results to this CSV file")

    p = sub.add_parser("htap", help="foreground-impact experiment")
    common(p)
    p.add_argument("--tx-count", type=int, default=2000)
    p.add_argument("--intervals", type=int, default=10)
    p.set_defaults(func=cmd_htap)

    p = sub.add_parser("transform", help="one transformation with movement accounting")
    common(p)
    p.add_argument("--mode", choices=["stream", "materialize"], default="materialize")
    p.add_argument("--out", help="export the materialized result to this file")
    p.add_argument("--q6", action="store_true", help="verify the aggregate against the row store")
    p.add_argument("--q6-year-lo", type=int, default=0)
    p.add_argument("--q6-year-hi", type=int, default=0)
    p.add_argument("--q6-qty-lo", type=int, default=1)
    p.add_argument("--q6-qty-hi", type=int, default=100_000)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("delta", help="incremental-refresh cost experiment")
    common(p)
    p.add_argument("--rows", type=int, default=0, help="override table row count")
    p.add_argument("--delta-fractions", "--mod-fractions", dest="delta_fractions",
                   default="10..100:10", help="e.g. 10,20,50 or 10..100:10")
    p.add_argument("--no-verify", dest="verify", action="store_false")
    p.set_defaults(func=cmd_delta, verify=True)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("NDT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 3
    except InvalidConfig as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, NdtError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
