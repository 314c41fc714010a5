"""Command-line front end: pool administration, fault drills and benchmarks."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bench import WorkloadSpec, compare_modes, measure_repair, run_bench, scratch_pool
from .errors import LayoutError, PoolError, UnrecoverableCorruption, UnrecoverablePool
from .kv import STRUCTURES
from .pool import Mode, Pool

EXIT_OK = 0
EXIT_INCONSISTENT = 1
EXIT_USAGE = 2
EXIT_NO_POOL = 3
EXIT_UNRECOVERABLE = 4
EXIT_POOL_ERROR = 5


def size_arg(text: str) -> int:
    t = text.strip().upper().removesuffix("B")
    mult = 1
    for suffix, m in (("K", 1 << 10), ("M", 1 << 20), ("G", 1 << 30), ("T", 1 << 40)):
        if t.endswith(suffix):
            t, mult = t[:-1], m
            break
    try:
        v = int(t) * mult
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return v


def count_arg(text: str) -> int:
    try:
        v = int(float(text)) if "e" in text.lower() else int(text.replace("_", ""))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a count: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("count must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--pool", metavar="PATH", help="pool file")
    common.add_argument("--mode", default="mlpc",
                        help="baseline, ml, mlp, mlpc, scrub:N or conservative (PGL_MODE overrides)")
    common.add_argument("--scrub-interval", type=count_arg, default=None, metavar="N",
                        help="transactions between scheduled scrubs")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    geom = argparse.ArgumentParser(add_help=False)
    geom.add_argument("--size", type=size_arg, default=64 << 20, metavar="BYTES")
    geom.add_argument("--rows", type=int, default=100, metavar="N", help="chunk rows per zone")
    geom.add_argument("--chunk", type=size_arg, default=256 << 10, metavar="BYTES")
    geom.add_argument("--log-slots", type=int, default=16, metavar="N")

    p = argparse.ArgumentParser(prog="ftpool", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("create", parents=[common, geom], help="create and format a pool")
    c.add_argument("--force", action="store_true", help="overwrite an existing file")
    sub.add_parser("info", parents=[common], help="header, geometry and occupancy")
    sub.add_parser("check", parents=[common], help="read-only parity and checksum audit")
    sub.add_parser("scrub", parents=[common], help="one verify-and-repair pass")
    i = sub.add_parser("inject", parents=[common], help="damage the pool out of band")
    kind = i.add_mutually_exclusive_group(required=True)
    kind.add_argument("--media", action="store_true", help="lose and poison one page")
    kind.add_argument("--scribble", action="store_true", help="overwrite a range with random bytes")
    i.add_argument("--target", default="object",
                   choices=["object", "data", "parity", "page", "metadata", "free"])
    i.add_argument("--length", type=size_arg, default=None, help="scribble length")
    i.add_argument("--offset", type=lambda s: int(s, 0), default=None, help="explicit pool offset")
    sub.add_parser("recover", parents=[common], help="crash recovery plus pending repairs")
    b = sub.add_parser("bench", parents=[common, geom], help="key-value workload")
    b.add_argument("--structure", default="ctree", choices=sorted(STRUCTURES))
    b.add_argument("--inserts", type=count_arg, default=10000)
    b.add_argument("--removes", type=count_arg, default=0)
    b.add_argument("--lookups", type=count_arg, default=0)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--key-space", type=count_arg, default=None)
    b.add_argument("--compare", action="store_true",
                   help="run baseline, ml, mlp and mlpc on scratch pools and compare")
    b.add_argument("--repair-trials", type=count_arg, default=0,
                   help="after the run, time this many single-page repairs")
    return p


def resolve_mode(args) -> Mode:
    text = os.environ.get("PGL_MODE") or args.mode
    return Mode.parse(text, args.scrub_interval)


def emit(args, data: dict, text: str) -> None:
    if args.json:
        print(json.dumps(data, indent=2, sort_keys=True, default=str))
    else:
        print(text)


def _open(args, mode: Mode) -> Pool:
    if not args.pool:
        raise FileNotFoundError("--pool is required")
    # scheduled scrubs run inline so a short command does not race a background thread
    return Pool.open(args.pool, mode=mode, scrub_async=False)


def _fmt_check(rep: dict) -> str:
    lines = [f"problems: {rep['problems']}"]
    if rep["poisoned_pages"]:
        lines.append("poisoned pages: " + " ".join(f"0x{p:x}" for p in rep["poisoned_pages"]))
    if not rep["header_ok"]:
        lines.append("header and replica differ")
    if rep["pending_logs"]:
        lines.append(f"pending log slots: {rep['pending_logs']}")
    if rep["bad_page_record"]:
        lines.append(f"bad-page record: {rep['bad_page_record']}")
    for z in rep["zones"]:
        bits = [f"{len(z[k])} {k.replace('_', ' ')}" for k in
                ("parity_ranges", "checksum_mismatches", "metadata_mismatches", "unreadable") if z[k]]
        lines.append(f"zone {z['zone']}: {z['objects']} objects" + (", " + ", ".join(bits) if bits else ", clean"))
    return "\n".join(lines)


def cmd_create(args, mode):
    if not args.pool:
        raise FileNotFoundError("--pool is required")
    if os.path.exists(args.pool) and not args.force:
        print(f"ftpool: {args.pool} exists (use --force to overwrite)", file=sys.stderr)
        return EXIT_USAGE
    if args.force:
        for p in (args.pool, args.pool + ".poison"):
            if os.path.exists(p):
                os.unlink(p)
    with Pool.create(args.pool, args.size, args.rows, args.chunk, log_slots=args.log_slots,
                     mode=mode, scrub_async=False) as pool:
        info = pool.info()
    emit(args, info, f"created {args.pool}: {info['zone_count']} zone(s) of {info['zone_size']} bytes, "
                     f"overhead {info['accounting']['overhead_ratio']:.4%}")
    return EXIT_OK


def cmd_info(args, mode):
    with _open(args, mode) as pool:
        info = pool.info()
    acc = info["accounting"]
    text = "\n".join([
        f"uuid          {info['uuid']}",
        f"size          {info['pool_size']}",
        f"zones         {info['zone_count']} x {info['zone_size']} ({info['rows_per_zone']} rows, "
        f"{info['chunks_per_row']} x {info['chunk_size']} B chunks per row)",
        f"objects       {info['objects']} ({info['live_bytes']} B live, {info['free_bytes']} B free)",
        f"parity        {acc['parity']} B",
        f"overhead      {acc['overhead_ratio']:.4%} (tail slack {acc['tail']} B not counted)",
        f"poisoned      {len(info['poisoned_pages'])} page(s)",
    ])
    emit(args, info, text)
    return EXIT_OK


def cmd_check(args, mode):
    with _open(args, mode) as pool:
        rep = pool.check()
    emit(args, rep, _fmt_check(rep))
    return EXIT_OK if rep["ok"] else EXIT_INCONSISTENT


def cmd_scrub(args, mode):
    with _open(args, mode) as pool:
        rep = pool.scrub().as_dict()
    emit(args, rep, " ".join(f"{k}={v}" for k, v in rep.items()))
    return EXIT_UNRECOVERABLE if rep["unrecoverable"] else EXIT_OK


def cmd_inject(args, mode):
    with _open(args, mode) as pool:
        d = pool.inject_fault("media" if args.media else "scribble", args.target, args.seed,
                              size=args.length, offset=args.offset)
    emit(args, d, f"injected {d['kind']} at 0x{d['offset']:x} ({d['length']} bytes)")
    return EXIT_OK


def cmd_recover(args, mode):
    with _open(args, mode) as pool:
        rep = pool.recovery.recover_all()
    lost = rep["media_unrecoverable"] + rep.get("scrub", {}).get("unrecoverable", [])
    emit(args, rep, f"repaired {len(rep['media_repaired'])} page(s)"
                    + (f"; scrub: {rep['scrub']}" if "scrub" in rep else "")
                    + (f"; unrecoverable: {lost}" if lost else ""))
    return EXIT_UNRECOVERABLE if lost else EXIT_OK


def cmd_bench(args, mode):
    spec = WorkloadSpec(args.structure, args.inserts, args.removes, args.lookups, args.threads,
                        args.key_space, 8, mode.name, args.seed)
    spec.validate()
    if args.compare:
        rep = compare_modes(spec, size=args.size, rows=args.rows, chunk=args.chunk,
                            repair_trials=args.repair_trials)
        text = "\n".join(f"{m:10s} {r['total_seconds']:8.3f}s  x{rep['relative_time'][m]:.2f}"
                         + (f"  repair {r['repair']['mean_us']:.0f} us/page" if "repair" in r else "")
                         for m, r in rep["modes"].items())
        emit(args, rep, text + f"\nordering baseline <= ml <= mlp <= mlpc: {rep['ordering_ok']}")
        return EXIT_OK
    pool = _open(args, mode) if args.pool else scratch_pool(mode, args.size, args.rows, args.chunk,
                                                            scrub_async=False)
    with pool:
        rep = run_bench(pool, spec)
        if args.repair_trials and pool.mode.parity:
            rep["repair"] = measure_repair(pool, args.repair_trials, args.seed)
    lines = []
    for name, ph in rep["phases"].items():
        lat = ph["latency_us"]
        lines.append(f"{name:7s} {ph['ops']} ops in {ph['seconds']:.3f}s ({ph['ops_per_s']:.0f} ops/s) "
                     f"p50 {lat['p50']:.1f} us p99 {lat['p99']:.1f} us")
    if "insert_tx" in rep:
        lines.append("per insert tx: " + ", ".join(f"{k.removeprefix('avg_')} {v:.2f}"
                                                   for k, v in rep["insert_tx"].items()))
    lines.append(f"vulnerable bytes: {rep['vulnerable_bytes']} of {rep['accessed_bytes']} accessed")
    if "repair" in rep:
        lines.append(f"repair: {rep['repair']['mean_us']:.0f} us/page over {rep['repair']['repairs']}")
    lines.append(f"check: {'ok' if rep.get('check_ok') in (True, None) else 'FAILED'}")
    emit(args, rep, "\n".join(lines))
    return EXIT_OK if rep.get("check_ok") in (True, None) else EXIT_INCONSISTENT


COMMANDS = {"create": cmd_create, "info": cmd_info, "check": cmd_check, "scrub": cmd_scrub,
            "inject": cmd_inject, "recover": cmd_recover, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        mode = resolve_mode(args)
    except ValueError as e:
        parser.print_usage(sys.stderr)
        print(f"ftpool: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args, mode)
    except FileNotFoundError as e:
        print(f"ftpool: no such pool: {e}", file=sys.stderr)
        return EXIT_NO_POOL
    except (LayoutError, UnrecoverablePool) as e:
        print(f"ftpool: not a usable pool: {e}", file=sys.stderr)
        return EXIT_NO_POOL
    except UnrecoverableCorruption as e:
        print(f"ftpool: unrecoverable: {e}", file=sys.stderr)
        return EXIT_UNRECOVERABLE
    except PoolError as e:
        print(f"ftpool: {e}", file=sys.stderr)
        return EXIT_POOL_ERROR
    except ValueError as e:
        print(f"ftpool: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
