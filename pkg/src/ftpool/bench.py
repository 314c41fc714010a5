"""Key-value workload driver: throughput, latency and integrity counters."""

from __future__ import annotations

import random
import tempfile
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .kv import STRUCTURES, open_structure
from .pool import MiB, Mode, Pool

PHASES = ("insert", "lookup", "remove")


@dataclass
class WorkloadSpec:
    structure: str = "ctree"
    inserts: int = 10000
    removes: int = 0
    lookups: int = 0
    threads: int = 1
    key_space: int | None = None  # None draws full 64-bit keys
    value_size: int = 8
    mode: str = "mlpc"
    seed: int = 0

    def validate(self) -> None:
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")
        if min(self.inserts, self.removes, self.lookups) < 0:
            raise ValueError("operation counts must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.key_space is not None and self.key_space < 1:
            raise ValueError("key space must be positive")
        if self.value_size != 8:
            raise ValueError("values are stored inline as 64-bit words; value_size must be 8")
        Mode.parse(self.mode)


def percentiles(samples_ns) -> dict:
    if not len(samples_ns):
        return {"p50": 0.0, "p90": 0.0, "p99": 0.0, "p999": 0.0, "max": 0.0, "mean": 0.0}
    a = np.asarray(samples_ns, dtype=np.float64) / 1e3
    p = np.percentile(a, [50, 90, 99, 99.9])
    return {"p50": float(p[0]), "p90": float(p[1]), "p99": float(p[2]), "p999": float(p[3]),
            "max": float(a.max()), "mean": float(a.mean())}


def _keys(spec: WorkloadSpec, t: int, n: int) -> list[int]:
    rng = random.Random(spec.seed * 1000003 + t)
    if spec.key_space is None:
        return [rng.getrandbits(64) for _ in range(n)]
    return [rng.randrange(spec.key_space) for _ in range(n)]


def _split(n: int, parts: int) -> list[int]:
    q, r = divmod(n, parts)
    return [q + (i < r) for i in range(parts)]


def _run_phase(pool: Pool, kv, phase: str, work: list[list[int]]) -> dict:
    pool.stats.reset()
    w0 = pool.store.bytes_written
    lat: list[list[int]] = [[] for _ in work]
    hits = [0] * len(work)
    errors: list[BaseException] = []

    def worker(i: int) -> None:
        op = {"insert": lambda k: kv.insert(k, k), "lookup": kv.lookup, "remove": kv.remove}[phase]
        out = lat[i]
        clock = time.perf_counter_ns
        try:
            for k in work[i]:
                t = clock()
                r = op(k)
                out.append(clock() - t)
                if r is not None and r is not False:
                    hits[i] += 1
        except BaseException as e:  # reported after join
            errors.append(e)

    t0 = time.perf_counter()
    if len(work) == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(i,)) for i in range(len(work))]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    secs = time.perf_counter() - t0
    if errors:
        raise errors[0]
    ops = sum(len(w) for w in work)
    return {"ops": ops, "hits": sum(hits), "seconds": secs,
            "ops_per_s": ops / secs if secs > 0 else 0.0,
            "latency_us": percentiles([x for s in lat for x in s]),
            "bytes_written": pool.store.bytes_written - w0,
            "stats": pool.stats.summary()}


def run_bench(pool: Pool, spec: WorkloadSpec, verify: bool = True) -> dict:
    """Run the insert, lookup and remove phases of ``spec`` against ``pool``.

    Each thread inserts its own key stream; lookups and removes draw from the
    keys that thread inserted, cycling when asked for more than it has.
    """
    spec.validate()
    kv = open_structure(pool, spec.structure)
    ins = [_keys(spec, t, n) for t, n in enumerate(_split(spec.inserts, spec.threads))]

    def pick(counts):
        out = []
        for t, n in enumerate(counts):
            src = ins[t] or _keys(spec, t, max(n, 1))
            out.append([src[i % len(src)] for i in range(n)])
        return out

    phases = {"insert": ins, "lookup": pick(_split(spec.lookups, spec.threads)),
              "remove": pick(_split(spec.removes, spec.threads))}
    report = {"spec": asdict(spec), "mode": pool.mode.name, "phases": {}}
    for name in PHASES:
        if any(phases[name]):
            report["phases"][name] = _run_phase(pool, kv, name, phases[name])
    ph = report["phases"].values()
    report["vulnerable_bytes"] = sum(p["stats"]["unverified_bytes"] for p in ph)
    report["accessed_bytes"] = sum(p["stats"]["accessed_bytes"] for p in ph)
    report["total_ops"] = sum(p["ops"] for p in ph)
    report["total_seconds"] = sum(p["seconds"] for p in ph)
    if "insert" in report["phases"]:
        st = report["phases"]["insert"]["stats"]
        report["insert_tx"] = {k: st[k] for k in ("avg_objects_per_tx", "avg_alloc_bytes_per_tx",
                                                  "avg_allocs_per_tx", "avg_modified_bytes_per_tx")}
    if verify:
        if pool._scrubber is not None:
            pool._scrubber.request()
        report["check_ok"] = pool.check()["ok"] if pool.mode.checksums or pool.mode.parity else None
    return report


def measure_repair(pool: Pool, trials: int = 20, seed: int = 0) -> dict:
    """Poison random object pages and time the fault-driven repair of each."""
    pool.stats.repairs.clear()
    rng = random.Random(seed)
    objs = sorted(pool.live_objects())
    done = 0
    for _ in range(trials):
        if not objs:
            break
        off, size = objs[rng.randrange(len(objs))]
        pool.inject_fault("media", offset=off, seed=rng.getrandbits(32))
        pool.read_object(off, size, verify=False)
        done += 1
    r = pool.stats.repairs
    us = [1e6 * x for x in r]
    return {"trials": done, "repairs": len(r),
            "mean_us": float(np.mean(us)) if us else 0.0,
            "p50_us": float(np.median(us)) if us else 0.0,
            "max_us": float(max(us)) if us else 0.0}


def scratch_pool(mode: str, size: int = 256 * MiB, rows: int = 100, chunk: int = 256 * 1024,
                 directory: str | None = None, **opts) -> Pool:
    """A fresh file-backed pool in a temporary directory, removed on close."""
    d = tempfile.TemporaryDirectory(dir=directory)
    pool = Pool.create(Path(d.name) / "bench.pool", size, rows, chunk, mode=mode, **opts)
    pool._scratch_dir = d  # lives as long as the pool object
    return pool


def compare_modes(spec: WorkloadSpec, modes=("baseline", "ml", "mlp", "mlpc"), *,
                  size: int = 256 * MiB, rows: int = 100, chunk: int = 256 * 1024,
                  repair_trials: int = 0) -> dict:
    """Run ``spec`` once per mode on fresh pools and report overhead against the first mode."""
    out = {"modes": {}}
    for m in modes:
        s = WorkloadSpec(**{**asdict(spec), "mode": m})
        pool = scratch_pool(m, size, rows, chunk, scrub_async=False)
        try:
            rep = run_bench(pool, s, verify=False)
            if repair_trials and pool.mode.parity:
                rep["repair"] = measure_repair(pool, repair_trials, spec.seed)
        finally:
            pool.close()
        out["modes"][m] = rep
    base = out["modes"][modes[0]]["total_seconds"] or 1e-12
    out["relative_time"] = {m: r["total_seconds"] / base for m, r in out["modes"].items()}
    t = [out["modes"][m]["total_seconds"] for m in modes]
    out["ordering_ok"] = all(a <= b for a, b in zip(t, t[1:]))
    return out
