"""Benchmark and demo drivers: boot cVMs, run guest programs, collect numbers.

Times come from the guests' clock hostcall (monotonic, ns). Byte counts come
from the machine's copy counter, so they are exact.
"""

from __future__ import annotations

import csv
import enum
import gc
import io
import statistics
import time
from dataclasses import dataclass, field

from capvm.abi import MiB
from capvm.config import AclEntry, DeploymentConfig
from capvm.errors import CapvmError, Err
from capvm.intravisor import Intravisor
from capvm.programs import (
    BENCH_PORT, KV_HIT, KV_MISS, KV_STORED, KV_VALUE_SIZE, kv_ops,
)

MAX_BENCH_SIZE = 16 * MiB
MIN_BENCH_SIZE = 8           # room for the embedded send timestamp
CSV_FIELDS = ("mechanism", "size", "iters", "median_ns", "mean_ns", "stddev_ns", "bytes_copied")


class Mechanism(str, enum.Enum):
    FILE = "file"
    STREAM = "stream"
    PIPE = "pipe"
    MEMCPY = "memcpy"


@dataclass
class RunResult:
    outputs: dict[str, str]
    exit_codes: dict[str, int | None]
    faults: dict[str, list[str]]
    bytes_copied: int
    cinvokes: int
    wall_ns: int


def run_cvms(configs: list[DeploymentConfig], timeout: float = 120.0,
             pipes: dict[int, int] | None = None, size: int = 64 * MiB,
             console=None) -> RunResult:
    """Boot every config in order and wait for the non-library cVMs."""
    iv = Intravisor(size, console=console or (lambda name, text: None))
    try:
        for port, capacity in (pipes or {}).items():
            iv.pipe(port, capacity)
        copied0 = iv.machine.copy_counter
        calls0 = iv.machine.cinvoke_count
        t0 = time.monotonic_ns()
        cvms = [iv.cvm_make(cfg) for cfg in configs]
        for c in cvms:
            if not c.shim.library and not iv.wait(c, timeout):
                faults = "; ".join(f"{o.name}: {f}" for o in cvms for f in o.faults)
                raise CapvmError(Err.TIMEOUT, f"{c.name} still running after {timeout}s"
                                 + (f" ({faults})" if faults else ""))
        wall = time.monotonic_ns() - t0
        return RunResult(
            {c.name: c.output() for c in cvms},
            {c.name: c.exit_code for c in cvms},
            {c.name: list(c.faults) for c in cvms},
            iv.machine.copy_counter - copied0,
            iv.machine.cinvoke_count - calls0,
            wall,
        )
    finally:
        iv.shutdown()


def _latencies(text: str, tag: str) -> list[int]:
    for line in text.splitlines():
        if line.startswith(tag + " "):
            body = line[len(tag) + 1:]
            return [int(x) for x in body.split(",")] if body else []
    raise CapvmError(Err.FAULT, f"no {tag} line in guest output")


@dataclass
class BenchResult:
    mechanism: Mechanism
    size: int
    iterations: int
    median_ns: float
    mean_ns: float
    stddev_ns: float
    bytes_copied: int
    samples: list[int] = field(default_factory=list, repr=False)

    @property
    def per_transfer(self) -> int:
        return self.bytes_copied // self.iterations

    @property
    def throughput(self) -> float:
        """Bytes per second at the median."""
        return self.size / (self.median_ns / 1e9) if self.median_ns else float("inf")

    def row(self) -> dict:
        return {
            "mechanism": self.mechanism.name, "size": self.size, "iters": self.iterations,
            "median_ns": round(self.median_ns), "mean_ns": round(self.mean_ns),
            "stddev_ns": round(self.stddev_ns), "bytes_copied": self.bytes_copied,
        }


def bench_one(mech: Mechanism | str, size: int, iters: int, timeout: float = 300.0) -> BenchResult:
    mech = Mechanism(mech)
    if size > MAX_BENCH_SIZE:
        raise CapvmError(Err.SIZE_TOO_LARGE, f"{size} > {MAX_BENCH_SIZE}")
    if size < MIN_BENCH_SIZE or iters < 1:
        raise CapvmError(Err.INVAL, "size must be >= 8 bytes and iters >= 1")
    args = [mech.value, str(size), str(iters)]
    heap = size + 256 * 1024
    gc.collect()      # keep a pending collection out of the timed loop
    if mech is Mechanism.MEMCPY:
        cfgs = [DeploymentConfig("bench", 2 * heap, program="bench_memcpy", args=args)]
        run = run_cvms(cfgs, timeout)
        out = run.outputs["bench"]
    else:
        cfgs = [
            DeploymentConfig("rx", heap, program="bench_rx", args=args,
                             allowed_keys=[AclEntry("bench.*", "rw", "tx")]),
            DeploymentConfig("tx", heap, program="bench_tx", args=args),
        ]
        pipes = {BENCH_PORT: size} if mech is Mechanism.PIPE else None
        run = run_cvms(cfgs, timeout, pipes=pipes)
        out = run.outputs["rx"]
    bad = {k: v for k, v in run.exit_codes.items() if v}
    if bad:
        raise CapvmError(Err.FAULT, f"bench guests failed: {bad} {run.faults}")
    lat = _latencies(out, "bench-lat")
    return BenchResult(mech, size, iters, statistics.median(lat), statistics.fmean(lat),
                       statistics.pstdev(lat), run.bytes_copied, lat)


def bench(mechs, sizes: list[int], iters: int) -> list[BenchResult]:
    if isinstance(mechs, (str, Mechanism)):
        mechs = [mechs]
    return [bench_one(m, s, iters) for m in mechs for s in sizes]


def bench_interleaved(mechs, size: int, iters: int, rounds: int = 3) -> dict[Mechanism, BenchResult]:
    """``iters`` samples per mechanism, taken in ``rounds`` alternating chunks.

    A slow stretch on the host then lands on every mechanism rather than on
    whichever one happened to be running.
    """
    mechs = [Mechanism(m) for m in mechs]
    chunks = [iters // rounds + (r < iters % rounds) for r in range(rounds)]
    parts: dict[Mechanism, list[BenchResult]] = {m: [] for m in mechs}
    for r, n in enumerate(chunks):
        if not n:
            continue
        order = mechs[r % len(mechs):] + mechs[:r % len(mechs)]
        for m in order:
            parts[m].append(bench_one(m, size, n))
    out = {}
    for m, rs in parts.items():
        lat = [x for r in rs for x in r.samples]
        out[m] = BenchResult(m, size, len(lat), statistics.median(lat), statistics.fmean(lat),
                             statistics.pstdev(lat), sum(r.bytes_copied for r in rs), lat)
    return out


def to_csv(results: list[BenchResult], out=None) -> str:
    buf = out or io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue() if out is None else ""


# key-value demo

@dataclass
class KvStats:
    transport: str
    ops: int
    latencies: list[int]
    hits: int
    misses: int
    mismatches: list[int]
    responses: int

    @property
    def median_ns(self) -> float:
        return statistics.median(self.latencies)

    @property
    def p95_ns(self) -> float:
        return percentile(self.latencies, 95)

    @property
    def stddev_ns(self) -> float:
        return statistics.pstdev(self.latencies)

    def cdf(self, points=(10, 25, 50, 75, 90, 95, 99, 100)) -> list[tuple[int, float]]:
        return [(p, percentile(self.latencies, p)) for p in points]

    def report(self) -> str:
        lines = [
            f"kv over {self.transport}: {self.ops} ops, {self.hits} hits, {self.misses} misses, "
            f"{len(self.mismatches)} mismatches",
            f"  median {self.median_ns / 1e3:.1f} us  p95 {self.p95_ns / 1e3:.1f} us  "
            f"stddev {self.stddev_ns / 1e3:.1f} us",
            "  percentile  latency_us",
        ]
        lines += [f"  {p:>10}  {v / 1e3:10.1f}" for p, v in self.cdf()]
        return "\n".join(lines)


def percentile(values: list[int], p: float) -> float:
    """Nearest-rank percentile."""
    s = sorted(values)
    k = max(1, -(-len(s) * p // 100))
    return float(s[int(k) - 1])


def check_kv(ops: list[tuple[str, int, bytes]], responses: dict[int, tuple[int, bytes]]):
    """Replay ``ops`` on a plain dict and compare; returns (hits, misses, bad indices)."""
    shadow: dict[int, bytes] = {}
    hits = misses = 0
    bad = []
    for i, (op, key, value) in enumerate(ops):
        if op == "S":
            shadow[key] = value
            want = (KV_STORED, bytes(KV_VALUE_SIZE))
        elif key in shadow:
            hits += 1
            want = (KV_HIT, shadow[key])
        else:
            misses += 1
            want = (KV_MISS, bytes(KV_VALUE_SIZE))
        if responses.get(i) != want:
            bad.append(i)
    return hits, misses, bad


def demo_kv(n_ops: int = 1000, transport: str = "stream", seed: int = 1,
            timeout: float = 300.0) -> KvStats:
    if transport not in ("stream", "pipe"):
        raise CapvmError(Err.INVAL, f"transport must be stream or pipe, not {transport!r}")
    cfgs = [
        DeploymentConfig("server", 1 * MiB, program="kv_server", args=[transport],
                         allowed_keys=[AclEntry("kv.req", "rw", "client")]),
        DeploymentConfig("client", 1 * MiB, program="kv_client",
                         args=[transport, str(n_ops), str(seed)],
                         allowed_keys=[AclEntry("kv.resp", "rw", "server")]),
    ]
    run = run_cvms(cfgs, timeout)
    bad = {k: v for k, v in run.exit_codes.items() if v}
    if bad:
        raise CapvmError(Err.FAULT, f"kv guests failed: {bad} {run.faults}")
    out = run.outputs["client"]
    responses = {}
    for line in out.splitlines():
        if line.startswith("kv-resp "):
            _, i, status, value = line.split(" ")
            responses[int(i)] = (int(status), bytes.fromhex(value))
    hits, misses, bad_idx = check_kv(kv_ops(seed, n_ops), responses)
    return KvStats(transport, n_ops, _latencies(out, "kv-lat"), hits, misses, bad_idx,
                   len(responses))
