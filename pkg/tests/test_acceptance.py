"""Acceptance gate: one PASS/FAIL line per criterion.

Run on its own with ``pytest -v -s tests/test_acceptance.py`` (the verdict
lines are printed even without ``-s``).
"""

import itertools
import random
import statistics
import threading
import time

import pytest

from capvm.abi import HostcallGroup
from capvm.attacks import attacker_suite
from capvm.bench import MiB, Mechanism, bench_interleaved, bench_one, demo_kv
from capvm.capmachine import (
    ALL_PERMS, GRANULE, CapFault, CapMachine, CompartmentContext, FaultKind, Perm,
    cap_and_perms, cap_inc_offset, cap_seal, cap_set_bounds, cap_unseal,
)
from capvm.config import AclEntry
from capvm.errors import CapvmError, Err
from conftest import Host

KiB = 1024
SIZES = [4 * KiB, 64 * KiB, 1 * MiB, 4 * MiB]


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


# 1. capability properties over fuzzed derivation chains

def fuzz_chains(n_chains: int, seed: int, mem_size: int = 1 << 16) -> tuple[int, list[str]]:
    """Drive random derivation chains and check each step against a plain
    interval/permission model. Returns (steps run, violations)."""
    rng = random.Random(seed)
    m = CapMachine(mem_size)
    root = m.root_capability()
    sealer = cap_and_perms(cap_set_bounds(root, 0, 256), Perm.SEAL | Perm.UNSEAL)
    stored: dict[int, object] = {}      # granule -> capability the model put there
    bad: list[str] = []
    steps = 0
    granules = mem_size // GRANULE

    for chain in range(n_chains):
        cap = root
        model = (0, mem_size, ALL_PERMS, None)      # base, top, perms, otype
        for _ in range(rng.randint(1, 10)):
            steps += 1
            base, top, perms, otype = model
            op = rng.randrange(8)
            try:
                # the model's verdict is fixed before the machine runs the op
                want = otype is None
                if op == 0:
                    a = rng.randint(base - 64, top)
                    n = rng.randint(-8, top - a + 64)
                    want = want and n >= 0 and base <= a and a + n <= top
                    new_model = (a, a + n, perms, otype)
                    new = cap_set_bounds(cap, a, n)
                elif op == 1:
                    mask = Perm(rng.getrandbits(7))
                    new_model = (base, top, perms & mask, otype)
                    new = cap_and_perms(cap, mask)
                elif op == 2:
                    new_model = model
                    new = cap_inc_offset(cap, rng.randint(-99, 99))
                elif op == 3:
                    ot = rng.randrange(256)
                    new_model = (base, top, perms, ot)
                    new = cap_seal(cap, sealer, ot)
                elif op == 4:
                    want = otype is not None
                    new_model = (base, top, perms, None)
                    new = cap_unseal(cap, sealer)
                elif op == 5:                                   # store then load back
                    g = rng.randrange(granules)
                    m.store_cap(None, root, g * GRANULE, cap)
                    stored[g] = cap
                    if m.load_cap(None, root, g * GRANULE) != cap:
                        bad.append(f"chain {chain}: cap round trip at granule {g}")
                    continue
                elif op == 6:                                   # integrity
                    addr = rng.randrange(mem_size - 48)
                    n = rng.randint(1, 40)
                    m.store_bytes(None, root, addr, rng.randbytes(n))
                    for g in range(addr // GRANULE, (addr + n - 1) // GRANULE + 1):
                        stored.pop(g, None)
                        if m.memory.tag_at(g * GRANULE):
                            bad.append(f"chain {chain}: byte store left tag on granule {g}")
                    continue
                else:                                           # provenance
                    g = rng.randrange(granules)
                    got = m.load_cap(None, root, g * GRANULE)
                    if got.tag != (g in stored) or (got.tag and got != stored[g]):
                        bad.append(f"chain {chain}: granule {g} tag not explained by a store")
                    continue
            except CapFault:
                if want:
                    bad.append(f"chain {chain}: op {op} faulted on a legal derivation")
                continue
            if not want:
                bad.append(f"chain {chain}: op {op} accepted an illegal derivation")
                continue
            nb, nt, np_, no = new_model
            if (new.base, new.top, new.perms, new.otype, new.tag) != (nb, nt, np_, no, True):
                bad.append(f"chain {chain}: op {op} gave {new}, model {new_model}")
            if new.base < base or new.top > top or new.perms & ~perms:
                bad.append(f"chain {chain}: op {op} widened authority")
            cap, model = new, new_model
        if chain % 1000 == 999:                                  # full sweep of the tag table
            tagged = {g for g in range(granules) if m.memory.tags[g]}
            if tagged != set(stored):
                bad.append(f"after chain {chain}: tagged granules differ from stores")
    return steps, bad


def test_c1_capability_properties(verdict):
    t0 = time.monotonic()
    steps, bad = fuzz_chains(10_000, seed=20261016)
    dt = time.monotonic() - t0
    verdict(1, not bad and dt < 60,
            f"10000 chains, {steps} steps, {len(bad)} violations, {dt:.1f} s (< 60 s)"
            + (f"; first: {bad[0]}" if bad else ""))


# 2. copy-count exactness

def test_c2_copy_exactness(verdict):
    iters = 4
    rows, ok = [], True
    for mech, factor in (("file", 1), ("stream", 1), ("pipe", 2)):
        for size in SIZES:
            r = bench_one(mech, size, iters)
            per = r.bytes_copied / iters
            ok &= r.bytes_copied == factor * size * iters
            rows.append(f"{mech}@{size}={per:.0f}")
    verdict(2, ok, "bytes copied per transfer: " + " ".join(rows))


# 3. throughput ordering at 4 MiB

def test_c3_throughput_ordering(verdict):
    got = bench_interleaved(["pipe", "file", "stream"], 4 * MiB, 30, rounds=3)
    res = {m.value: r for m, r in got.items()}
    assert all(r.iterations == 30 for r in res.values())
    tp = {m: r.throughput for m, r in res.items()}
    f_ratio, s_ratio = tp["file"] / tp["pipe"], tp["stream"] / tp["pipe"]
    verdict(3, f_ratio >= 1.2 and s_ratio >= 1.2,
            f"4 MiB x 30 medians (3 interleaved rounds): file {res['file'].median_ns / 1e6:.2f} ms, "
            f"stream {res['stream'].median_ns / 1e6:.2f} ms, pipe {res['pipe'].median_ns / 1e6:.2f} ms; "
            f"throughput ratio file/pipe {f_ratio:.2f}, stream/pipe {s_ratio:.2f} (>= 1.2)")


# 4. escape suite

def test_c4_escape_suite(verdict):
    rep = attacker_suite()
    wrong = [str(r) for r in rep.results if not r.ok]
    verdict(4, rep.passed and len(rep.results) >= 10 and rep.escapes == 0,
            f"{len(rep.results)} behaviors, {rep.escapes} escapes, "
            f"{len(wrong)} unexpected outcomes, victim {'bit-identical' if rep.victim_intact else 'MODIFIED'}")


# 5. revocation

def _code(op) -> Err | None:
    try:
        op()
    except CapvmError as e:
        return e.code
    return None


def test_c5_revocation(verdict):
    host = Host(8 << 20)
    report = {}
    try:
        ready, revoked, done = threading.Event(), threading.Event(), threading.Event()

        def donor(api, argv):
            buf = api.alloc(4096)
            api.write(buf, b"d" * 4096)
            hs = [api.file_make("r.file", buf, 4096), api.stream_make("r.stream"),
                  api.call_make("r.call", "fn")]
            rx = api.alloc(4096)
            api.stream_recv(hs[1], 1, rx, 4096)
            ready.set()
            done.wait(30)
            api.file_destroy(hs[0])
            api.stream_destroy(hs[1])
            api.call_destroy(hs[2])
            revoked.set()
            return 0

        host.program("donor", donor, {"fn": lambda api, a, n: len(api.arg)})
        d = host.boot("donor", allowed_keys=[AclEntry("r.*", "rw")])

        def recipient(api, argv):
            ready.wait(30)
            f, s, c = api.file_get("r.file"), api.stream_get("r.stream"), api.call_get("r.call")
            buf = api.alloc(64)
            api.file_read(f, buf, 0, 64)                 # the bindings work before revocation
            api.call(c, buf, 8)
            done.set()
            revoked.wait(30)
            ops = {
                "file_read": lambda: api.file_read(f, buf, 0, 64),
                "file_write": lambda: api.file_write(f, buf, 0, 64),
                "file_wait": lambda: api.file_wait(f, 10),
                "file_notify": lambda: api.file_notify(f),
                "stream_send": lambda: api.stream_send(s, buf, 64),
                "call_sync": lambda: api.call(c, buf, 8),
                "call_async": lambda: api.call(c, buf, 8, is_async=True),
                "file_get": lambda: api.file_get("r.file"),
                "stream_get": lambda: api.stream_get("r.stream"),
                "call_get": lambda: api.call_get("r.call"),
            }
            c0 = api.machine.copy_counter
            report["codes"] = {name: _code(op) for name, op in ops.items()}
            report["copied"] = api.machine.copy_counter - c0
            return 0

        r = host.boot(host.program("recipient", recipient))
        host.finish(r)
        host.finish(d)
    finally:
        host.iv.shutdown()
    wrong = {k: v for k, v in report["codes"].items() if v is not Err.REVOKED}
    verdict(5, not wrong and report["copied"] == 0,
            f"{len(report['codes'])} data-path ops after destroy, "
            f"{len(report['codes']) - len(wrong)} REVOKED, copy_counter delta {report['copied']}"
            + (f"; wrong: {wrong}" if wrong else ""))


# 6. cinvoke precondition lattice

def test_c6_cinvoke_lattice(verdict):
    m = CapMachine(1 << 16)
    root = m.root_capability()
    sealer = cap_set_bounds(root, 0, 64)
    code = cap_and_perms(cap_set_bounds(root, 4096, 64), Perm.READ | Perm.EXEC)
    data = cap_and_perms(cap_set_bounds(root, 8192, 64), Perm.READ | Perm.WRITE)
    m.register_code(4096, lambda ctx: "ran")
    table = []
    for code_sealed, data_sealed, same, exe in itertools.product([False, True], repeat=4):
        c = code if exe else cap_and_perms(code, Perm.READ)
        c = cap_seal(c, sealer, 5) if code_sealed else c
        d = cap_seal(data, sealer, 5 if same else 6) if data_sealed else data
        want = code_sealed and data_sealed and same and exe
        try:
            got = CompartmentContext(m, "t").cinvoke(c, d) == "ran"
        except CapFault as f:
            got = False
            ok_kind = f.kind is (FaultKind.PERM if code_sealed and data_sealed and same
                                 else FaultKind.SEAL_MISMATCH)
            if not ok_kind:
                got = None
        table.append(got == want)
    verdict(6, all(table),
            f"{sum(table)}/{len(table)} combinations of (code sealed, data sealed, otype equal, EXEC) "
            f"match accept-iff-all, with the specified fault on each reject")


# 7. hostcall surface

def test_c7_hostcall_surface(verdict):
    from capvm.intravisor import Intravisor
    iv = Intravisor(1 << 20)
    disk = [h.name for h in iv.hostcalls_in(HostcallGroup.DISK)]
    comm = [h.name for h in iv.hostcalls_in(HostcallGroup.COMM)]
    ids = sorted(iv.hostcall_table)
    ok = len(disk) == 3 and len(comm) == 10 and len(set(ids)) == len(ids)
    verdict(7, ok, f"disk {len(disk)} ({', '.join(disk)}), comm {len(comm)} ({', '.join(comm)})")


# 8. key-value demo

def test_c8_kv_demo(verdict):
    rounds = 3
    runs = {"stream": [], "pipe": []}
    for _ in range(rounds):                    # interleaved, so drift hits both alike
        for t in ("stream", "pipe"):
            runs[t].append(demo_kv(1000, t, seed=7))
    first = runs["stream"][0]
    exact = all(not s.mismatches and s.responses == 1000 for s in runs["stream"])
    med = {t: statistics.median(x for s in rs for x in s.latencies) for t, rs in runs.items()}
    sd = {t: statistics.pstdev([x for s in rs for x in s.latencies]) for t, rs in runs.items()}
    verdict(8, exact and med["stream"] <= med["pipe"],
            f"1000 ops over STREAM: {len(first.mismatches)} mismatches ({first.hits} hits, "
            f"{first.misses} misses); pooled over {rounds} runs each, median "
            f"stream {med['stream'] / 1e3:.0f} us vs pipe {med['pipe'] / 1e3:.0f} us, "
            f"stddev {sd['stream'] / 1e3:.0f} vs {sd['pipe'] / 1e3:.0f} us")


# 9. two programs over one libOS

def test_c9_nested_isolation(verdict):
    host = Host(8 << 20)
    marks = {0: b"\xa5", 1: b"\x5a"}
    armed = threading.Barrier(3, timeout=30)
    finished = threading.Barrier(3, timeout=30)
    released = threading.Barrier(3, timeout=30)
    outcome = {}

    def peek(api, peer, _):
        api.read(peer, 16)
        return 1

    def poke(api, peer, _):
        api.write(peer, b"\xee" * 16)
        return 1

    def prog(api, argv):
        me = api.getpid()
        mine = api.alloc(1024)
        api.write(mine, marks[me] * 1024)
        size = api.region[1]
        peer = mine + size if me == 0 else mine - size
        armed.wait()
        codes = [Err(-api.join(api.spawn("peek", peer))), Err(-api.join(api.spawn("poke", peer)))]
        codes.append(_code(lambda: api.write_fd(1, peer, 16)))
        finished.wait()
        released.wait()
        # after the snapshot: the key string is scratch in our own heap
        codes.append(_code(lambda: api.file_make("steal", peer, 16)))
        outcome[me] = codes
        return 0

    fns = {"peek": peek, "poke": poke}
    host.program("left", prog, fns)
    host.program("right", prog, fns)
    try:
        cvm = host.boot("pair", "left,right", stack_count=8)
        armed.wait()
        mem = host.iv.machine.memory
        regions = [cvm.layout.prog_region(i) for i in (0, 1)]
        before = [mem.read(*r) for r in regions]
        finished.wait()
        after = [mem.read(*r) for r in regions]
        released.wait()
        host.settle(cvm, 30)
    finally:
        host.iv.shutdown()
    diff = [sum(a != b for a, b in zip(x, y)) for x, y in zip(before, after)]
    refused = all(codes == [Err.CALLEE_FAULT, Err.CALLEE_FAULT, Err.BOUNDS, Err.RANGE_NOT_OWNED]
                  for codes in outcome.values())
    shown = "; ".join(f"program {k}: " + ",".join(c.name for c in v) for k, v in sorted(outcome.items()))
    verdict(9, diff == [0, 0] and refused and len(outcome) == 2 and cvm.exit_code == 0,
            f"program regions changed by {diff[0]} and {diff[1]} bytes during the cross-access phase; "
            f"peer read, peer write, deputy write, deputy grant -> {shown}")
