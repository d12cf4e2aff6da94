"""Guest programs shipped with the package.

Each entry of ``PROGRAMS`` can be named in a deployment config's ``program``
line. They are written against ``ProgramAPI`` only, like code built against
the libOS headers.
"""

from __future__ import annotations

import random
import struct

from capvm.attacks import ATTACKER
from capvm.errors import CapvmError, Err
from capvm.guestkit import GuestProgram, ProgramAPI

KV_REQ_SIZE = 102     # op, key, 100-byte value
KV_RESP_SIZE = 101    # status, 100-byte value
KV_VALUE_SIZE = 100
KV_KEYS = 256
KV_PORT_REQ, KV_PORT_RESP = 1, 2
KV_HIT, KV_MISS, KV_STORED = 0, 1, 2
KV_POSTED = 8
BENCH_PORT = 7


def hello(api: ProgramAPI, argv: list[str]) -> int:
    who = " ".join(argv) if argv else "world"
    api.print(f"hello, {who}\n")
    return 0


def disk_cat(api: ProgramAPI, argv: list[str]) -> int:
    fd = api.open("/dev/disk")
    buf = api.alloc(4096)
    while True:
        n = api.read_fd(fd, buf, 4096)
        if n <= 0:
            break
        api.write_fd(1, buf, n)
    api.close(fd)
    return 0


# CAP_FILE producer and consumer: a shared buffer plus a doorbell

def producer(api: ProgramAPI, argv: list[str]) -> int:
    size = int(argv[0]) if argv else 4096
    buf = api.alloc(size)
    api.write(buf, bytes(i % 251 for i in range(size)))
    h = api.file_make("pc.buf", buf, size)
    api.file_notify(h)
    api.file_wait(h)   # consumer is done
    api.file_destroy(h)
    return 0


def consumer(api: ProgramAPI, argv: list[str]) -> int:
    h = api.file_get("pc.buf", wait_ms=5000)
    size = api.file_size(h)
    api.file_wait(h)
    buf = api.alloc(size)
    api.file_read(h, buf, 0, size)
    ok = api.read(buf, size) == bytes(i % 251 for i in range(size))
    api.print(f"consumer read {size} bytes, {'ok' if ok else 'MISMATCH'}\n")
    api.file_notify(h)
    return 0 if ok else 1


# CAP_CALL: a library cVM exporting functions, and a user of it

def _xor_enc(api: ProgramAPI, arg: int, size: int) -> int:
    return sum(b ^ 0x5A for b in api.arg)


def _checksum(api: ProgramAPI, arg: int, size: int) -> int:
    total = 0
    for b in api.arg:
        total = (total * 31 + b) & 0xFFFF_FFFF
    return total


def crypto_lib(api: ProgramAPI, argv: list[str]) -> int:
    api.call_make("crypto.enc", "enc")
    api.call_make("crypto.sum", "sum")
    return 0


def crypto_user(api: ProgramAPI, argv: list[str]) -> int:
    h = api.call_get("crypto.sum", wait_ms=5000)
    msg = b"the quick brown fox"
    buf = api.alloc(len(msg))
    api.write(buf, msg)
    result = api.call(h, buf, len(msg))
    cid = api.call(h, buf, len(msg), is_async=True)
    again = api.call_join(cid)
    api.print(f"checksum {result} {again}\n")
    return 0 if result == again else 1


# key-value demo over CAP_STREAM or the two-copy loopback

def kv_ops(seed: int, n: int) -> list[tuple[str, int, bytes]]:
    """Deterministic request mix: about one third SETs, the rest GETs."""
    rng = random.Random(seed)
    ops = []
    for _ in range(n):
        key = rng.randrange(64)
        if rng.random() < 0.35:
            ops.append(("S", key, bytes(rng.randrange(256) for _ in range(KV_VALUE_SIZE))))
        else:
            ops.append(("G", key, bytes(KV_VALUE_SIZE)))
    return ops


def _kv_apply(api: ProgramAPI, table: int, req: bytes, out: int) -> bool:
    op, key = req[0:1], req[1]
    slot = table + key * (KV_VALUE_SIZE + 1)
    if op == b"S":
        api.write(slot, b"\1" + req[2:2 + KV_VALUE_SIZE])
        api.write(out, bytes([KV_STORED]) + bytes(KV_VALUE_SIZE))
    elif op == b"G":
        rec = api.read(slot, KV_VALUE_SIZE + 1)
        status = KV_HIT if rec[0] else KV_MISS
        api.write(out, bytes([status]) + rec[1:])
    return op != b"Q"


def kv_server(api: ProgramAPI, argv: list[str]) -> int:
    transport = argv[0] if argv else "stream"
    table = api.alloc(KV_KEYS * (KV_VALUE_SIZE + 1))
    api.write(table, bytes(KV_KEYS * (KV_VALUE_SIZE + 1)))     # alloc does not zero
    out = api.alloc(KV_RESP_SIZE)
    if transport == "pipe":
        # socket-server shape: wait for readiness, read, reply
        buf = api.alloc(KV_REQ_SIZE)
        while True:
            api.net_poll(KV_PORT_REQ, -1)
            api.net_read_exact(KV_PORT_REQ, buf, KV_REQ_SIZE)
            if not _kv_apply(api, table, api.read(buf, KV_REQ_SIZE), out):
                return 0
            api.net_write(KV_PORT_RESP, out, KV_RESP_SIZE)
    req = api.stream_make("kv.req")
    bufs = [api.alloc(KV_REQ_SIZE) for _ in range(KV_POSTED)]
    for i, b in enumerate(bufs):
        api.stream_recv(req, i, b, KV_REQ_SIZE)
    resp = api.stream_get("kv.resp", wait_ms=10000)
    while True:
        for bid, n in api.stream_poll(req, limit=KV_POSTED):
            if not _kv_apply(api, table, api.read(bufs[bid], n), out):
                api.stream_destroy(req)
                return 0
            api.stream_send(resp, out, KV_RESP_SIZE)
            api.stream_recv(req, bid, bufs[bid], KV_REQ_SIZE)


def kv_client(api: ProgramAPI, argv: list[str]) -> int:
    transport = argv[0] if argv else "stream"
    nops = int(argv[1]) if len(argv) > 1 else 100
    seed = int(argv[2]) if len(argv) > 2 else 1
    req = api.alloc(KV_REQ_SIZE)
    if transport == "pipe":
        rbuf = api.alloc(KV_RESP_SIZE)

        def roundtrip() -> bytes:
            api.net_write(KV_PORT_REQ, req, KV_REQ_SIZE)
            api.net_poll(KV_PORT_RESP, -1)
            api.net_read_exact(KV_PORT_RESP, rbuf, KV_RESP_SIZE)
            return api.read(rbuf, KV_RESP_SIZE)
    else:
        resp = api.stream_make("kv.resp")
        rbufs = [api.alloc(KV_RESP_SIZE) for _ in range(4)]
        for i, b in enumerate(rbufs):
            api.stream_recv(resp, i, b, KV_RESP_SIZE)
        sreq = api.stream_get("kv.req", wait_ms=10000)

        def roundtrip() -> bytes:
            api.stream_send(sreq, req, KV_REQ_SIZE)
            (bid, n), = api.stream_poll(resp, limit=1)
            data = api.read(rbufs[bid], n)
            api.stream_recv(resp, bid, rbufs[bid], KV_RESP_SIZE)
            return data

    lat = []
    lines = []
    for i, (op, key, value) in enumerate(kv_ops(seed, nops)):
        api.write(req, op.encode() + bytes([key]) + value)
        t0 = api.clock_ns()
        data = roundtrip()
        lat.append(api.clock_ns() - t0)
        lines.append(f"kv-resp {i} {data[0]} {data[1:].hex()}\n")
    api.write(req, b"Q" + bytes(KV_REQ_SIZE - 1))
    if transport == "pipe":
        api.net_write(KV_PORT_REQ, req, KV_REQ_SIZE)
    else:
        api.stream_send(sreq, req, KV_REQ_SIZE)
    api.print("".join(lines) + "kv-lat " + ",".join(map(str, lat)) + "\n")
    return 0


# throughput benchmark: a sender and a receiver cVM

def _bench_args(argv: list[str]) -> tuple[str, int, int]:
    return argv[0], int(argv[1]), int(argv[2])


def bench_rx(api: ProgramAPI, argv: list[str]) -> int:
    mech, size, iters = _bench_args(argv)
    ack = api.file_make("bench.ack", api.alloc(16), 16)
    buf = api.alloc(size)
    h = -1
    if mech == "file":
        h = api.file_make("bench.buf", buf, size)
    elif mech == "stream":
        h = api.stream_make("bench.s")
        api.stream_recv(h, 0, buf, size)
    api.file_notify(ack)
    lat = []
    for _ in range(iters):
        if mech == "file":
            api.file_wait(h)
        elif mech == "stream":
            api.stream_poll(h, limit=1)
        else:
            api.net_read_exact(BENCH_PORT, buf, size)
        done = api.clock_ns()
        lat.append(done - struct.unpack("<q", api.read(buf, 8))[0])
        if mech == "stream":
            api.stream_recv(h, 0, buf, size)
        api.file_notify(ack)
    api.print("bench-lat " + ",".join(map(str, lat)) + "\n")
    return 0


def bench_tx(api: ProgramAPI, argv: list[str]) -> int:
    mech, size, iters = _bench_args(argv)
    buf = api.alloc(size)
    api.write(buf, bytes(i & 0xFF for i in range(size)))
    ack = api.file_get("bench.ack", wait_ms=10000)
    api.file_wait(ack)
    h = -1
    if mech == "file":
        h = api.file_get("bench.buf", wait_ms=10000)
    elif mech == "stream":
        h = api.stream_get("bench.s", wait_ms=10000)
    for _ in range(iters):
        api.write(buf, struct.pack("<q", api.clock_ns()))
        if mech == "file":
            api.file_write(h, buf, 0, size)
            api.file_notify(h)
        elif mech == "stream":
            api.stream_send(h, buf, size)
        else:
            api.net_write(BENCH_PORT, buf, size)
        api.file_wait(ack)
    return 0


def bench_memcpy(api: ProgramAPI, argv: list[str]) -> int:
    _, size, iters = _bench_args(argv)
    src, dst = api.alloc(size), api.alloc(size)
    lat = []
    for _ in range(iters):
        t0 = api.clock_ns()
        api.memcpy(dst, src, size)
        lat.append(api.clock_ns() - t0)
    api.print("bench-lat " + ",".join(map(str, lat)) + "\n")
    return 0


# two programs sharing one libOS; each tries to touch the other

ISO_PATTERN = {0: b"\xa5", 1: b"\x5a"}
ISO_SIZE = 1024


def _iso_read(api: ProgramAPI, peer: int, _: int) -> int:
    api.read(peer, 16)
    return 1   # reached only if the access went through


def _iso_write(api: ProgramAPI, peer: int, _: int) -> int:
    api.write(peer, b"\xee" * 16)
    return 1


def _iso_main(api: ProgramAPI, argv: list[str]) -> int:
    me = api.getpid()
    base, size = api.region
    mine = api.alloc(ISO_SIZE)
    api.write(mine, ISO_PATTERN[me] * ISO_SIZE)
    peer = mine + size if me == 0 else mine - size
    results = []
    for fn in ("read", "write"):
        results.append(api.join(api.spawn(fn, peer)))
    try:
        api.read_fd(0, peer, 16)   # confused deputy: ask the libOS to touch the peer
        results.append(1)
    except CapvmError as e:
        results.append(-e.code)
    api.print(f"iso {me} {' '.join(map(str, results))}\n")
    return 0 if all(r < 0 for r in results) else 1


def victim(api: ProgramAPI, argv: list[str]) -> int:
    secret = api.alloc(256)
    api.write(secret, b"SECRET" * 42 + b"!!!!")
    public = api.alloc(64)
    api.write(public, b"public data".ljust(64, b"."))
    api.file_make("victim.public", public, 64)
    api.file_make("victim.secret", secret, 256)
    api.call_make("victim.fn", "fn")
    return 0


PROGRAMS: dict[str, GuestProgram] = {
    p.name: p for p in [
        GuestProgram("hello", hello),
        GuestProgram("disk_cat", disk_cat),
        GuestProgram("producer", producer),
        GuestProgram("consumer", consumer),
        GuestProgram("crypto_lib", crypto_lib, {"enc": _xor_enc, "sum": _checksum}, library=True),
        GuestProgram("crypto_user", crypto_user),
        GuestProgram("kv_server", kv_server),
        GuestProgram("kv_client", kv_client),
        GuestProgram("bench_rx", bench_rx),
        GuestProgram("bench_tx", bench_tx),
        GuestProgram("bench_memcpy", bench_memcpy),
        GuestProgram("iso_a", _iso_main, {"read": _iso_read, "write": _iso_write}),
        GuestProgram("iso_b", _iso_main, {"read": _iso_read, "write": _iso_write}),
        GuestProgram("victim", victim, {"fn": _checksum}, library=True),
        ATTACKER,
    ]
}


def register(program: GuestProgram) -> None:
    if program.name in PROGRAMS:
        raise CapvmError(Err.DUPLICATE_KEY, program.name)
    PROGRAMS[program.name] = program
