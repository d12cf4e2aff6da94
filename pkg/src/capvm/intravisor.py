"""The Intravisor: the trusted monitor that owns the root capability.

It carves cVM regions out of the shared address space, builds their default
capabilities and Affix, runs their threads, answers hostcalls and keeps the
key registry behind CAP_FILE / CAP_CALL / CAP_STREAM, including revocation.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import random
import struct
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from capvm.abi import (
    AFFIX_MON_DDC, AFFIX_OCALL, AFFIX_RET, ARG_PAGE, DEVICE_SLOTS, HC, HOST_TP, MAX_PROGRAMS, PAGE,
    THREAD_SLOT_SIZE, CvmLayout, EntryId, HostcallGroup, Kind, LibosEntry, LibosFn,
    hostcall_group, round_up,
)
from capvm.capmachine import (
    CT6, NULL_CAP, OTYPE_LIMIT, CapFault, CapMachine, Capability,
    CompartmentContext, FaultKind, Perm, cap_and_perms, cap_derive, cap_seal, cap_set_bounds,
    cap_set_cursor,
)
from capvm.config import AclEntry, DeploymentConfig
from capvm.errors import CapvmError, Err
from capvm.pipe import PipeChannel

log = logging.getLogger(__name__)

GUEST_DATA_PERMS = Perm.READ | Perm.WRITE | Perm.LOAD_CAP
GUEST_CODE_PERMS = Perm.READ | Perm.EXEC | Perm.LOAD_CAP
GRANT_FORBIDDEN = Perm.STORE_CAP | Perm.SEAL | Perm.UNSEAL
RIGHTS_PERMS = {"r": Perm.READ, "w": Perm.WRITE, "rw": Perm.READ | Perm.WRITE}
NET_PIPE_CAPACITY = 64 * 1024


class CvmState(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    TERMINATED = "terminated"


class GuestExit(BaseException):
    """Unwinds a guest thread after the exit hostcall."""


class _IcallReturn(BaseException):
    """Control reaching the RET entry: back to whoever entered the cVM."""


@dataclass
class GuestThread:
    tid: int
    cvm: "Cvm"
    ctx: CompartmentContext
    stack_index: int
    ret_otype: int
    guest_tp: int
    result: int | None = None
    fault: BaseException | None = None
    done: threading.Event = field(default_factory=threading.Event)
    thread: threading.Thread | None = None


@dataclass
class Cvm:
    id: int
    name: str
    cfg: DeploymentConfig
    layout: CvmLayout
    pcc: Capability
    ddc: Capability
    entry_pair: tuple[Capability, Capability]
    state: CvmState = CvmState.CREATED
    shim: object = None
    exit_code: int | None = None
    console: list[str] = field(default_factory=list)
    faults: list[str] = field(default_factory=list)
    threads: dict[int, GuestThread] = field(default_factory=dict)
    contexts: set = field(default_factory=set)
    free_stacks: list[int] = field(default_factory=list)
    handles: dict[int, object] = field(default_factory=dict)
    disk: int | None = None

    @property
    def region(self) -> tuple[int, int]:
        return self.layout.base, self.layout.length

    @property
    def affix_addr(self) -> int:
        return self.layout.affix

    @property
    def stack_pool(self) -> list[tuple[int, int]]:
        return [self.layout.stack(i) for i in range(self.layout.stack_count)]

    def output(self) -> str:
        return "".join(self.console)


@dataclass
class RegistryEntry:
    key: bytes
    kind: Kind
    donor: int
    payload: object
    acl: list[AclEntry]
    epoch: int
    handle: int = -1
    live: bool = True
    bindings: list["DeviceBinding"] = field(default_factory=list)
    cond: threading.Condition = field(default_factory=threading.Condition)
    # doorbells: index 0 rings the donor, index 1 rings the recipients
    tokens: list[bool] = field(default_factory=lambda: [False, False])


@dataclass
class DeviceBinding:
    handle: int
    recipient: int
    entry: RegistryEntry
    rights: str
    slot: int | None = None
    cap: Capability | None = None
    revoked: bool = False

    @property
    def epoch(self) -> int:
        return self.entry.epoch

    @property
    def size(self) -> int:
        return self.cap.length if self.cap is not None else 0


@dataclass(frozen=True)
class Hostcall:
    id: HC
    name: str
    group: HostcallGroup
    handler: Callable


class Intravisor:
    def __init__(self, size: int = 64 << 20, programs: dict | None = None,
                 console: Callable[[str, str], None] | None = None,
                 machine: CapMachine | None = None):
        if programs is None:
            from capvm.guestkit import PROGRAMS
            programs = PROGRAMS
        self.machine = machine or CapMachine(size)
        self.programs = programs
        self.console = console or _stdout_console
        root = self.machine.root_capability()
        self._root = root
        self._sealer = cap_and_perms(
            cap_set_bounds(root, 0, min(self.machine.size, OTYPE_LIMIT)), Perm.SEAL | Perm.UNSEAL)
        self._mon_ddc = cap_and_perms(root, Perm.READ | Perm.WRITE | Perm.LOAD_CAP)
        self._lock = threading.RLock()
        self._brk = PAGE  # page 0 stays unmapped
        self._next_otype = 1
        self._next_cvm = 1
        self._tids = itertools.count(1)
        self._epochs = itertools.count(1)
        self.cvms: dict[int, Cvm] = {}
        self.registry: dict[bytes, RegistryEntry] = {}
        self._revoked: dict[bytes, RegistryEntry] = {}
        self._threads: dict[int, GuestThread] = {}
        self._by_ctx: dict[int, GuestThread] = {}
        self._futex = threading.Condition()
        self._futex_gen: dict[int, int] = {}
        self._futex_waiters: dict[int, int] = {}
        self.pipes: dict[int, PipeChannel] = {}
        self.rng = random.Random(0x5EED)

        code = self._alloc(PAGE)
        self._mon_pcc = cap_derive(root, code, PAGE, GUEST_CODE_PERMS)
        self._mon_otype = self._new_otype()
        self.machine.register_code(code, self._ocall_entry)
        self.machine.register_code(code + 16, self._ret_entry)
        self._ocall_code = cap_set_cursor(self._mon_pcc, code)
        self._ret_code = cap_set_cursor(self._mon_pcc, code + 16)
        self.hostcall_table = self._build_table()

    # allocation and sealing

    def _alloc(self, n: int) -> int:
        with self._lock:
            base = self._brk
            size = round_up(n)
            if base + size > self.machine.size:
                raise CapvmError(Err.OUT_OF_SPACE, f"need {size} bytes at {base:#x}")
            self._brk = base + size
            return base

    def _new_otype(self) -> int:
        with self._lock:
            otype = self._next_otype
            if otype >= self._sealer.top:
                raise CapvmError(Err.OUT_OF_SPACE, "otype space exhausted")
            self._next_otype += 1
            return otype

    def _seal_pair(self, code: Capability, data: Capability, otype: int | None = None):
        otype = self._new_otype() if otype is None else otype
        return cap_seal(code, self._sealer, otype), cap_seal(data, self._sealer, otype)

    def _store_cap(self, addr: int, cap: Capability) -> None:
        self.machine.store_cap(None, self._root, addr, cap)

    def _scrub_slot(self, addr: int) -> None:
        self.machine.store_bytes(None, self._root, addr, bytes(16))

    def alloc_pipe(self, capacity: int) -> PipeChannel:
        base = self._alloc(capacity)
        staging = cap_derive(self._root, base, capacity, Perm.READ | Perm.WRITE)
        return PipeChannel(self.machine, staging)

    # lifecycle

    def cvm_make(self, cfg: DeploymentConfig, start: bool = True) -> Cvm:
        """Create a cVM, build its Affix and (by default) enter Init."""
        from capvm.guestkit import ShimLibOS

        cfg.validate()
        progs = cfg.programs
        missing = [p for p in progs if p not in self.programs]
        if missing:
            raise CapvmError(Err.UNKNOWN_PROGRAM, ", ".join(missing))
        if len(progs) > MAX_PROGRAMS or cfg.heap_size // len(progs) < PAGE:
            raise CapvmError(Err.CONFIG_INVALID, "too many programs for the heap")
        probe = CvmLayout(0, cfg.heap_size, len(progs), cfg.stack_count, cfg.stack_size)
        base = self._alloc(probe.length)
        layout = CvmLayout(base, cfg.heap_size, len(progs), cfg.stack_count, cfg.stack_size)
        pcc = cap_derive(self._root, base, layout.length, GUEST_CODE_PERMS)
        ddc = cap_derive(self._root, base, layout.length, GUEST_DATA_PERMS)
        entry_pair = self._seal_pair(cap_set_cursor(pcc, layout.libos_entry(LibosEntry.ENTRY)), ddc)
        with self._lock:
            cid = self._next_cvm
            self._next_cvm += 1
        cvm = Cvm(cid, cfg.name, cfg, layout, pcc, ddc, entry_pair,
                  free_stacks=list(range(cfg.stack_count)))
        if cfg.disk_image:
            try:
                cvm.disk = os.open(cfg.disk_image, os.O_RDWR)
            except OSError as e:
                raise CapvmError(Err.CONFIG_INVALID, f"disk image: {e.strerror}") from None
        cvm.shim = ShimLibOS(self.machine, layout, [self.programs[p] for p in progs],
                             name=cfg.name)
        for addr, handler in cvm.shim.code_entries():
            self.machine.register_code(addr, handler)
        self.build_affix(cvm)
        with self._lock:
            self.cvms[cid] = cvm
        if start:
            cvm.state = CvmState.RUNNING
            self._spawn(cvm, EntryId.INIT, ())
        return cvm

    def build_affix(self, cvm: Cvm) -> None:
        otype = self._mon_otype
        mon = cap_seal(self._mon_ddc, self._sealer, otype)
        ret = cap_seal(self._ret_code, self._sealer, otype)
        ocall = cap_seal(self._ocall_code, self._sealer, otype)
        self._store_cap(cvm.affix_addr + AFFIX_MON_DDC, mon)
        self._store_cap(cvm.affix_addr + AFFIX_RET, ret)
        self._store_cap(cvm.affix_addr + AFFIX_OCALL, ocall)

    def wait(self, cvm: Cvm, timeout: float | None = None) -> bool:
        """Block until every thread of ``cvm`` has finished."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            with self._lock:
                pending = [t for t in cvm.threads.values() if not t.done.is_set()]
            if not pending:
                return True
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return False
            pending[0].done.wait(remaining)

    def terminate(self, cvm: Cvm) -> None:
        cvm.state = CvmState.TERMINATED
        with self._lock:
            owned = [e for e in self.registry.values() if e.donor == cvm.id]
        for e in owned:
            self._revoke_entry(e)

    def shutdown(self) -> None:
        for cvm in list(self.cvms.values()):
            self.terminate(cvm)
        for p in self.pipes.values():
            p.close()
        with self._futex:
            for a in self._futex_gen:
                self._futex_gen[a] += 1
            self._futex.notify_all()
        for cvm in self.cvms.values():
            if cvm.disk is not None:
                os.close(cvm.disk)
                cvm.disk = None

    # threads

    def thread_spawn(self, cvm: Cvm, entry: int, arg: int = 0, *more: int) -> int:
        return self._spawn(cvm, EntryId.THREAD, (int(entry), arg, *more)).tid

    def thread(self, tid: int) -> GuestThread:
        return self._threads[tid]

    def _spawn(self, cvm: Cvm, t0: int, args, pair=None) -> GuestThread:
        """Start a guest thread at the cVM entry (or ``pair``).

        ``args`` may be a callable taking the new thread, for arguments that
        depend on its stack slot.
        """
        with self._lock:
            if not cvm.free_stacks:
                raise CapvmError(Err.STACK_POOL_EXHAUSTED, cvm.name)
            idx = cvm.free_stacks.pop(0)
        sbase, ssize = cvm.layout.stack(idx)
        ctx = CompartmentContext(self.machine, cvm.id)
        th = GuestThread(next(self._tids), cvm, ctx, idx, 0, sbase + ssize - THREAD_SLOT_SIZE)
        try:
            self._refresh_ret(th)
            if callable(args):
                args = args(th)
        except BaseException:
            if th.ret_otype:
                self.machine.retire_otype(th.ret_otype)
            with self._lock:
                cvm.free_stacks.append(idx)
            raise
        with self._lock:
            self._threads[th.tid] = th
            self._by_ctx[id(ctx)] = th
            cvm.threads[th.tid] = th
            cvm.contexts.add(ctx)
        t = threading.Thread(target=self._thread_main, args=(th, t0, args, pair or cvm.entry_pair),
                             name=f"{cvm.name}/{th.tid}", daemon=True)
        th.thread = t
        t.start()
        return th

    def _refresh_ret(self, th: GuestThread) -> int:
        """Seal a fresh RET pair into the thread slot; returns the old otype."""
        cvm = th.cvm
        code = cap_set_cursor(cvm.pcc, cvm.layout.libos_entry(LibosEntry.OCALL_RET))
        code, data = self._seal_pair(code, cvm.ddc)
        self._store_cap(th.guest_tp, code)
        self._store_cap(th.guest_tp + 16, data)
        old, th.ret_otype = th.ret_otype, code.otype
        return old

    def _enter(self, ctx: CompartmentContext, pair, t0: int, args, tp: int) -> int:
        """ICALL: run the cVM entry on ``ctx`` until it returns through RET."""
        ctx.set_ireg("t0", t0)
        ctx.set_args(*args)
        ctx.set_ireg("tp", tp)
        try:
            self.machine.cinvoke(ctx, pair[0], pair[1])
        except _IcallReturn:
            ctx.ddc = self._mon_ddc
            ctx.iregs["tp"] = HOST_TP
            return ctx.iregs["a0"]
        ctx.ddc = ctx.pcc = NULL_CAP
        raise CapvmError(Err.FAULT, "compartment did not return through RET")

    def _thread_main(self, th: GuestThread, t0: int, args, pair) -> None:
        cvm = th.cvm
        try:
            th.result = self._enter(th.ctx, pair, t0, args, th.guest_tp)
        except GuestExit:
            pass
        except (CapFault, CapvmError) as f:
            th.fault = f
            cvm.faults.append(f"thread {th.tid}: {f}")
            log.info("cVM %s thread %d faulted: %s", cvm.name, th.tid, f)
        except Exception as e:  # guest code bug, contained to the thread
            th.fault = e
            cvm.faults.append(f"thread {th.tid}: {type(e).__name__}: {e}")
            log.warning("cVM %s thread %d crashed", cvm.name, th.tid, exc_info=True)
        finally:
            self.machine.retire_otype(th.ret_otype)
            th.ctx.scrub()
            th.ctx.ddc = th.ctx.pcc = NULL_CAP
            with self._lock:
                cvm.contexts.discard(th.ctx)
                self._by_ctx.pop(id(th.ctx), None)
                cvm.free_stacks.append(th.stack_index)
                if t0 == EntryId.INIT and cvm.state is CvmState.RUNNING and not cvm.shim.library:
                    cvm.state = CvmState.TERMINATED
                    if cvm.exit_code is None:
                        cvm.exit_code = 0 if th.fault is None else 1
            th.done.set()

    def _join(self, tid: int, timeout: float | None = None) -> GuestThread:
        th = self._threads.get(tid)
        if th is None:
            raise CapvmError(Err.NO_SUCH_HANDLE, f"thread {tid}")
        if not th.done.wait(timeout):
            raise CapvmError(Err.TIMEOUT)
        return th

    # domain transitions

    def _ret_entry(self, ctx: CompartmentContext) -> None:
        # RET never resumes guest code: unwind to the ICALL that started it
        ctx.scrub()
        ctx.cregs[CT6] = ctx.ddc = ctx.pcc = NULL_CAP
        raise _IcallReturn()

    def _ocall_entry(self, ctx: CompartmentContext) -> None:
        """Hostcall dispatcher, entered through the Affix OCALL pair.

        The caller passes its thread's current RET pair in c1/c2. Each pair
        is good for one return: a fresh one is sealed into the thread slot
        before returning, and the used otype is retired right after.
        """
        ctx.ddc = ctx.ct6
        try:
            guest_tp = ctx.iregs["tp"]
            ctx.iregs["tp"] = HOST_TP
            ret_code, ret_data = ctx.cregs[1], ctx.cregs[2]
            ctx.scrub()
            self.machine.check_invoke(ret_code, ret_data)
            th = self._by_ctx.get(id(ctx))
            if th is None or ret_code.otype != th.ret_otype:
                raise CapFault(FaultKind.SEAL_MISMATCH, "not the current RET pair of this thread")
            args = [ctx.iregs[f"a{i}"] for i in range(6)]
            result = self.hostcall_dispatch(th.cvm, ctx, ctx.iregs["t0"], args)
            ctx.set_ireg("a0", result)
            ctx.iregs["tp"] = guest_tp
            used = self._refresh_ret(th)
        except BaseException:
            # whatever unwinds from here must not carry monitor authority
            ctx.scrub()
            ctx.cregs[CT6] = ctx.ddc = ctx.pcc = NULL_CAP
            raise
        try:
            self.machine.cinvoke(ctx, ret_code, ret_data)
        finally:
            self.machine.retire_otype(used)

    def hostcall_dispatch(self, cvm: Cvm | None, ctx: CompartmentContext, hc_id: int, args) -> int:
        hc = self.hostcall_table.get(hc_id) if isinstance(hc_id, int) else None
        if hc is None or cvm is None:
            return -Err.BAD_HOSTCALL
        if cvm.state is CvmState.TERMINATED:
            raise GuestExit()
        try:
            ret = hc.handler(cvm, ctx, *args)
        except CapvmError as e:
            return -e.code
        except CapFault as f:
            log.debug("hostcall %s: %s", hc.name, f)
            return -Err.FAULT
        return 0 if ret is None else int(ret)

    def _build_table(self) -> dict[int, Hostcall]:
        table = {}
        for hc in HC:
            handler = getattr(self, f"_hc_{hc.name.lower()}")
            table[int(hc)] = Hostcall(hc, hc.name.lower(), hostcall_group(hc), handler)
        return table

    def hostcalls_in(self, group: HostcallGroup) -> list[Hostcall]:
        return [h for h in self.hostcall_table.values() if h.group is group]

    # guest memory on behalf of hostcalls

    def _user(self, cvm: Cvm, addr: int, n: int, perms: Perm = Perm.READ) -> Capability:
        if n < 0 or not cvm.ddc.covers(addr, n):
            raise CapvmError(Err.BOUNDS, f"[{addr:#x},+{n}) outside {cvm.name}")
        return cap_derive(cvm.ddc, addr, n, perms)

    def _read_guest(self, cvm: Cvm, addr: int, n: int) -> bytes:
        return self.machine.load_bytes(None, self._user(cvm, addr, n), 0, n)

    def _write_guest(self, cvm: Cvm, addr: int, data: bytes) -> None:
        self.machine.store_bytes(None, self._user(cvm, addr, len(data), Perm.WRITE), 0, data)

    # minimal hostcalls

    def _hc_print(self, cvm, ctx, addr, n, *_):
        text = self._read_guest(cvm, addr, n).decode("utf-8", "replace")
        cvm.console.append(text)
        self.console(cvm.name, text)
        return n

    def _hc_exit(self, cvm, ctx, code, *_):
        cvm.exit_code = code
        cvm.state = CvmState.TERMINATED
        raise GuestExit()

    def _hc_clock(self, cvm, ctx, *_):
        return time.monotonic_ns()

    def _hc_sleep(self, cvm, ctx, ms, *_):
        time.sleep(max(ms, 0) / 1000)
        return 0

    def _hc_thread_create(self, cvm, ctx, fn, a, b, c, *_):
        return self.thread_spawn(cvm, fn, a, b, c)

    def _hc_thread_join(self, cvm, ctx, tid, timeout_ms, *_):
        th = self._join(tid, None if timeout_ms < 0 else timeout_ms / 1000)
        if th.cvm is not cvm:
            raise CapvmError(Err.NO_SUCH_HANDLE)
        if th.fault is not None:
            return -Err.CALLEE_FAULT
        return th.result or 0

    def _hc_wait(self, cvm, ctx, addr, expected, timeout_ms, *_):
        cap = self._user(cvm, addr, 8)
        deadline = None if timeout_ms < 0 else time.monotonic() + timeout_ms / 1000
        with self._futex:
            value = struct.unpack("<q", self.machine.load_bytes(None, cap, 0, 8))[0]
            if value != expected:
                return 0
            gen = self._futex_gen.setdefault(addr, 0)
            self._futex_waiters[addr] = self._futex_waiters.get(addr, 0) + 1
            try:
                while self._futex_gen[addr] == gen:
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        return -Err.TIMEOUT
                    self._futex.wait(remaining)
            finally:
                self._futex_waiters[addr] -= 1
        return 0

    def _hc_wake(self, cvm, ctx, addr, n, *_):
        self._user(cvm, addr, 8)
        return self.futex_wake(addr)

    def futex_wake(self, addr: int) -> int:
        with self._futex:
            woken = self._futex_waiters.get(addr, 0)
            self._futex_gen[addr] = self._futex_gen.get(addr, 0) + 1
            self._futex.notify_all()
            return woken

    def _hc_rand(self, cvm, ctx, *_):
        return self.rng.getrandbits(62)

    def _hc_argv(self, cvm, ctx, buf, n, *_):
        blob = b"\0".join(a.encode() for a in cvm.cfg.args)
        if n >= len(blob):
            self._write_guest(cvm, buf, blob)
        return len(blob)

    def _hc_yield(self, cvm, ctx, *_):
        time.sleep(0)
        return 0

    def _hc_log(self, cvm, ctx, level, addr, n, *_):
        log.log(level or logging.INFO, "[%s] %s", cvm.name,
                self._read_guest(cvm, addr, n).decode("utf-8", "replace"))
        return 0

    # disk image

    def _disk(self, cvm) -> int:
        if cvm.disk is None:
            raise CapvmError(Err.BADF, "no disk image")
        return cvm.disk

    def _hc_disk_read(self, cvm, ctx, offset, buf, n, *_):
        cap = self._user(cvm, buf, n, Perm.WRITE)
        data = os.pread(self._disk(cvm), n, offset)
        self.machine.store_bytes(None, cap, 0, data)
        return len(data)

    def _hc_disk_write(self, cvm, ctx, offset, buf, n, *_):
        data = self._read_guest(cvm, buf, n)
        return os.pwrite(self._disk(cvm), data, offset)

    def _hc_disk_getsize(self, cvm, ctx, *_):
        return os.fstat(self._disk(cvm)).st_size

    # loopback network

    def pipe(self, port: int, capacity: int = NET_PIPE_CAPACITY) -> PipeChannel:
        with self._lock:
            if port not in self.pipes:
                self.pipes[port] = self.alloc_pipe(capacity)
            return self.pipes[port]

    def _hc_net_read(self, cvm, ctx, port, buf, n, timeout_ms, *_):
        cap = self._user(cvm, buf, n, Perm.WRITE)
        got = self.pipe(port).read(cap, n, None if timeout_ms < 0 else timeout_ms / 1000)
        if got < 0:
            return -Err.REVOKED
        return got if got > 0 or n == 0 else -Err.TIMEOUT

    def _hc_net_write(self, cvm, ctx, port, buf, n, *_):
        cap = self._user(cvm, buf, n, Perm.READ)
        done = 0
        channel = self.pipe(port)
        while done < n:
            m = channel.write(cap_set_cursor(cap, buf + done), n - done)
            if m < 0:
                return -Err.REVOKED
            done += m
        return done

    def _hc_net_poll(self, cvm, ctx, port, timeout_ms=0, *_):
        return self.pipe(port).available(None if timeout_ms < 0 else timeout_ms / 1000)

    # registry

    def _new_handle(self, cvm: Cvm, obj) -> int:
        for h in range(DEVICE_SLOTS):
            if h not in cvm.handles:
                cvm.handles[h] = obj
                return h
        raise CapvmError(Err.OUT_OF_SPACE, "device table full")

    def advertise(self, donor: Cvm, key: bytes, kind: Kind, payload,
                  acl: list[AclEntry] | None = None) -> RegistryEntry:
        """Publish ``payload`` under ``key``.

        FILE payloads are capabilities derived from the donor's ddc; CALL
        payloads are exported function ids; STREAM payloads are the donor's
        local channel id.
        """
        if acl is None:
            acl = [a for a in donor.cfg.allowed_keys if a.matches(key)]
        if kind is Kind.FILE:
            if not (isinstance(payload, Capability) and payload.tag
                    and donor.ddc.covers(payload.base, payload.length)):
                raise CapvmError(Err.RANGE_NOT_OWNED, "payload outside donor region")
            payload = cap_and_perms(payload, Perm.READ | Perm.WRITE)
        elif kind is Kind.CALL:
            if not donor.shim.has_function(payload):
                raise CapvmError(Err.UNKNOWN_FUNC, str(payload))
            code = cap_set_cursor(donor.pcc, donor.layout.libos_entry(LibosEntry.ENTRY))
            payload = (payload, self._seal_pair(code, donor.ddc))
        elif kind is Kind.STREAM:
            code = cap_set_cursor(donor.pcc, donor.layout.libos_entry(LibosEntry.ENTRY))
            payload = (payload, self._seal_pair(code, donor.ddc))
        with self._lock:
            if key in self.registry:
                raise CapvmError(Err.DUPLICATE_KEY, key.decode(errors="replace"))
            entry = RegistryEntry(key, kind, donor.id, payload, list(acl), next(self._epochs))
            entry.handle = self._new_handle(donor, entry)
            if kind is Kind.FILE:
                self._store_cap(donor.layout.device_slot(entry.handle), payload)
            self.registry[key] = entry
            self._revoked.pop(key, None)
        return entry

    def probe(self, recipient: Cvm, key: bytes, kind: Kind | None = None) -> DeviceBinding:
        with self._lock:
            entry = self.registry.get(key)
            if entry is None:
                raise CapvmError(Err.REVOKED if key in self._revoked else Err.NO_SUCH_KEY,
                                 key.decode(errors="replace"))
            if kind is not None and entry.kind is not kind:
                raise CapvmError(Err.NO_SUCH_KEY, "wrong device kind")
            rights = ""
            for a in entry.acl:
                if a.matches(key, recipient.name):
                    rights = "".join(sorted(set(rights + a.rights), reverse=True))
            rights = {"wr": "rw"}.get(rights, rights)
            if not rights:
                raise CapvmError(Err.ACCESS_DENIED, recipient.name)
            binding = DeviceBinding(-1, recipient.id, entry, rights)
            binding.handle = self._new_handle(recipient, binding)
            if entry.kind is Kind.FILE:
                binding.cap = cap_and_perms(entry.payload, RIGHTS_PERMS[rights])
                binding.slot = recipient.layout.device_slot(binding.handle)
                self._store_cap(binding.slot, binding.cap)
            entry.bindings.append(binding)
        return binding

    def _entry_for(self, cvm: Cvm, handle: int) -> tuple[RegistryEntry, DeviceBinding | None]:
        obj = cvm.handles.get(handle)
        if isinstance(obj, RegistryEntry):
            if not obj.live:
                raise CapvmError(Err.REVOKED)
            return obj, None
        if isinstance(obj, DeviceBinding):
            if obj.revoked or not obj.entry.live:
                raise CapvmError(Err.REVOKED)
            return obj.entry, obj
        raise CapvmError(Err.NO_SUCH_HANDLE, str(handle))

    def revoke(self, donor: Cvm, key: bytes) -> None:
        with self._lock:
            entry = self.registry.get(key)
            if entry is None:
                raise CapvmError(Err.NO_SUCH_KEY, key.decode(errors="replace"))
            if entry.donor != donor.id:
                raise CapvmError(Err.NOT_OWNER, donor.name)
        self._revoke_entry(entry)

    def _revoke_entry(self, entry: RegistryEntry) -> None:
        with self._lock:
            if not entry.live:
                return
            entry.live = False
            self.registry.pop(entry.key, None)
            self._revoked[entry.key] = entry
            donor = self.cvms.get(entry.donor)
            if entry.kind is Kind.FILE and donor is not None:
                self._scrub_slot(donor.layout.device_slot(entry.handle))
            if entry.kind in (Kind.CALL, Kind.STREAM):
                self.machine.retire_otype(entry.payload[1][0].otype)
            bindings = list(entry.bindings)
            for b in bindings:
                self._unbind(b)
            if donor is not None:
                donor.handles.pop(entry.handle, None)
        with entry.cond:
            entry.cond.notify_all()

    def _unbind(self, b: DeviceBinding, drop: bool = False) -> None:
        # the handle stays behind as a tombstone answering REVOKED until the
        # recipient releases it
        b.revoked = True
        holder = self.cvms.get(b.recipient)
        if holder is None:
            return
        if b.slot is not None:
            self._scrub_slot(b.slot)
        if b.cap is not None:
            lo, hi = b.entry.payload.base, b.entry.payload.top
            for ctx in list(holder.contexts):
                with ctx.lock:
                    for r, c in enumerate(ctx.cregs):
                        if 0 < r and c.tag and not c.sealed and lo <= c.base and c.top <= hi:
                            ctx.cregs[r] = NULL_CAP
        if drop:
            holder.handles.pop(b.handle, None)

    def release(self, recipient: Cvm, handle: int) -> None:
        with self._lock:
            b = recipient.handles.get(handle)
            if not isinstance(b, DeviceBinding):
                raise CapvmError(Err.NO_SUCH_HANDLE, str(handle))
            if b in b.entry.bindings:
                b.entry.bindings.remove(b)
            self._unbind(b, drop=True)

    def call(self, caller: Cvm, handle: int, is_async: bool, arg: int, size: int) -> int:
        """Run the exported function in a new donor thread.

        Returns the function result, or a completion id when ``is_async``.
        """
        with self._lock:
            entry, _ = self._entry_for(caller, handle)
            if entry.kind is not Kind.CALL:
                raise CapvmError(Err.INVAL, "not a CAP_CALL")
            donor = self.cvms[entry.donor]
        if size > ARG_PAGE:
            raise CapvmError(Err.SIZE_TOO_LARGE, f"{size} > {ARG_PAGE}")
        src = self._user(caller, arg, size, Perm.READ) if size else None
        func_id, pair = entry.payload

        def copy_args(th: GuestThread) -> tuple[int, int, int]:
            page = donor.layout.arg_page(th.stack_index)
            if src is not None:
                self.machine.capcpy(self._user(donor, page, ARG_PAGE, Perm.WRITE), 0, src, 0, size)
            return page, size, func_id

        th = self._spawn(donor, EntryId.CALL, copy_args, pair)
        if is_async:
            return th.tid
        return self.call_result(th.tid)

    def call_result(self, tid: int, timeout: float | None = None) -> int:
        th = self._join(tid, timeout)
        if th.fault is not None:
            raise CapvmError(Err.CALLEE_FAULT, str(th.fault))
        return th.result or 0

    def stream_send(self, sender: Cvm, handle: int, buf: int, n: int) -> int:
        with self._lock:
            entry, _ = self._entry_for(sender, handle)
            if entry.kind is not Kind.STREAM:
                raise CapvmError(Err.INVAL, "not a CAP_STREAM")
            maker = self.cvms[entry.donor]
        src = self._user(sender, buf, n, Perm.READ)
        ident, pair = entry.payload
        ctx = CompartmentContext(self.machine, maker.id)
        ctx.cregs[1] = src
        with self._lock:
            maker.contexts.add(ctx)
        try:
            return self._enter(ctx, pair, EntryId.STREAM, (ident, n), 0)
        except CapFault as f:
            raise CapvmError(Err.FAULT, str(f)) from None
        finally:
            with self._lock:
                maker.contexts.discard(ctx)
            ctx.scrub()

    def file_wait(self, cvm: Cvm, handle: int, timeout: float | None) -> None:
        """Wait for the other side of the device to ring (binary semaphore)."""
        with self._lock:
            entry, binding = self._entry_for(cvm, handle)
        side = 0 if binding is None else 1
        deadline = None if timeout is None else time.monotonic() + timeout
        with entry.cond:
            while not entry.tokens[side] and entry.live:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise CapvmError(Err.TIMEOUT)
                entry.cond.wait(remaining)
            if not entry.live:
                raise CapvmError(Err.REVOKED)
            entry.tokens[side] = False

    def file_notify(self, cvm: Cvm, handle: int) -> None:
        with self._lock:
            entry, binding = self._entry_for(cvm, handle)
        with entry.cond:
            entry.tokens[1 if binding is None else 0] = True
            entry.cond.notify_all()

    # communication hostcalls

    def _hc_cf_advertise(self, cvm, ctx, kind, key_addr, key_len, a, b, *_):
        key = self._read_guest(cvm, key_addr, key_len)
        kind = Kind(kind)
        if kind is Kind.FILE:
            if b < 0 or not cvm.ddc.covers(a, b):
                raise CapvmError(Err.RANGE_NOT_OWNED)
            payload = cap_derive(cvm.ddc, a, b, Perm.READ | Perm.WRITE)
        else:
            payload = a
        return self.advertise(cvm, key, kind, payload).handle

    def _hc_cf_probe(self, cvm, ctx, kind, key_addr, key_len, out, *_):
        key = self._read_guest(cvm, key_addr, key_len)
        b = self.probe(cvm, key, Kind(kind))
        rights = {"r": 1, "w": 2, "rw": 3}[b.rights]
        self._write_guest(cvm, out, struct.pack("<QQ", b.size, rights))
        return b.handle

    def _hc_cf_revoke(self, cvm, ctx, handle, *_):
        with self._lock:
            entry = cvm.handles.get(handle)
            if isinstance(entry, DeviceBinding):
                raise CapvmError(Err.NOT_OWNER)
            if not isinstance(entry, RegistryEntry):
                raise CapvmError(Err.NO_SUCH_HANDLE)
        self._revoke_entry(entry)
        return 0

    def _hc_cf_release(self, cvm, ctx, handle, *_):
        self.release(cvm, handle)
        return 0

    def _hc_cf_call(self, cvm, ctx, handle, is_async, arg, size, out, *_):
        self._user(cvm, out, 8, Perm.WRITE)
        result = self.call(cvm, handle, bool(is_async), arg, size)
        self._write_guest(cvm, out, struct.pack("<q", result))
        return 0

    def _hc_cf_join(self, cvm, ctx, tid, timeout_ms, out, *_):
        self._user(cvm, out, 8, Perm.WRITE)
        th = self._threads.get(tid)
        if th is None or th.cvm is cvm:
            raise CapvmError(Err.NO_SUCH_HANDLE, f"completion {tid}")
        result = self.call_result(tid, None if timeout_ms < 0 else timeout_ms / 1000)
        self._write_guest(cvm, out, struct.pack("<q", result))
        return 0

    def _hc_cf_wait(self, cvm, ctx, handle, timeout_ms, *_):
        self.file_wait(cvm, handle, None if timeout_ms < 0 else timeout_ms / 1000)
        return 0

    def _hc_cf_notify(self, cvm, ctx, handle, *_):
        self.file_notify(cvm, handle)
        return 0

    def _hc_cf_stream_send(self, cvm, ctx, handle, buf, n, *_):
        return self.stream_send(cvm, handle, buf, n)

    def _hc_cf_seal(self, cvm, ctx, entry, code_base, code_len, data_base, data_len, slot):
        """Seal a (code, data) pair inside the caller's region and store it at ``slot``."""
        if not (cvm.pcc.covers(code_base, code_len) and code_base <= entry < code_base + code_len):
            raise CapvmError(Err.RANGE_NOT_OWNED, "code range")
        data = self._user(cvm, data_base, data_len, GUEST_DATA_PERMS)
        self._user(cvm, slot, 32, Perm.WRITE)
        code = cap_set_cursor(cap_derive(cvm.pcc, code_base, code_len, GUEST_CODE_PERMS), entry)
        sealed = self._seal_pair(code, data)
        self._store_cap(slot, sealed[0])
        self._store_cap(slot + 16, sealed[1])
        return sealed[0].otype


def _stdout_console(name: str, text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def granted_caps_ok(cap: Capability) -> bool:
    """True if ``cap`` could be handed to a guest under the store-cap policy."""
    return not cap.tag or not cap.perms & GRANT_FORBIDDEN


__all__ = [
    "Cvm", "CvmState", "DeviceBinding", "GuestExit", "GuestThread",
    "Hostcall", "Intravisor", "RegistryEntry", "granted_caps_ok",
]
