"""Code that runs inside a cVM: the shim libOS and the program-side API.

A cVM holds one libOS and up to ``MAX_PROGRAMS`` programs. Each program gets
its own slice of the heap and runs under a ddc bounded to that slice; it
reaches the libOS only through a sealed syscall pair, and the libOS reaches
the Intravisor only through the Affix. All three boundaries are ``cinvoke``.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from capvm.abi import (
    AFFIX_MON_DDC, AFFIX_OCALL, ARG_PAGE, HC, LIBOS_CODE_SIZE, PROG_AFFIX_SIZE,
    PROG_CODE_SIZE, STREAM_NONBLOCK, CvmLayout, EntryId, LibosEntry, LibosFn,
    ProgEntryId, Sys,
)
from capvm.capmachine import (
    NULL_CAP, CapMachine, Capability, CompartmentContext, Perm, cap_derive,
)
from capvm.commdev import CapDriver, _local
from capvm.errors import CapvmError, Err, check

PROG_DATA_PERMS = Perm.READ | Perm.WRITE | Perm.LOAD_CAP
SYSRET_OFF = 16     # program code slot the libOS returns to after a syscall
ARG_REG = 10        # read-only capability to CAP_CALL arguments on function entry
STDOUT, STDERR = 1, 2


@dataclass
class GuestProgram:
    """A program image. ``main(api, argv) -> int``; exported functions take
    ``(api, a, b) -> int``. Library programs keep their cVM alive after
    ``main`` returns. Raw programs run with the whole cVM as their ddc, which
    is how a compromised libOS is modelled.
    """
    name: str
    main: Callable | None = None
    functions: dict[str, Callable] = field(default_factory=dict)
    library: bool = False
    raw: bool = False


class Heap:
    """First-fit allocator over one program's slice."""

    def __init__(self, base: int, size: int, align: int = 16):
        self.align = align
        self._free = [(base, size)]
        self._used: dict[int, int] = {}
        self._lock = threading.Lock()

    def alloc(self, n: int) -> int:
        n = max(self.align, (n + self.align - 1) // self.align * self.align)
        with self._lock:
            for i, (addr, size) in enumerate(self._free):
                if size >= n:
                    if size == n:
                        del self._free[i]
                    else:
                        self._free[i] = (addr + n, size - n)
                    self._used[addr] = n
                    return addr
        raise CapvmError(Err.OUT_OF_SPACE, f"heap cannot fit {n} bytes")

    def free(self, addr: int) -> None:
        with self._lock:
            n = self._used.pop(addr, None)
            if n is None:
                raise CapvmError(Err.INVAL, f"free of unknown block {addr:#x}")
            self._free.append((addr, n))
            self._free.sort()
            merged = []
            for a, s in self._free:
                if merged and merged[-1][0] + merged[-1][1] == a:
                    merged[-1] = (merged[-1][0], merged[-1][1] + s)
                else:
                    merged.append((a, s))
            self._free = merged

    @property
    def in_use(self) -> int:
        with self._lock:
            return sum(self._used.values())


@dataclass
class _Fd:
    kind: str          # "console", "disk", "dev" or "mgmt" (/dev/cf)
    handle: int = -1
    offset: int = 0


class ShimLibOS:
    """The libOS of one cVM."""

    def __init__(self, machine: CapMachine, layout: CvmLayout, programs: list[GuestProgram],
                 name: str = "cvm"):
        self.machine = machine
        self.layout = layout
        self.programs = programs
        self.name = name
        self.driver = CapDriver(machine, layout, self.ocall)
        self.funcs: list[tuple[int, str, Callable]] = []
        for i, p in enumerate(programs):
            for fname, fn in p.functions.items():
                self.funcs.append((i, fname, fn))
        self.heaps = [Heap(layout.prog_region(i)[0] + PROG_AFFIX_SIZE,
                           layout.prog_region(i)[1] - PROG_AFFIX_SIZE)
                      for i in range(len(programs))]
        self.user: list[Capability | None] = [None] * len(programs)
        self.fds: dict[int, _Fd] = {0: _Fd("console"), STDOUT: _Fd("console"), STDERR: _Fd("console")}
        self._fd_lock = threading.Lock()
        self._syscalls = {
            Sys.OPEN: self._sys_open, Sys.READ: self._sys_read, Sys.WRITE: self._sys_write,
            Sys.CLOSE: self._sys_close, Sys.LSEEK: self._sys_lseek, Sys.EXIT: self._sys_exit,
            Sys.GETARGV: self._sys_getargv, Sys.CLOCK: self._sys_clock, Sys.SLEEP: self._sys_sleep,
            Sys.GETPID: self._sys_getpid, Sys.NET_READ: self._sys_net_read,
            Sys.NET_WRITE: self._sys_net_write, Sys.NET_POLL: self._sys_net_poll,
            Sys.THREAD_CREATE: self._sys_thread_create, Sys.THREAD_JOIN: self._sys_thread_join,
            Sys.FILE_MAKE: self._sys_file_make, Sys.FILE_DESTROY: self._sys_file_destroy,
            Sys.FILE_GET: self._sys_file_get, Sys.FILE_READ: self._sys_file_read,
            Sys.FILE_WRITE: self._sys_file_write, Sys.FILE_WAIT: self._sys_file_wait,
            Sys.FILE_NOTIFY: self._sys_file_notify, Sys.FILE_SIZE: self._sys_file_size,
            Sys.CALL_MAKE: self._sys_call_make, Sys.CALL_DESTROY: self._sys_call_destroy,
            Sys.CALL_GET: self._sys_call_get, Sys.CALL: self._sys_call,
            Sys.CALL_JOIN: self._sys_call_join, Sys.STREAM_MAKE: self._sys_stream_make,
            Sys.STREAM_DESTROY: self._sys_stream_destroy, Sys.STREAM_GET: self._sys_stream_get,
            Sys.STREAM_SEND: self._sys_stream_send, Sys.STREAM_RECV: self._sys_stream_recv,
            Sys.STREAM_POLL: self._sys_stream_poll,
        }

    @property
    def library(self) -> bool:
        return all(p.library for p in self.programs)

    def has_function(self, func_id: int) -> bool:
        return 1 <= func_id <= len(self.funcs)

    def func_id(self, prog: int, name: str) -> int:
        for fid, (i, fname, _) in enumerate(self.funcs, 1):
            if i == prog and fname == name:
                return fid
        raise CapvmError(Err.UNKNOWN_FUNC, name)

    def code_entries(self) -> list[tuple[int, Callable]]:
        lay = self.layout
        entries = [
            (lay.libos_entry(LibosEntry.ENTRY), self._entry),
            (lay.libos_entry(LibosEntry.OCALL_RET), self._resume),
            (lay.libos_entry(LibosEntry.PROG_RET), self._resume),
        ]
        for i in range(len(self.programs)):
            entries.append((lay.libos_entry(LibosEntry.SYSCALL + i), self._syscall_entry(i)))
            entries.append((lay.prog_code(i), self._prog_entry(i)))
            entries.append((lay.prog_code(i) + SYSRET_OFF, self._resume))
        return entries

    # transitions

    @staticmethod
    def _resume(ctx: CompartmentContext) -> None:
        # landing pad after cinvoke back into this domain
        ctx.ddc = ctx.ct6

    def _entry(self, ctx: CompartmentContext) -> None:
        """The cVM entry point (ICALL target): dispatch on t0, return via RET."""
        ctx.ddc = ctx.ct6
        t0 = ctx.iregs["t0"]
        a = [ctx.iregs[f"a{i}"] for i in range(6)]
        try:
            if t0 == EntryId.INIT:
                ret = self.init(ctx)
            elif t0 == EntryId.THREAD:
                ret = self._thread(ctx, *a[:4])
            elif t0 == EntryId.CALL:
                ret = self._call_entry(ctx, a[0], a[1], a[2])
            elif t0 == EntryId.STREAM:
                ret = self.driver.stream_deliver(ctx, a[0], a[1])
            else:
                ret = -Err.BAD_HOSTCALL
        except CapvmError as e:
            ret = -e.code
        ctx.set_ireg("a0", ret)
        affix = self.layout.affix
        ctx.clc(1, "ddc", affix + 16)
        ctx.clc(2, "ddc", affix + AFFIX_MON_DDC)
        ctx.cinvoke(1, 2)

    def ocall(self, ctx: CompartmentContext, hc: int, *args: int) -> int:
        """Hostcall through the Affix; the thread's RET pair goes in c1/c2."""
        tp = ctx.iregs["tp"]
        affix = self.layout.affix
        ctx.clc(1, "ddc", tp)
        ctx.clc(2, "ddc", tp + 16)
        ctx.clc(3, "ddc", affix + AFFIX_OCALL)
        ctx.clc(4, "ddc", affix + AFFIX_MON_DDC)
        ctx.set_ireg("t0", hc)
        ctx.set_args(*args)
        ctx.cinvoke(3, 4)
        return ctx.iregs["a0"]

    def _hc(self, ctx, hc: int, *args: int) -> int:
        return check(self.ocall(ctx, hc, *args))

    def init(self, ctx: CompartmentContext) -> int:
        lay = self.layout
        cvm_len = lay.length
        for i, prog in enumerate(self.programs):
            pbase, psize = lay.prog_region(i)
            dbase, dlen = (lay.base, cvm_len) if prog.raw else (pbase, psize)
            code = lay.prog_code(i)
            slots = lay.pair_slots(i)
            self._hc(ctx, HC.CF_SEAL, code, code, PROG_CODE_SIZE, dbase, dlen, slots)
            self._hc(ctx, HC.CF_SEAL, code + SYSRET_OFF, code, PROG_CODE_SIZE, dbase, dlen, slots + 32)
            self._hc(ctx, HC.CF_SEAL, lay.libos_entry(LibosEntry.SYSCALL + i), lay.code,
                     LIBOS_CODE_SIZE, lay.base, cvm_len, pbase)
            self._hc(ctx, HC.CF_SEAL, lay.libos_entry(LibosEntry.PROG_RET), lay.code,
                     LIBOS_CODE_SIZE, lay.base, cvm_len, pbase + 32)
            self.user[i] = cap_derive(ctx.ddc, dbase, dlen, PROG_DATA_PERMS)
        if len(self.programs) == 1:
            codes = [self.run_program(ctx, 0)]
        else:
            tids = [self._hc(ctx, HC.THREAD_CREATE, LibosFn.RUN_PROGRAM, i, 0, 0)
                    for i in range(len(self.programs))]
            codes = [self.ocall(ctx, HC.THREAD_JOIN, t, -1) for t in tids]
        code = next((c for c in codes if c), 0)
        if not self.library:
            self.ocall(ctx, HC.EXIT, code)
        return code

    def _enter_program(self, ctx, i: int, t0: int, *args: int) -> int:
        slots = self.layout.pair_slots(i)
        ctx.set_ireg("t0", t0)
        ctx.set_args(*args)
        ctx.clc(1, "ddc", slots)
        ctx.clc(2, "ddc", slots + 16)
        saved = ctx.ddc
        ctx.cinvoke(1, 2)
        ctx.ddc = saved
        return ctx.iregs["a0"]

    def run_program(self, ctx, i: int) -> int:
        return self._enter_program(ctx, i, ProgEntryId.MAIN)

    def _thread(self, ctx, fn, a1, a2, a3) -> int:
        if fn == LibosFn.RUN_PROGRAM:
            return self.run_program(ctx, a1)
        if fn == LibosFn.PROGRAM_FUNC:
            return self._enter_program(ctx, a1, ProgEntryId.FUNC, a2, a3, 0)
        if fn == LibosFn.PARK:
            return 0
        return -Err.INVAL

    def _call_entry(self, ctx, page: int, size: int, func_id: int) -> int:
        if not self.has_function(func_id):
            return -Err.UNKNOWN_FUNC
        if not 0 <= size <= ARG_PAGE:
            return -Err.SIZE_TOO_LARGE
        # the arguments stay where the Intravisor copied them; the program
        # gets a read-only view instead of a second copy
        ctx.csetbounds(ARG_REG, "ddc", page, size)
        ctx.candperm(ARG_REG, ARG_REG, Perm.READ)
        return self._enter_program(ctx, self.funcs[func_id - 1][0], ProgEntryId.FUNC,
                                   func_id, page, size)

    def _prog_entry(self, i: int):
        prog = self.programs[i]
        pbase = self.layout.prog_region(i)[0]

        def entry(ctx: CompartmentContext) -> None:
            ctx.ddc = ctx.ct6
            t0 = ctx.iregs["t0"]
            api = ProgramAPI(self, ctx, i)
            try:
                if t0 == ProgEntryId.MAIN:
                    ret = prog.main(api, api.argv()) if prog.main else 0
                elif t0 == ProgEntryId.FUNC:
                    _, _, fn = self.funcs[ctx.iregs["a0"] - 1]
                    arg, size = ctx.iregs["a1"], ctx.iregs["a2"]
                    if ctx.cregs[ARG_REG].tag:
                        api.arg = ctx.cload(ARG_REG, 0, size)
                        ctx.cregs[ARG_REG] = NULL_CAP
                    ret = fn(api, arg, size)
                else:
                    ret = -Err.INVAL
            except CapvmError as e:
                ret = -e.code
            finally:
                api.release()
            ctx.set_ireg("a0", int(ret or 0))
            ctx.clc(1, "ddc", pbase + 32)
            ctx.clc(2, "ddc", pbase + 48)
            ctx.cinvoke(1, 2)

        return entry

    def _syscall_entry(self, i: int):
        slots = self.layout.pair_slots(i)

        def entry(ctx: CompartmentContext) -> None:
            ctx.ddc = ctx.ct6
            sysno = ctx.iregs["t0"]
            args = [ctx.iregs[f"a{k}"] for k in range(6)]
            handler = self._syscalls.get(sysno)
            try:
                ret = -Err.ENOSYS if handler is None else handler(ctx, i, *args)
            except CapvmError as e:
                ret = -e.code
            ctx.set_ireg("a0", int(ret or 0))
            ctx.clc(1, "ddc", slots + 32)
            ctx.clc(2, "ddc", slots + 48)
            ctx.cinvoke(1, 2)

        return entry

    # syscalls; every buffer is checked against the calling program's ddc

    def _buf(self, i: int, addr: int, n: int, perms: Perm = Perm.READ) -> Capability:
        return _local(self.user[i], addr, n, perms)

    def _sys_open(self, ctx, i, path, n, flags, *_):
        name = self.machine.load_bytes(ctx, self._buf(i, path, n), 0, n).decode()
        if name == "/dev/cf":
            fd = _Fd("mgmt")
        elif name == "/dev/disk":
            self._hc(ctx, HC.DISK_GETSIZE)
            fd = _Fd("disk")
        elif name.startswith("/dev/cf") and name[7:].isdigit():
            h = int(name[7:])
            self.driver._handle(h, object)
            fd = _Fd("dev", h)
        else:
            return -Err.NO_SUCH_KEY
        with self._fd_lock:
            num = next(k for k in range(3, 1 << 16) if k not in self.fds)
            self.fds[num] = fd
        return num

    def _fd(self, num: int) -> _Fd:
        fd = self.fds.get(num)
        if fd is None:
            raise CapvmError(Err.BADF, str(num))
        return fd

    def _sys_read(self, ctx, i, num, buf, n, *_):
        fd = self._fd(num)
        self._buf(i, buf, n, Perm.WRITE)
        if fd.kind == "disk":
            m = self._hc(ctx, HC.DISK_READ, fd.offset, buf, n)
        elif fd.kind == "dev":
            m = self.driver.file_read(ctx, self.user[i], fd.handle, buf, fd.offset, n)
        elif fd.kind == "mgmt":
            return -Err.INVAL
        else:
            return 0
        fd.offset += m
        return m

    def _sys_write(self, ctx, i, num, buf, n, *_):
        fd = self._fd(num)
        self._buf(i, buf, n)
        if fd.kind == "console":
            return self._hc(ctx, HC.PRINT, buf, n)
        if fd.kind == "disk":
            m = self._hc(ctx, HC.DISK_WRITE, fd.offset, buf, n)
        elif fd.kind == "mgmt":
            return -Err.INVAL
        else:
            m = self.driver.file_write(ctx, self.user[i], fd.handle, buf, fd.offset, n)
        fd.offset += m
        return m

    def _sys_close(self, ctx, i, num, *_):
        with self._fd_lock:
            if num < 3 or self.fds.pop(num, None) is None:
                return -Err.BADF
        return 0

    def _sys_lseek(self, ctx, i, num, off, whence, *_):
        fd = self._fd(num)
        if whence == 0:
            fd.offset = off
        elif whence == 1:
            fd.offset += off
        elif whence == 2:
            end = (self._hc(ctx, HC.DISK_GETSIZE) if fd.kind == "disk"
                   else self.driver.file_size(fd.handle))
            fd.offset = end + off
        else:
            return -Err.INVAL
        return fd.offset

    def _sys_exit(self, ctx, i, code, *_):
        return self.ocall(ctx, HC.EXIT, code)

    def _sys_getargv(self, ctx, i, buf, n, *_):
        self._buf(i, buf, n, Perm.WRITE)
        return self._hc(ctx, HC.ARGV, buf, n)

    def _sys_clock(self, ctx, i, *_):
        return self._hc(ctx, HC.CLOCK)

    def _sys_sleep(self, ctx, i, ms, *_):
        return self._hc(ctx, HC.SLEEP, ms)

    def _sys_getpid(self, ctx, i, *_):
        return i

    def _sys_net_read(self, ctx, i, port, buf, n, timeout, *_):
        self._buf(i, buf, n, Perm.WRITE)
        return self.ocall(ctx, HC.NET_READ, port, buf, n, timeout)

    def _sys_net_write(self, ctx, i, port, buf, n, *_):
        self._buf(i, buf, n)
        return self.ocall(ctx, HC.NET_WRITE, port, buf, n)

    def _sys_net_poll(self, ctx, i, port, timeout_ms, *_):
        return self.ocall(ctx, HC.NET_POLL, port, timeout_ms)

    def _sys_thread_create(self, ctx, i, func_id, arg, *_):
        if not self.has_function(func_id) or self.funcs[func_id - 1][0] != i:
            return -Err.UNKNOWN_FUNC
        return self._hc(ctx, HC.THREAD_CREATE, LibosFn.PROGRAM_FUNC, i, func_id, arg)

    def _sys_thread_join(self, ctx, i, tid, timeout, *_):
        return self.ocall(ctx, HC.THREAD_JOIN, tid, timeout)

    def _sys_file_make(self, ctx, i, key, klen, addr, size, *_):
        return self.driver.file_make(ctx, self.user[i], key, klen, addr, size)

    def _sys_file_destroy(self, ctx, i, h, *_):
        self.driver.file_destroy(ctx, h)
        return 0

    def _sys_file_get(self, ctx, i, key, klen, *_):
        return self.driver.file_get(ctx, self.user[i], key, klen)

    def _sys_file_read(self, ctx, i, h, dst, off, n, *_):
        return self.driver.file_read(ctx, self.user[i], h, dst, off, n)

    def _sys_file_write(self, ctx, i, h, src, off, n, *_):
        return self.driver.file_write(ctx, self.user[i], h, src, off, n)

    def _sys_file_wait(self, ctx, i, h, timeout, *_):
        return self.driver.file_wait(ctx, h, timeout)

    def _sys_file_notify(self, ctx, i, h, *_):
        return self.driver.file_notify(ctx, h)

    def _sys_file_size(self, ctx, i, h, *_):
        return self.driver.file_size(h)

    def _sys_call_make(self, ctx, i, key, klen, func_id, *_):
        if not self.has_function(func_id) or self.funcs[func_id - 1][0] != i:
            return -Err.UNKNOWN_FUNC
        return self.driver.call_make(ctx, self.user[i], key, klen, func_id)

    def _sys_call_destroy(self, ctx, i, h, *_):
        self.driver.call_destroy(ctx, h)
        return 0

    def _sys_call_get(self, ctx, i, key, klen, *_):
        return self.driver.call_get(ctx, self.user[i], key, klen)

    def _sys_call(self, ctx, i, h, is_async, arg, size, *_):
        return self.driver.call(ctx, self.user[i], h, is_async, arg, size)

    def _sys_call_join(self, ctx, i, cid, timeout, *_):
        return self.driver.call_join(ctx, cid, timeout)

    def _sys_stream_make(self, ctx, i, key, klen, flags, *_):
        return self.driver.stream_make(ctx, self.user[i], key, klen, flags)

    def _sys_stream_destroy(self, ctx, i, h, *_):
        self.driver.stream_destroy(ctx, h)
        return 0

    def _sys_stream_get(self, ctx, i, key, klen, *_):
        return self.driver.stream_get(ctx, self.user[i], key, klen)

    def _sys_stream_send(self, ctx, i, h, buf, n, *_):
        return self.driver.stream_send(ctx, self.user[i], h, buf, n)

    def _sys_stream_recv(self, ctx, i, h, buf_id, buf, size, *_):
        self.driver.stream_recv(ctx, self.user[i], h, buf_id, buf, size)
        return 0

    def _sys_stream_poll(self, ctx, i, h, out, limit, timeout, *_):
        out_cap = self._buf(i, out, 16 * limit, Perm.WRITE)
        done = self.driver.stream_poll(ctx, h, limit, timeout)
        blob = b"".join(struct.pack("<qq", bid, n) for bid, n in done)
        self.machine.store_bytes(ctx, out_cap, 0, blob)
        return len(done)


class ProgramAPI:
    """What a program sees: its own memory, and syscalls into the libOS."""

    def __init__(self, shim: ShimLibOS, ctx: CompartmentContext, index: int):
        self._shim = shim
        self.ctx = ctx
        self.index = index
        self.heap = shim.heaps[index]
        self.region = shim.layout.prog_region(index)
        self._affix = self.region[0]
        self._scratch: list[int] = []
        self.arg = b""   # CAP_CALL argument bytes, for exported functions

    @property
    def machine(self) -> CapMachine:
        return self._shim.machine

    def release(self) -> None:
        for addr in self._scratch:
            self.heap.free(addr)
        self._scratch.clear()

    # memory

    def alloc(self, n: int) -> int:
        return self.heap.alloc(n)

    def free(self, addr: int) -> None:
        self.heap.free(addr)

    def read(self, addr: int, n: int) -> bytes:
        return self.ctx.read(addr, n)

    def write(self, addr: int, data: bytes) -> None:
        self.ctx.write(addr, data)

    def memcpy(self, dst: int, src: int, n: int) -> None:
        ddc = self.ctx.ddc
        self.machine.capcpy(cap_derive(ddc, dst, n, Perm.WRITE), 0,
                            cap_derive(ddc, src, n, Perm.READ), 0, n)

    def _tmp(self, data: bytes | int) -> int:
        n = data if isinstance(data, int) else len(data)
        addr = self.heap.alloc(max(n, 1))
        self._scratch.append(addr)
        if not isinstance(data, int):
            self.write(addr, data)
        return addr

    def _drop(self, addr: int) -> None:
        self._scratch.remove(addr)
        self.heap.free(addr)

    def _key(self, key: str | bytes) -> tuple[int, int]:
        raw = key.encode() if isinstance(key, str) else key
        return self._tmp(raw), len(raw)

    # syscalls

    def syscall(self, sysno: int, *args: int) -> int:
        ctx = self.ctx
        ctx.set_ireg("t0", sysno)
        ctx.set_args(*args)
        ctx.clc(1, "ddc", self._affix)
        ctx.clc(2, "ddc", self._affix + 16)
        ctx.cinvoke(1, 2)
        return ctx.iregs["a0"]

    def _sys(self, sysno: int, *args: int) -> int:
        return check(self.syscall(sysno, *args))

    def _with_key(self, sysno: int, key, *args: int) -> int:
        addr, n = self._key(key)
        try:
            return self._sys(sysno, addr, n, *args)
        finally:
            self._drop(addr)

    def print(self, text: str) -> int:
        data = text.encode()
        addr = self._tmp(data)
        try:
            return self._sys(Sys.WRITE, STDOUT, addr, len(data))
        finally:
            self._drop(addr)

    def open(self, path: str, flags: int = 0) -> int:
        return self._with_key(Sys.OPEN, path, flags)

    def read_fd(self, fd: int, buf: int, n: int) -> int:
        return self._sys(Sys.READ, fd, buf, n)

    def write_fd(self, fd: int, buf: int, n: int) -> int:
        return self._sys(Sys.WRITE, fd, buf, n)

    def close(self, fd: int) -> None:
        self._sys(Sys.CLOSE, fd)

    def lseek(self, fd: int, off: int, whence: int = 0) -> int:
        return self._sys(Sys.LSEEK, fd, off, whence)

    def exit(self, code: int = 0) -> None:
        self.syscall(Sys.EXIT, code)

    def argv(self) -> list[str]:
        n = 256
        while True:
            buf = self._tmp(n)
            try:
                m = self._sys(Sys.GETARGV, buf, n)
                if m <= n:
                    raw = self.read(buf, m)
                    return raw.decode().split("\0") if raw else []
            finally:
                self._drop(buf)
            n = m

    def clock_ns(self) -> int:
        return self._sys(Sys.CLOCK)

    def sleep_ms(self, ms: int) -> None:
        self._sys(Sys.SLEEP, ms)

    def getpid(self) -> int:
        return self._sys(Sys.GETPID)

    def net_read(self, port: int, buf: int, n: int, timeout_ms: int = -1) -> int:
        return self._sys(Sys.NET_READ, port, buf, n, timeout_ms)

    def net_read_exact(self, port: int, buf: int, n: int) -> None:
        got = 0
        while got < n:
            got += self.net_read(port, buf + got, n - got)

    def net_write(self, port: int, buf: int, n: int) -> int:
        return self._sys(Sys.NET_WRITE, port, buf, n)

    def net_poll(self, port: int, timeout_ms: int = 0) -> int:
        """Bytes readable on ``port``; blocks up to ``timeout_ms`` (-1: forever) for some."""
        return self._sys(Sys.NET_POLL, port, timeout_ms)

    def spawn(self, func: str, arg: int = 0) -> int:
        return self._sys(Sys.THREAD_CREATE, self._shim.func_id(self.index, func), arg)

    def join(self, tid: int, timeout_ms: int = -1) -> int:
        return self.syscall(Sys.THREAD_JOIN, tid, timeout_ms)

    # CAP_FILE

    def file_make(self, key, addr: int, size: int) -> int:
        return self._with_key(Sys.FILE_MAKE, key, addr, size)

    def file_get(self, key, wait_ms: int = 0) -> int:
        return self._retry(lambda: self._with_key(Sys.FILE_GET, key), wait_ms)

    def file_read(self, h: int, dst: int, off: int, n: int) -> int:
        return self._sys(Sys.FILE_READ, h, dst, off, n)

    def file_write(self, h: int, src: int, off: int, n: int) -> int:
        return self._sys(Sys.FILE_WRITE, h, src, off, n)

    def file_wait(self, h: int, timeout_ms: int = -1) -> None:
        self._sys(Sys.FILE_WAIT, h, timeout_ms)

    def file_notify(self, h: int) -> None:
        self._sys(Sys.FILE_NOTIFY, h)

    def file_size(self, h: int) -> int:
        return self._sys(Sys.FILE_SIZE, h)

    def file_destroy(self, h: int) -> None:
        self._sys(Sys.FILE_DESTROY, h)

    # CAP_CALL

    def call_make(self, key, func: str) -> int:
        return self._with_key(Sys.CALL_MAKE, key, self._shim.func_id(self.index, func))

    def call_get(self, key, wait_ms: int = 0) -> int:
        return self._retry(lambda: self._with_key(Sys.CALL_GET, key), wait_ms)

    def call(self, h: int, arg: int = 0, size: int = 0, is_async: bool = False) -> int:
        return self._sys(Sys.CALL, h, int(is_async), arg, size)

    def call_join(self, cid: int, timeout_ms: int = -1) -> int:
        return self._sys(Sys.CALL_JOIN, cid, timeout_ms)

    def call_destroy(self, h: int) -> None:
        self._sys(Sys.CALL_DESTROY, h)

    # CAP_STREAM

    def stream_make(self, key, nonblock: bool = False) -> int:
        return self._with_key(Sys.STREAM_MAKE, key, STREAM_NONBLOCK if nonblock else 0)

    def stream_get(self, key, wait_ms: int = 0) -> int:
        return self._retry(lambda: self._with_key(Sys.STREAM_GET, key), wait_ms)

    def stream_send(self, h: int, buf: int, n: int) -> int:
        return self._sys(Sys.STREAM_SEND, h, buf, n)

    def stream_recv(self, h: int, buf_id: int, buf: int, size: int) -> None:
        self._sys(Sys.STREAM_RECV, h, buf_id, buf, size)

    def stream_poll(self, h: int, limit: int = 16, timeout_ms: int = -1) -> list[tuple[int, int]]:
        out = self._tmp(16 * limit)
        try:
            k = self._sys(Sys.STREAM_POLL, h, out, limit, timeout_ms)
            raw = self.read(out, 16 * k)
        finally:
            self._drop(out)
        return [struct.unpack_from("<qq", raw, 16 * j) for j in range(k)]

    def stream_destroy(self, h: int) -> None:
        self._sys(Sys.STREAM_DESTROY, h)

    @staticmethod
    def _retry(fn: Callable[[], int], wait_ms: int) -> int:
        deadline = time.monotonic() + wait_ms / 1000
        while True:
            try:
                return fn()
            except CapvmError as e:
                if e.code != Err.NO_SUCH_KEY or time.monotonic() >= deadline:
                    raise
            time.sleep(0.001)


def __getattr__(name: str):
    # the program corpus imports this module, so it is loaded lazily
    if name == "PROGRAMS":
        from capvm.programs import PROGRAMS
        return PROGRAMS
    raise AttributeError(name)


__all__ = ["GuestProgram", "Heap", "ProgramAPI", "ShimLibOS"]
