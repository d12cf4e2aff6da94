"""CAP devices: the libOS drivers behind CAP_FILE, CAP_CALL and CAP_STREAM.

The Intravisor is involved only at setup and teardown (advertise, probe,
revoke) and for entering another cVM. File data moves through a capability
the Intravisor stored in this cVM's device slot; stream data is copied by the
receiving cVM's driver into one of its posted buffers. Every data path is a
single ``capcpy``.
"""

from __future__ import annotations

import enum
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from capvm.abi import HC, Kind, STREAM_NONBLOCK, CvmLayout
from capvm.capmachine import (
    NULL_CAP, CapFault, CapMachine, Capability, CompartmentContext, FaultKind, Perm,
    cap_derive,
)
from capvm.errors import CapvmError, Err, check

Ocall = Callable[..., int]

DATA_REG = 5   # scratch capability register used by the file data path


class Role(enum.Enum):
    DONOR = "donor"
    RECIPIENT = "recipient"


@dataclass
class FileHandle:
    device: int
    role: Role
    key: bytes
    size: int
    slot: int
    rights: str = "rw"
    closed: bool = False

    @property
    def path(self) -> str:
        return f"/dev/cf{self.device}"


@dataclass
class CallHandle:
    device: int
    role: Role
    key: bytes
    func_id: int | None = None
    closed: bool = False


@dataclass
class StreamHandle:
    device: int
    role: Role
    key: bytes
    channel: "StreamChannel | None" = None
    closed: bool = False


class StreamChannel:
    """Receive side of a stream: buffers posted by the owner, filled by senders."""

    def __init__(self, ident: int, blocking: bool = True):
        self.ident = ident
        self.blocking = blocking
        self.posted: deque[tuple[int, Capability]] = deque()
        self.completed: deque[tuple[int, int]] = deque()
        self._ids: set[int] = set()
        self._cond = threading.Condition()
        self.closed = False

    def post(self, buf_id: int, dst: Capability) -> None:
        with self._cond:
            if self.closed:
                raise CapvmError(Err.REVOKED)
            if buf_id in self._ids:
                raise CapvmError(Err.DUPLICATE_ID, str(buf_id))
            self._ids.add(buf_id)
            self.posted.append((buf_id, dst))
            self._cond.notify_all()

    def deliver(self, machine: CapMachine, src: Capability, n: int) -> tuple[int, int]:
        """Take one posted buffer and copy ``src`` into it."""
        with self._cond:
            while not self.posted and not self.closed:
                if not self.blocking:
                    raise CapvmError(Err.WOULD_BLOCK)
                self._cond.wait()
            if self.closed:
                raise CapvmError(Err.REVOKED)
            buf_id, dst = self.posted.popleft()
            m = min(n, dst.length)
            try:
                machine.capcpy(dst, 0, src, 0, m)
            except CapFault:
                self.posted.appendleft((buf_id, dst))
                raise
            self.completed.append((buf_id, m))
            self._cond.notify_all()
            return buf_id, m

    def poll(self, limit: int, timeout: float | None) -> list[tuple[int, int]]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self.completed and not self.closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise CapvmError(Err.TIMEOUT)
                self._cond.wait(remaining)
            if not self.completed:
                raise CapvmError(Err.REVOKED)
            out = []
            while self.completed and len(out) < limit:
                item = self.completed.popleft()
                self._ids.discard(item[0])
                out.append(item)
            return out

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self.posted.clear()
            self._cond.notify_all()

    @property
    def depth(self) -> int:
        with self._cond:
            return len(self.posted)


def _local(user: Capability, addr: int, n: int, perms: Perm) -> Capability:
    """Capability for a caller buffer, checked against the caller's ddc."""
    if n < 0 or not user.covers(addr, n):
        raise CapvmError(Err.BOUNDS, f"buffer [{addr:#x},+{n}) outside caller memory")
    return cap_derive(user, addr, n, perms)


class CapDriver:
    """Per-cVM CAP device driver state, running with libOS authority."""

    def __init__(self, machine: CapMachine, layout: CvmLayout, ocall: Ocall):
        self.machine = machine
        self.layout = layout
        self._ocall = ocall
        self._lock = threading.Lock()
        self.handles: dict[int, FileHandle | CallHandle | StreamHandle] = {}
        self.channels: dict[int, StreamChannel] = {}
        self._next_channel = 1

    def _hc(self, ctx: CompartmentContext, hc: HC, *args) -> int:
        return check(self._ocall(ctx, hc, *args))

    def _handle(self, h: int, cls):
        with self._lock:
            obj = self.handles.get(h)
        if obj is None or not isinstance(obj, cls) or obj.closed:
            raise CapvmError(Err.NO_SUCH_HANDLE, str(h))
        return obj

    def _key(self, ctx: CompartmentContext, user: Capability, key_addr: int, key_len: int) -> bytes:
        return self.machine.load_bytes(ctx, _local(user, key_addr, key_len, Perm.READ), 0, key_len)

    @staticmethod
    def _out_area(ctx: CompartmentContext) -> int:
        # the libOS stack of the calling thread, just below its RET pair
        return ctx.iregs["tp"] - 32

    def _probe(self, ctx, user, kind: Kind, key_addr: int, key_len: int) -> tuple[int, int, int, bytes]:
        key = self._key(ctx, user, key_addr, key_len)
        out = self._out_area(ctx)
        h = self._hc(ctx, HC.CF_PROBE, kind, key_addr, key_len, out)
        size, rights = struct.unpack("<QQ", ctx.read(out, 16))
        return h, size, rights, key

    # CAP_FILE

    def file_make(self, ctx, user, key_addr, key_len, addr, size) -> int:
        if size < 0 or not user.covers(addr, size):
            raise CapvmError(Err.RANGE_NOT_OWNED, f"[{addr:#x},+{size}) outside caller memory")
        key = self._key(ctx, user, key_addr, key_len)
        h = self._hc(ctx, HC.CF_ADVERTISE, Kind.FILE, key_addr, key_len, addr, size)
        with self._lock:
            self.handles[h] = FileHandle(h, Role.DONOR, key, size, self.layout.device_slot(h))
        return h

    def file_get(self, ctx, user, key_addr, key_len) -> int:
        h, size, rights, key = self._probe(ctx, user, Kind.FILE, key_addr, key_len)
        text = {1: "r", 2: "w", 3: "rw"}.get(rights, "")
        with self._lock:
            self.handles[h] = FileHandle(h, Role.RECIPIENT, key, size, self.layout.device_slot(h), text)
        return h

    def file_size(self, h: int) -> int:
        return self._handle(h, FileHandle).size

    def _transfer(self, ctx, user, h, buf, off, n, to_remote: bool) -> int:
        fh = self._handle(h, FileHandle)
        if off < 0 or n < 0:
            raise CapvmError(Err.INVAL)
        m = max(0, min(n, fh.size - off))
        local = _local(user, buf, m, Perm.WRITE if not to_remote else Perm.READ)
        with ctx.lock:
            try:
                ctx.clc(DATA_REG, "ddc", fh.slot)
                remote = ctx.cregs[DATA_REG]
                if not remote.tag:
                    raise CapvmError(Err.REVOKED, fh.path)
                if not m:
                    pass                # clamped to nothing: offset at or past the end
                elif to_remote:
                    self.machine.capcpy(remote, off, local, 0, m)
                else:
                    self.machine.capcpy(local, 0, remote, off, m)
            except CapFault as f:
                raise CapvmError(Err.PERM if f.kind is FaultKind.PERM else Err.FAULT, str(f)) from None
            finally:
                ctx.cregs[DATA_REG] = NULL_CAP
        return m

    def file_read(self, ctx, user, h, dst, off, n) -> int:
        return self._transfer(ctx, user, h, dst, off, n, to_remote=False)

    def file_write(self, ctx, user, h, src, off, n) -> int:
        return self._transfer(ctx, user, h, src, off, n, to_remote=True)

    def file_wait(self, ctx, h, timeout_ms: int = -1) -> int:
        self._handle(h, FileHandle)
        return self._hc(ctx, HC.CF_WAIT, h, timeout_ms)

    def file_notify(self, ctx, h) -> int:
        self._handle(h, FileHandle)
        return self._hc(ctx, HC.CF_NOTIFY, h)

    def _destroy(self, ctx, h, cls) -> None:
        obj = self._handle(h, cls)
        if isinstance(obj, StreamHandle) and obj.channel is not None:
            obj.channel.close()
        obj.closed = True
        self._hc(ctx, HC.CF_REVOKE if obj.role is Role.DONOR else HC.CF_RELEASE, h)
        with self._lock:
            self.handles.pop(h, None)

    def file_destroy(self, ctx, h) -> None:
        self._destroy(ctx, h, FileHandle)

    # CAP_CALL

    def call_make(self, ctx, user, key_addr, key_len, func_id) -> int:
        key = self._key(ctx, user, key_addr, key_len)
        h = self._hc(ctx, HC.CF_ADVERTISE, Kind.CALL, key_addr, key_len, func_id, 0)
        with self._lock:
            self.handles[h] = CallHandle(h, Role.DONOR, key, func_id)
        return h

    def call_get(self, ctx, user, key_addr, key_len) -> int:
        h, _, _, key = self._probe(ctx, user, Kind.CALL, key_addr, key_len)
        with self._lock:
            self.handles[h] = CallHandle(h, Role.RECIPIENT, key)
        return h

    def call(self, ctx, user, h, is_async, arg, size) -> int:
        self._handle(h, CallHandle)
        if size:
            _local(user, arg, size, Perm.READ)
        out = self._out_area(ctx)
        self._hc(ctx, HC.CF_CALL, h, int(bool(is_async)), arg, size, out)
        return struct.unpack("<q", ctx.read(out, 8))[0]

    def call_join(self, ctx, cid, timeout_ms: int = -1) -> int:
        out = self._out_area(ctx)
        self._hc(ctx, HC.CF_JOIN, cid, timeout_ms, out)
        return struct.unpack("<q", ctx.read(out, 8))[0]

    def call_destroy(self, ctx, h) -> None:
        self._destroy(ctx, h, CallHandle)

    # CAP_STREAM

    def stream_make(self, ctx, user, key_addr, key_len, flags: int = 0) -> int:
        key = self._key(ctx, user, key_addr, key_len)
        with self._lock:
            ident = self._next_channel
            self._next_channel += 1
            channel = StreamChannel(ident, blocking=not flags & STREAM_NONBLOCK)
            self.channels[ident] = channel
        try:
            h = self._hc(ctx, HC.CF_ADVERTISE, Kind.STREAM, key_addr, key_len, ident, flags)
        except CapvmError:
            with self._lock:
                self.channels.pop(ident, None)
            raise
        with self._lock:
            self.handles[h] = StreamHandle(h, Role.DONOR, key, channel)
        return h

    def stream_get(self, ctx, user, key_addr, key_len) -> int:
        h, _, _, key = self._probe(ctx, user, Kind.STREAM, key_addr, key_len)
        with self._lock:
            self.handles[h] = StreamHandle(h, Role.RECIPIENT, key)
        return h

    def stream_send(self, ctx, user, h, buf, n) -> int:
        sh = self._handle(h, StreamHandle)
        if sh.role is not Role.RECIPIENT:
            raise CapvmError(Err.INVAL, "send on the receiving end")
        _local(user, buf, n, Perm.READ)
        return self._hc(ctx, HC.CF_STREAM_SEND, h, buf, n)

    def stream_recv(self, ctx, user, h, buf_id, buf, size) -> None:
        sh = self._handle(h, StreamHandle)
        if sh.channel is None:
            raise CapvmError(Err.INVAL, "recv on the sending end")
        if size < 0 or not user.covers(buf, size):
            raise CapvmError(Err.RANGE_NOT_OWNED)
        sh.channel.post(buf_id, cap_derive(user, buf, size, Perm.WRITE))

    def stream_poll(self, ctx, h, limit: int, timeout_ms: int) -> list[tuple[int, int]]:
        sh = self._handle(h, StreamHandle)
        if sh.channel is None:
            raise CapvmError(Err.INVAL, "poll on the sending end")
        return sh.channel.poll(limit, None if timeout_ms < 0 else timeout_ms / 1000)

    def stream_destroy(self, ctx, h) -> None:
        self._destroy(ctx, h, StreamHandle)

    def stream_deliver(self, ctx: CompartmentContext, ident: int, n: int) -> int:
        """Entered from another cVM: copy from the capability in c1 into a posted buffer."""
        with self._lock:
            channel = self.channels.get(ident)
        if channel is None:
            raise CapvmError(Err.REVOKED)
        src = ctx.cregs[1]
        try:
            _, m = channel.deliver(self.machine, src, n)
        except CapFault as f:
            raise CapvmError(Err.FAULT, str(f)) from None
        return m
