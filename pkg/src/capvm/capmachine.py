"""Software capability machine: tagged memory, capability registers and the
capability instructions (derive, seal, load/store, cinvoke, capcpy).

Capabilities are kept uncompressed. A capability written to memory occupies
one 16-byte granule: the payload bytes carry cursor/base/length and the
remaining metadata lives beside the tag, so byte writes can never recreate a
tagged value.
"""

from __future__ import annotations

import dataclasses
import enum
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Union

GRANULE = 16
OTYPE_LIMIT = 1 << 24
CT6 = 31
NUM_CREGS = 32
IREG_NAMES = ("a0", "a1", "a2", "a3", "a4", "a5", "t0", "tp")

_CAP_LAYOUT = struct.Struct("<QII")


class Perm(enum.Flag):
    NONE = 0
    READ = enum.auto()
    WRITE = enum.auto()
    EXEC = enum.auto()
    LOAD_CAP = enum.auto()
    STORE_CAP = enum.auto()  # also called CAP_STORE / PERMIT_STORE_CAP
    SEAL = enum.auto()
    UNSEAL = enum.auto()


ALL_PERMS = (Perm.READ | Perm.WRITE | Perm.EXEC | Perm.LOAD_CAP
             | Perm.STORE_CAP | Perm.SEAL | Perm.UNSEAL)


class FaultKind(enum.Enum):
    TAG = "TAG"
    BOUNDS = "BOUNDS"
    PERM = "PERM"
    SEAL_MISMATCH = "SEAL_MISMATCH"
    SEALED_IMMUTABLE = "SEALED_IMMUTABLE"
    MONOTONICITY = "MONOTONICITY"
    ALIGNMENT = "ALIGNMENT"


class MachineError(Exception):
    """Misuse of the machine by trusted code (not a guest fault)."""


class CapFault(Exception):
    """A capability check failed; the faulting operation had no effect."""

    def __init__(self, kind: FaultKind, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)


@dataclass(frozen=True, slots=True)
class Capability:
    tag: bool
    base: int
    length: int
    cursor: int
    perms: Perm
    otype: int | None = None

    @property
    def top(self) -> int:
        return self.base + self.length

    @property
    def sealed(self) -> bool:
        return self.otype is not None

    @property
    def offset(self) -> int:
        return self.cursor - self.base

    def covers(self, addr: int, n: int) -> bool:
        return n >= 0 and self.base <= addr and addr + n <= self.top

    def __str__(self) -> str:
        seal = f" otype={self.otype}" if self.sealed else ""
        return (f"cap(tag={int(self.tag)} [{self.base:#x},{self.top:#x}) "
                f"cur={self.cursor:#x} perms={_perm_str(self.perms)}{seal})")


def _perm_str(p: Perm) -> str:
    letters = [("R", Perm.READ), ("W", Perm.WRITE), ("X", Perm.EXEC),
               ("Lc", Perm.LOAD_CAP), ("Sc", Perm.STORE_CAP),
               ("S", Perm.SEAL), ("U", Perm.UNSEAL)]
    return "".join(s for s, f in letters if f in p) or "-"


NULL_CAP = Capability(False, 0, 0, 0, Perm.NONE)


def _live(c: Capability, what: str = "capability") -> None:
    if not c.tag:
        raise CapFault(FaultKind.TAG, f"{what} is untagged")


def _mutable(c: Capability) -> None:
    _live(c)
    if c.sealed:
        raise CapFault(FaultKind.SEALED_IMMUTABLE, f"otype {c.otype}")


def cap_set_bounds(c: Capability, new_base: int, new_len: int) -> Capability:
    _mutable(c)
    if new_len < 0 or new_base < c.base or new_base + new_len > c.top:
        raise CapFault(
            FaultKind.MONOTONICITY,
            f"[{new_base:#x},+{new_len:#x}) not within [{c.base:#x},{c.top:#x})")
    cursor = c.cursor if new_base <= c.cursor <= new_base + new_len else new_base
    return dataclasses.replace(c, base=new_base, length=new_len, cursor=cursor)


def cap_and_perms(c: Capability, mask: Perm) -> Capability:
    _mutable(c)
    return dataclasses.replace(c, perms=c.perms & mask)


def cap_inc_offset(c: Capability, delta: int) -> Capability:
    _mutable(c)
    return dataclasses.replace(c, cursor=c.cursor + delta)


def cap_set_cursor(c: Capability, addr: int) -> Capability:
    _mutable(c)
    return dataclasses.replace(c, cursor=addr)


def cap_derive(c: Capability, addr: int, n: int, perms: Perm) -> Capability:
    """Bounds ``[addr, addr+n)``, cursor at ``addr``, perms reduced to ``perms``."""
    return cap_and_perms(cap_set_cursor(cap_set_bounds(c, addr, n), addr), perms)


def cap_seal(c: Capability, sealer: Capability, otype: int) -> Capability:
    _mutable(c)
    _live(sealer, "sealer")
    if sealer.sealed:
        raise CapFault(FaultKind.SEALED_IMMUTABLE, "sealer is sealed")
    if Perm.SEAL not in sealer.perms:
        raise CapFault(FaultKind.PERM, "sealer lacks SEAL")
    if not (sealer.base <= otype < sealer.top) or not 0 <= otype < OTYPE_LIMIT:
        raise CapFault(FaultKind.BOUNDS, f"otype {otype} outside sealer range")
    return dataclasses.replace(c, otype=otype)


def cap_unseal(c: Capability, unsealer: Capability) -> Capability:
    _live(c)
    _live(unsealer, "unsealer")
    if not c.sealed:
        raise CapFault(FaultKind.SEAL_MISMATCH, "capability is not sealed")
    if unsealer.sealed:
        raise CapFault(FaultKind.SEALED_IMMUTABLE, "unsealer is sealed")
    if Perm.UNSEAL not in unsealer.perms:
        raise CapFault(FaultKind.PERM, "unsealer lacks UNSEAL")
    if not unsealer.base <= c.otype < unsealer.top:
        raise CapFault(FaultKind.SEAL_MISMATCH, f"otype {c.otype} outside unsealer range")
    return dataclasses.replace(c, otype=None)


class TaggedMemory:
    """Flat byte store with one validity tag per 16-byte granule."""

    def __init__(self, size: int):
        if size <= 0 or size % GRANULE or size > 1 << 32:
            raise MachineError(f"bad address-space size {size}")
        self.size = size
        self.data = bytearray(size)
        self.view = memoryview(self.data)
        self.tags = bytearray(size // GRANULE)
        self._caps: dict[int, Capability] = {}
        self.copy_counter = 0
        self._lock = threading.Lock()

    def _clear_tags(self, addr: int, n: int) -> None:
        if n <= 0:
            return
        g0, g1 = addr // GRANULE, (addr + n - 1) // GRANULE + 1
        if self.tags.find(1, g0, g1) == -1:
            return
        self.tags[g0:g1] = bytes(g1 - g0)
        for g in [g for g in self._caps if g0 <= g < g1]:
            del self._caps[g]

    def read(self, addr: int, n: int) -> bytes:
        return bytes(self.view[addr:addr + n])

    def write(self, addr: int, data: bytes) -> None:
        with self._lock:
            self._clear_tags(addr, len(data))
            self.view[addr:addr + len(data)] = data

    def copy(self, dst: int, src: int, n: int) -> None:
        with self._lock:
            self._clear_tags(dst, n)
            self.view[dst:dst + n] = self.view[src:src + n]
            self.copy_counter += n

    def tag_at(self, addr: int) -> bool:
        return bool(self.tags[addr // GRANULE])

    def read_cap(self, addr: int) -> Capability:
        with self._lock:
            g = addr // GRANULE
            if self.tags[g]:
                return self._caps[g]
            cursor, base, length = _CAP_LAYOUT.unpack_from(self.data, addr)
        return Capability(False, base, length, cursor, Perm.NONE)

    def write_cap(self, addr: int, c: Capability) -> None:
        payload = _CAP_LAYOUT.pack(c.cursor & (2**64 - 1), c.base & 0xFFFFFFFF,
                                   c.length & 0xFFFFFFFF)
        g = addr // GRANULE
        with self._lock:
            self.view[addr:addr + GRANULE] = payload
            if c.tag:
                self.tags[g] = 1
                self._caps[g] = c
            else:
                self.tags[g] = 0
                self._caps.pop(g, None)


Auth = Union[str, int, Capability]
CodeHandler = Callable[["CompartmentContext"], object]


class CapMachine:
    """The instruction-level API every compartment goes through."""

    def __init__(self, size: int = 64 << 20):
        self.size = size
        self.memory = TaggedMemory(size)
        self._root_issued = False
        self._code: dict[int, CodeHandler] = {}
        self._retired: set[int] = set()
        self._stats_lock = threading.Lock()
        self.cinvoke_count = 0

    @property
    def copy_counter(self) -> int:
        return self.memory.copy_counter

    def root_capability(self) -> Capability:
        if self._root_issued:
            raise MachineError("root capability already issued")
        self._root_issued = True
        return Capability(True, 0, self.size, 0, ALL_PERMS)

    def register_code(self, addr: int, handler: CodeHandler) -> None:
        """Place host-implemented guest code at ``addr``."""
        self._code[addr] = handler

    def retire_otype(self, otype: int) -> None:
        """Make every sealed pair of ``otype`` unusable by cinvoke."""
        self._retired.add(otype)

    def otype_retired(self, otype: int) -> bool:
        return otype in self._retired

    @staticmethod
    def resolve(ctx: "CompartmentContext | None", auth: Auth) -> Capability:
        if isinstance(auth, Capability):
            return auth
        if ctx is None:
            raise MachineError(f"register operand {auth!r} needs a context")
        if auth == "ddc":
            return ctx.ddc
        if auth == "pcc":
            return ctx.pcc
        return ctx.cregs[auth]

    @staticmethod
    def _authorize(c: Capability, addr: int, n: int, perm: Perm) -> None:
        _live(c, "authorizing capability")
        if c.sealed:
            raise CapFault(FaultKind.SEALED_IMMUTABLE, "sealed capability used for access")
        if perm not in c.perms:
            raise CapFault(FaultKind.PERM, f"missing {perm}")
        if not c.covers(addr, n):
            raise CapFault(FaultKind.BOUNDS,
                           f"[{addr:#x},+{n}) outside [{c.base:#x},{c.top:#x})")

    def load_bytes(self, ctx, auth: Auth, offset: int, n: int) -> bytes:
        c = self.resolve(ctx, auth)
        addr = c.cursor + offset
        self._authorize(c, addr, n, Perm.READ)
        return self.memory.read(addr, n)

    def store_bytes(self, ctx, auth: Auth, offset: int, data: bytes) -> None:
        c = self.resolve(ctx, auth)
        addr = c.cursor + offset
        self._authorize(c, addr, len(data), Perm.WRITE)
        self.memory.write(addr, data)

    def load_cap(self, ctx, auth: Auth, addr: int) -> Capability:
        c = self.resolve(ctx, auth)
        if addr % GRANULE:
            raise CapFault(FaultKind.ALIGNMENT, f"{addr:#x}")
        self._authorize(c, addr, GRANULE, Perm.READ | Perm.LOAD_CAP)
        return self.memory.read_cap(addr)

    def store_cap(self, ctx, auth: Auth, addr: int, value: Capability) -> None:
        c = self.resolve(ctx, auth)
        if addr % GRANULE:
            raise CapFault(FaultKind.ALIGNMENT, f"{addr:#x}")
        self._authorize(c, addr, GRANULE, Perm.WRITE | Perm.STORE_CAP)
        self.memory.write_cap(addr, value)

    def check_invoke(self, code: Capability, data: Capability) -> None:
        """Raise the fault cinvoke would raise for this pair, if any."""
        _live(code, "code capability")
        _live(data, "data capability")
        if not (code.sealed and data.sealed):
            raise CapFault(FaultKind.SEAL_MISMATCH, "cinvoke needs two sealed capabilities")
        if code.otype != data.otype:
            raise CapFault(FaultKind.SEAL_MISMATCH, f"otype {code.otype} != {data.otype}")
        if code.otype in self._retired:
            raise CapFault(FaultKind.SEAL_MISMATCH, f"otype {code.otype} retired")
        if Perm.EXEC not in code.perms:
            raise CapFault(FaultKind.PERM, "code capability lacks EXEC")
        if not code.covers(code.cursor, 4):
            raise CapFault(FaultKind.BOUNDS, f"entry {code.cursor:#x} outside code bounds")
        if code.cursor not in self._code:
            raise CapFault(FaultKind.PERM, f"no code at {code.cursor:#x}")

    def cinvoke(self, ctx: "CompartmentContext", code: Auth, data: Auth):
        """Domain transition: pcc and ct6 get the unsealed pair, then the
        code at the entry runs on ``ctx``. Returns whatever that code returns."""
        code_cap = self.resolve(ctx, code)
        data_cap = self.resolve(ctx, data)
        self.check_invoke(code_cap, data_cap)
        handler = self._code[code_cap.cursor]
        ctx.pcc = dataclasses.replace(code_cap, otype=None)
        ctx.cregs[CT6] = dataclasses.replace(data_cap, otype=None)
        with self._stats_lock:
            self.cinvoke_count += 1
        return handler(ctx)

    def capcpy(self, dst: Capability, dst_off: int, src: Capability,
               src_off: int, n: int) -> int:
        """Single-pass copy between two capability-authorized ranges."""
        if n < 0:
            raise CapFault(FaultKind.BOUNDS, f"negative length {n}")
        d, s = dst.cursor + dst_off, src.cursor + src_off
        self._authorize(src, s, n, Perm.READ)
        self._authorize(dst, d, n, Perm.WRITE)
        if n:
            self.memory.copy(d, s, n)
        return n


class CompartmentContext:
    """Register file of one execution context.

    Guest code touches memory only through these methods, so every access is
    checked against ``ddc``, ``pcc`` or a named capability register.
    """

    def __init__(self, machine: CapMachine, owner, pcc: Capability = NULL_CAP,
                 ddc: Capability = NULL_CAP):
        self.machine = machine
        self.owner = owner
        self.pcc = pcc
        self.ddc = ddc
        self.cregs: list[Capability] = [NULL_CAP] * NUM_CREGS
        self.iregs: dict[str, int] = dict.fromkeys(IREG_NAMES, 0)
        # held across a device data-path step; revocation takes it to scrub
        self.lock = threading.RLock()

    @property
    def ct6(self) -> Capability:
        return self.cregs[CT6]

    def set_ireg(self, name: str, value) -> None:
        # integer registers never carry capabilities
        if isinstance(value, Capability):
            value = value.cursor
        self.iregs[name] = int(value)

    def set_args(self, *args) -> None:
        for i, v in enumerate(args):
            self.set_ireg(f"a{i}", v)

    def scrub(self, keep: tuple[int, ...] = ()) -> None:
        for r in range(1, CT6):
            if r not in keep:
                self.cregs[r] = NULL_CAP

    def _put(self, dst: int, value: Capability) -> None:
        if not 1 <= dst < CT6:
            raise CapFault(FaultKind.PERM, f"c{dst} is not writable")
        self.cregs[dst] = value

    def _get(self, src: Auth) -> Capability:
        return self.machine.resolve(self, src)

    # absolute-address (hybrid) accesses through ddc
    def read(self, addr: int, n: int) -> bytes:
        return self.machine.load_bytes(self, "ddc", addr - self.ddc.cursor, n)

    def write(self, addr: int, data: bytes) -> None:
        self.machine.store_bytes(self, "ddc", addr - self.ddc.cursor, data)

    def set_ddc(self, src: Auth) -> None:
        self.ddc = self._get(src)

    # capability instructions
    def cmove(self, dst: int, src: Auth) -> None:
        self._put(dst, self._get(src))

    def csetbounds(self, dst: int, src: Auth, base: int, length: int) -> None:
        self._put(dst, cap_set_bounds(self._get(src), base, length))

    def candperm(self, dst: int, src: Auth, mask: Perm) -> None:
        self._put(dst, cap_and_perms(self._get(src), mask))

    def cincoffset(self, dst: int, src: Auth, delta: int) -> None:
        self._put(dst, cap_inc_offset(self._get(src), delta))

    def cseal(self, dst: int, src: Auth, sealer: Auth, otype: int) -> None:
        self._put(dst, cap_seal(self._get(src), self._get(sealer), otype))

    def cunseal(self, dst: int, src: Auth, unsealer: Auth) -> None:
        self._put(dst, cap_unseal(self._get(src), self._get(unsealer)))

    def clc(self, dst: int, auth: Auth, addr: int) -> None:
        self._put(dst, self.machine.load_cap(self, auth, addr))

    def csc(self, src: Auth, auth: Auth, addr: int) -> None:
        self.machine.store_cap(self, auth, addr, self._get(src))

    def cload(self, auth: Auth, offset: int, n: int) -> bytes:
        return self.machine.load_bytes(self, auth, offset, n)

    def cstore(self, auth: Auth, offset: int, data: bytes) -> None:
        self.machine.store_bytes(self, auth, offset, data)

    def cinvoke(self, code: Auth, data: Auth):
        return self.machine.cinvoke(self, code, data)
