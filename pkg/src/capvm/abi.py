"""Numbers and layout shared by the Intravisor and the code inside a cVM."""

from __future__ import annotations

import enum
from dataclasses import dataclass

PAGE = 4096
KiB = 1024
MiB = 1024 * KiB

HOST_TP = 0x7F00_0000_0000

# cVM region layout (offsets from the region base)
AFFIX_OFF = 0
AFFIX_MON_DDC = 0
AFFIX_RET = 16
AFFIX_OCALL = 32
CODE_OFF = PAGE
LIBOS_CODE_SIZE = 1024
PROG_CODE_SIZE = 512
MAX_PROGRAMS = (PAGE - LIBOS_CODE_SIZE) // PROG_CODE_SIZE
LIBOS_OFF = 2 * PAGE
LIBOS_SIZE = 64 * KiB
DEVICE_SLOTS = 64                  # /dev/cf0 .. /dev/cf63, one capability each
PAIR_SLOTS_OFF = DEVICE_SLOTS * 16  # sealed pairs kept by the libOS, 64 bytes per program
LIBOS_SCRATCH_OFF = 2 * PAGE       # within the libOS area
PROG_AFFIX_SIZE = 64               # syscall pair + program-return pair
THREAD_SLOT_SIZE = 32              # per-thread RET pair at the top of each stack
ARG_PAGE = PAGE                    # argument page per in-flight CAP_CALL


class LibosEntry(enum.IntEnum):
    """Fixed code slots of the libOS, 16 bytes apart from CODE_OFF."""
    ENTRY = 0           # ICALL target, dispatches on t0
    OCALL_RET = 1       # resumes after a hostcall
    PROG_RET = 2        # resumes after a program returns to the libOS
    SYSCALL = 8         # SYSCALL + i is the syscall entry of program i


class EntryId(enum.IntEnum):
    """t0 values understood by the libOS entry (the CALL_TABLE index)."""
    INIT = 1
    THREAD = 2
    CALL = 3
    STREAM = 4


class ProgEntryId(enum.IntEnum):
    MAIN = 1
    FUNC = 2


class LibosFn(enum.IntEnum):
    """Thread entry functions the libOS can start via thread_create."""
    RUN_PROGRAM = 1
    PROGRAM_FUNC = 2
    PARK = 3


class HostcallGroup(str, enum.Enum):
    MINIMAL = "minimal"
    DISK = "disk"
    NET = "net"
    COMM = "comm"


class HC(enum.IntEnum):
    # minimal operation
    PRINT = 0
    EXIT = 1
    CLOCK = 2
    SLEEP = 3
    THREAD_CREATE = 4
    THREAD_JOIN = 5
    WAIT = 6
    WAKE = 7
    RAND = 8
    ARGV = 9
    YIELD = 10
    LOG = 11
    # disk image
    DISK_READ = 12
    DISK_WRITE = 13
    DISK_GETSIZE = 14
    # loopback network (two-copy channel)
    NET_READ = 15
    NET_WRITE = 16
    NET_POLL = 17
    # capability-based communication
    CF_ADVERTISE = 18
    CF_PROBE = 19
    CF_REVOKE = 20
    CF_RELEASE = 21
    CF_CALL = 22
    CF_JOIN = 23
    CF_WAIT = 24
    CF_NOTIFY = 25
    CF_STREAM_SEND = 26
    CF_SEAL = 27


def hostcall_group(hc: HC) -> HostcallGroup:
    if hc <= HC.LOG:
        return HostcallGroup.MINIMAL
    if hc <= HC.DISK_GETSIZE:
        return HostcallGroup.DISK
    if hc <= HC.NET_POLL:
        return HostcallGroup.NET
    return HostcallGroup.COMM


class Kind(enum.IntEnum):
    FILE = 1
    CALL = 2
    STREAM = 3


class Sys(enum.IntEnum):
    """Program -> libOS system call numbers."""
    OPEN = 1
    READ = 2
    WRITE = 3
    CLOSE = 4
    LSEEK = 5
    EXIT = 6
    GETARGV = 7
    CLOCK = 8
    SLEEP = 9
    GETPID = 10
    NET_READ = 11
    NET_WRITE = 12
    NET_POLL = 13
    THREAD_CREATE = 14
    THREAD_JOIN = 15
    FILE_MAKE = 20
    FILE_DESTROY = 21
    FILE_GET = 22
    FILE_READ = 23
    FILE_WRITE = 24
    FILE_WAIT = 25
    FILE_NOTIFY = 26
    FILE_SIZE = 27
    CALL_MAKE = 30
    CALL_DESTROY = 31
    CALL_GET = 32
    CALL = 33
    CALL_JOIN = 34
    STREAM_MAKE = 40
    STREAM_DESTROY = 41
    STREAM_GET = 42
    STREAM_SEND = 43
    STREAM_RECV = 44
    STREAM_POLL = 45


STREAM_NONBLOCK = 1


@dataclass(frozen=True)
class CvmLayout:
    """Absolute addresses of every area in one cVM region."""

    base: int
    heap_size: int
    nprogs: int
    stack_count: int
    stack_size: int

    @property
    def affix(self) -> int:
        return self.base + AFFIX_OFF

    @property
    def code(self) -> int:
        return self.base + CODE_OFF

    def libos_entry(self, slot: int) -> int:
        return self.code + 16 * slot

    def prog_code(self, i: int) -> int:
        return self.code + LIBOS_CODE_SIZE + PROG_CODE_SIZE * i

    @property
    def libos(self) -> int:
        return self.base + LIBOS_OFF

    def device_slot(self, n: int) -> int:
        return self.libos + 16 * n

    def pair_slots(self, i: int) -> int:
        return self.libos + PAIR_SLOTS_OFF + 64 * i

    @property
    def libos_scratch(self) -> int:
        return self.libos + LIBOS_SCRATCH_OFF

    @property
    def prog_area(self) -> int:
        return self.libos + LIBOS_SIZE

    @property
    def prog_size(self) -> int:
        return (self.heap_size // self.nprogs) // PAGE * PAGE

    def prog_region(self, i: int) -> tuple[int, int]:
        return self.prog_area + i * self.prog_size, self.prog_size

    @property
    def stacks(self) -> int:
        return self.prog_area + _round_up(self.heap_size, PAGE)

    def stack(self, i: int) -> tuple[int, int]:
        return self.stacks + i * self.stack_size, self.stack_size

    @property
    def arena(self) -> int:
        return self.stacks + self.stack_count * self.stack_size

    def arg_page(self, i: int) -> int:
        return self.arena + i * ARG_PAGE

    @property
    def length(self) -> int:
        return self.arena + self.stack_count * ARG_PAGE - self.base


def _round_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


def round_up(n: int, align: int = PAGE) -> int:
    return _round_up(n, align)
