"""Error codes shared by the Intravisor, the shim libOS and the guest ABI.

Guest-visible calls return ``-code`` in ``a0`` on failure; host-side Python
APIs raise :class:`CapvmError` carrying the same code.
"""

from __future__ import annotations

import enum


class Err(enum.IntEnum):
    OK = 0
    BAD_HOSTCALL = 1
    NO_SUCH_KEY = 2
    ACCESS_DENIED = 3
    REVOKED = 4
    DUPLICATE_KEY = 5
    RANGE_NOT_OWNED = 6
    NOT_OWNER = 7
    STACK_POOL_EXHAUSTED = 8
    OUT_OF_SPACE = 9
    UNKNOWN_PROGRAM = 10
    CONFIG_INVALID = 11
    NO_SUCH_HANDLE = 12
    BOUNDS = 13
    PERM = 14
    TIMEOUT = 15
    WOULD_BLOCK = 16
    DUPLICATE_ID = 17
    CALLEE_FAULT = 18
    UNKNOWN_FUNC = 19
    ENOSYS = 20
    BADF = 21
    SIZE_TOO_LARGE = 22
    INVAL = 23
    FAULT = 24


class CapvmError(Exception):
    """A failed Intravisor, libOS or device operation."""

    def __init__(self, code: Err, detail: str = ""):
        self.code = Err(code)
        self.detail = detail
        super().__init__(f"{self.code.name}: {detail}" if detail else self.code.name)


def check(ret: int) -> int:
    """Turn a raw ABI return value into a Python result or raise."""
    if ret < 0:
        try:
            code = Err(-ret)
        except ValueError:
            code = Err.INVAL
        raise CapvmError(code)
    return ret
