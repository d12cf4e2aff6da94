"""Classical two-copy IPC channel (sender -> staging -> receiver).

Used for the loopback network hostcalls and as the benchmark baseline. The
staging ring belongs to the Intravisor; every transferred byte crosses it
once on the way in and once on the way out.
"""

from __future__ import annotations

import threading
import time

from capvm.capmachine import CapMachine, Capability


class PipeChannel:
    def __init__(self, machine: CapMachine, staging: Capability):
        self.machine = machine
        self.staging = staging
        self.capacity = staging.length
        self._head = 0
        self._count = 0
        self._cond = threading.Condition()
        self.closed = False

    def available(self, timeout: float | None = 0) -> int:
        """Bytes buffered, waiting up to ``timeout`` seconds for some to arrive."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._count == 0 and not self.closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    break
                self._cond.wait(remaining)
            return self._count

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def write(self, src: Capability, n: int, block: bool = True) -> int:
        """Copy up to ``n`` bytes from ``src`` into the ring."""
        with self._cond:
            while self._count == self.capacity and not self.closed:
                if not block:
                    return 0
                self._cond.wait()
            if self.closed:
                return -1
            m = min(n, self.capacity - self._count)
            tail = (self._head + self._count) % self.capacity
            first = min(m, self.capacity - tail)
            self.machine.capcpy(self.staging, tail, src, 0, first)
            if m > first:
                self.machine.capcpy(self.staging, 0, src, first, m - first)
            self._count += m
            self._cond.notify_all()
            return m

    def read(self, dst: Capability, n: int, timeout: float | None = None) -> int:
        """Copy up to ``n`` bytes out of the ring; 0 on timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._count == 0 and not self.closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return 0
                self._cond.wait(remaining)
            if self._count == 0:
                return -1
            m = min(n, self._count)
            first = min(m, self.capacity - self._head)
            self.machine.capcpy(dst, 0, self.staging, self._head, first)
            if m > first:
                self.machine.capcpy(dst, first, self.staging, 0, m - first)
            self._head = (self._head + m) % self.capacity
            self._count -= m
            self._cond.notify_all()
            return m
