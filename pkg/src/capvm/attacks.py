"""Escape attempts by a hostile cVM against a victim cVM.

The attacker runs as a raw program, so it holds everything its own cVM
holds (a compromised libOS). Each behavior runs on its own guest thread: a
capability fault kills only that thread, an error code is returned as a
negative number, and a behavior that completes is an escape.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Callable

from capvm.abi import AFFIX_MON_DDC, AFFIX_OCALL, CODE_OFF, HC, LIBOS_CODE_SIZE, LIBOS_OFF, PROG_CODE_SIZE
from capvm.capmachine import CapFault, FaultKind
from capvm.config import AclEntry, DeploymentConfig
from capvm.errors import CapvmError, Err, check
from capvm.guestkit import GuestProgram, ProgramAPI

ESCAPED = 1
R1, R2 = 5, 6      # scratch capability registers


def _target(api: ProgramAPI, arg: int) -> tuple[int, int]:
    return struct.unpack("<QQ", api.read(arg, 16))


def _cvm_base(api: ProgramAPI) -> int:
    return api.ctx.ddc.base


def raw_hostcall(api: ProgramAPI, hc: int, *args) -> int:
    """The OCALL sequence done by hand, bypassing the libOS."""
    ctx = api.ctx
    tp = ctx.iregs["tp"]
    base = _cvm_base(api)
    ctx.clc(1, "ddc", tp)
    ctx.clc(2, "ddc", tp + 16)
    ctx.clc(3, "ddc", base + AFFIX_OCALL)
    ctx.clc(4, "ddc", base + AFFIX_MON_DDC)
    ctx.set_ireg("t0", hc)
    ctx.set_args(*args)
    ctx.cinvoke(3, 4)
    return ctx.iregs["a0"]


def _grant_slot(api: ProgramAPI, key: str) -> int:
    h = api.file_get(key)
    return _cvm_base(api) + LIBOS_OFF + 16 * h


def oob_load(api, vbase, vlen):
    api.read(vbase + 64, 16)


def oob_store(api, vbase, vlen):
    api.write(vbase + 64, b"\xff" * 16)


def forge_capability(api, vbase, vlen):
    # bytes shaped like a capability never carry a tag
    buf = api.alloc(16)
    api.write(buf, struct.pack("<QII", vbase, vbase, vlen))
    api.ctx.clc(R1, "ddc", buf)
    api.ctx.cload(R1, 0, 16)


def store_granted_cap(api, vbase, vlen):
    slot = _grant_slot(api, "victim.public")
    api.ctx.clc(R1, "ddc", slot)
    api.ctx.csc(R1, "ddc", api.alloc(16))


def write_readonly_grant(api, vbase, vlen):
    api.ctx.clc(R1, "ddc", _grant_slot(api, "victim.public"))
    api.ctx.cstore(R1, 0, b"owned")


def overread_grant(api, vbase, vlen):
    api.ctx.clc(R1, "ddc", _grant_slot(api, "victim.public"))
    api.ctx.cload(R1, 64, 16)


def widen_grant(api, vbase, vlen):
    ctx = api.ctx
    ctx.clc(R1, "ddc", _grant_slot(api, "victim.public"))
    cap = ctx.cregs[R1]
    ctx.csetbounds(R2, R1, cap.base - 4096, cap.length + 8192)


def widen_ddc(api, vbase, vlen):
    api.ctx.csetbounds(R1, "ddc", vbase, vlen)


def mismatched_otypes(api, vbase, vlen):
    ctx = api.ctx
    ctx.clc(R1, "ddc", ctx.iregs["tp"])
    ctx.clc(R2, "ddc", _cvm_base(api) + AFFIX_MON_DDC)
    ctx.cinvoke(R1, R2)


def data_as_code(api, vbase, vlen):
    ctx = api.ctx
    ctx.clc(R1, "ddc", ctx.iregs["tp"] + 16)
    ctx.cinvoke(R1, R1)


def forged_ocall_target(api, vbase, vlen):
    ctx = api.ctx
    ctx.clc(R2, "ddc", _cvm_base(api) + AFFIX_MON_DDC)
    ctx.cinvoke("ddc", R2)


def unseal_affix(api, vbase, vlen):
    ctx = api.ctx
    ctx.clc(R1, "ddc", _cvm_base(api) + AFFIX_MON_DDC)
    ctx.cunseal(R2, R1, "ddc")


def _ret_helper(api, shared, _):
    api.write(shared, struct.pack("<q", api.ctx.iregs["tp"]))
    while api.read(shared + 8, 1) == b"\0":
        time.sleep(0.0005)
    raw_hostcall(api, HC.CLOCK)        # consumes and replaces this thread's RET pair
    api.write(shared + 16, b"\1")
    return 0


def stale_ret_replay(api, vbase, vlen):
    # a sibling's RET pair, taken before it made a hostcall, used after
    ctx = api.ctx
    shared = api.alloc(32)
    api.write(shared, bytes(32))
    api.spawn("_ret_helper", shared)
    while (tp := struct.unpack("<q", api.read(shared, 8))[0]) == 0:
        time.sleep(0.0005)
    ctx.clc(R1, "ddc", tp)
    ctx.clc(R2, "ddc", tp + 16)
    api.write(shared + 8, b"\1")
    while api.read(shared + 16, 1) == b"\0":
        time.sleep(0.0005)
    ctx.cinvoke(R1, R2)


def bad_hostcall(api, vbase, vlen):
    check(raw_hostcall(api, 999))


def confused_deputy(api, vbase, vlen):
    check(raw_hostcall(api, HC.PRINT, vbase, 64))


def cap_as_int_arg(api, vbase, vlen):
    # a readable grant passed as an argument arrives as its address only
    ctx = api.ctx
    ctx.clc(R1, "ddc", _grant_slot(api, "victim.public"))
    check(raw_hostcall(api, HC.PRINT, ctx.cregs[R1], 64))


def seal_foreign_range(api, vbase, vlen):
    base = _cvm_base(api)
    code = base + CODE_OFF + LIBOS_CODE_SIZE
    check(raw_hostcall(api, HC.CF_SEAL, code, code, PROG_CODE_SIZE, vbase, vlen, api.alloc(32)))


def probe_without_acl(api, vbase, vlen):
    api.file_get("victim.secret")


def revoke_foreign(api, vbase, vlen):
    h = api.file_get("victim.public")
    check(raw_hostcall(api, HC.CF_REVOKE, h))


@dataclass(frozen=True)
class Attack:
    name: str
    fn: Callable
    expected: FaultKind | Err


ATTACKS: list[Attack] = [
    Attack("oob_load", oob_load, FaultKind.BOUNDS),
    Attack("oob_store", oob_store, FaultKind.BOUNDS),
    Attack("forge_capability", forge_capability, FaultKind.TAG),
    Attack("store_granted_cap", store_granted_cap, FaultKind.PERM),
    Attack("write_readonly_grant", write_readonly_grant, FaultKind.PERM),
    Attack("overread_grant", overread_grant, FaultKind.BOUNDS),
    Attack("widen_grant", widen_grant, FaultKind.MONOTONICITY),
    Attack("widen_ddc", widen_ddc, FaultKind.MONOTONICITY),
    Attack("mismatched_otypes", mismatched_otypes, FaultKind.SEAL_MISMATCH),
    Attack("data_as_code", data_as_code, FaultKind.PERM),
    Attack("forged_ocall_target", forged_ocall_target, FaultKind.SEAL_MISMATCH),
    Attack("unseal_affix", unseal_affix, FaultKind.PERM),
    Attack("stale_ret_replay", stale_ret_replay, FaultKind.SEAL_MISMATCH),
    Attack("bad_hostcall", bad_hostcall, Err.BAD_HOSTCALL),
    Attack("confused_deputy", confused_deputy, Err.BOUNDS),
    Attack("cap_as_int_arg", cap_as_int_arg, Err.BOUNDS),
    Attack("seal_foreign_range", seal_foreign_range, Err.BOUNDS),
    Attack("probe_without_acl", probe_without_acl, Err.ACCESS_DENIED),
    Attack("revoke_foreign", revoke_foreign, Err.NOT_OWNER),
]


def _behavior(fn: Callable) -> Callable:
    def run(api: ProgramAPI, arg: int, _: int) -> int:
        vbase, vlen = _target(api, arg)
        try:
            fn(api, vbase, vlen)
        except CapvmError as e:
            return -e.code
        return ESCAPED
    return run


def attacker_main(api: ProgramAPI, argv: list[str]) -> int:
    vbase, vlen = int(argv[0], 0), int(argv[1], 0)
    target = api.alloc(16)
    api.write(target, struct.pack("<QQ", vbase, vlen))
    only = set(argv[2:])
    lines = []
    for a in ATTACKS:
        if only and a.name not in only:
            continue
        tid = api.spawn(a.name, target)
        lines.append(f"attack {a.name} {tid} {api.join(tid)}\n")
    api.print("".join(lines))
    return 0


ATTACKER = GuestProgram(
    "attacker", attacker_main,
    {**{a.name: _behavior(a.fn) for a in ATTACKS}, "_ret_helper": _ret_helper},
    raw=True,
)


@dataclass
class AttackResult:
    name: str
    expected: FaultKind | Err
    observed: FaultKind | Err | None    # None: the behavior completed

    @property
    def escaped(self) -> bool:
        return self.observed is None

    @property
    def ok(self) -> bool:
        return self.observed == self.expected

    def __str__(self) -> str:
        seen = "ESCAPED" if self.observed is None else self.observed.name
        return f"{self.name:22} expected {self.expected.name:15} observed {seen}"


@dataclass
class SuiteReport:
    results: list[AttackResult]
    victim_intact: bool

    @property
    def escapes(self) -> int:
        return sum(r.escaped for r in self.results)

    @property
    def passed(self) -> bool:
        return self.victim_intact and all(r.ok for r in self.results)


def _snapshot(iv, cvm) -> tuple[bytes, bytes, dict]:
    mem = iv.machine.memory
    base, length = cvm.region
    g0, g1 = base // 16, (base + length) // 16
    caps = {g: c for g, c in mem._caps.items() if g0 <= g < g1 and mem.tags[g]}
    return mem.read(base, length), bytes(mem.tags[g0:g1]), caps


def attacker_suite(only: list[str] | None = None, timeout: float = 60.0) -> SuiteReport:
    """Boot a victim and an attacker cVM, run every behavior, diff the victim."""
    from capvm.intravisor import Intravisor

    iv = Intravisor(console=lambda name, text: None)
    try:
        victim = iv.cvm_make(DeploymentConfig(
            "victim", 256 * 1024, program="victim",
            allowed_keys=[AclEntry("victim.public", "r", "attacker")]))
        if not iv.wait(victim, timeout) or victim.faults:
            raise CapvmError(Err.FAULT, f"victim failed to start: {victim.faults}")
        before = _snapshot(iv, victim)
        vbase, vlen = victim.region
        attacker = iv.cvm_make(DeploymentConfig(
            "attacker", 256 * 1024, stack_count=4, program="attacker",
            args=[hex(vbase), hex(vlen), *(only or [])]))
        if not iv.wait(attacker, timeout):
            raise CapvmError(Err.TIMEOUT, "attacker did not finish")
        intact = _snapshot(iv, victim) == before
        expected = {a.name: a.expected for a in ATTACKS}
        results = []
        for line in attacker.output().splitlines():
            _, name, tid, ret = line.split()
            ret = int(ret)
            if ret == -Err.CALLEE_FAULT:
                fault = iv.thread(int(tid)).fault
                observed = fault.kind if isinstance(fault, CapFault) else Err(fault.code)
            elif ret < 0:
                observed = Err(-ret)
            else:
                observed = None
            results.append(AttackResult(name, expected[name], observed))
        return SuiteReport(results, intact)
    finally:
        iv.shutdown()
