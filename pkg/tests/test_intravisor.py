import threading

import pytest
from hypothesis import given, settings, strategies as st

from capvm.abi import AFFIX_MON_DDC, AFFIX_OCALL, AFFIX_RET, HC, HOST_TP, HostcallGroup, Kind, LibosFn
from capvm.attacks import raw_hostcall
from capvm.capmachine import CT6, CapFault, FaultKind, Perm, cap_derive, cap_inc_offset
from capvm.config import AclEntry, DeploymentConfig
from capvm.errors import CapvmError, Err
from capvm.intravisor import GRANT_FORBIDDEN, CvmState, Hostcall, Intravisor, granted_caps_ok
from conftest import Host

RW = Perm.READ | Perm.WRITE


def err(code):
    return pytest.raises(CapvmError, match=f"^{code.name}")


def overlap(a, b):
    return a[0] < b[0] + b[1] and b[0] < a[0] + a[1]


class TestLifecycle:
    def test_hello(self, host):
        cvm = host.finish(host.boot("h", "hello", heap=1 << 20, stack_count=4, stack_size=64 << 10))
        assert cvm.output() == "hello, world\n"
        assert cvm.state is CvmState.TERMINATED
        assert cvm.exit_code == 0

    def test_args_reach_main(self, host):
        cvm = host.finish(host.boot("h", "hello", args=["there", "you"]))
        assert cvm.output() == "hello, there you\n"

    def test_same_config_twice_gives_disjoint_regions(self, host):
        cfg = DeploymentConfig("twin", 256 << 10, program="hello")
        a = host.iv.cvm_make(cfg)
        b = host.iv.cvm_make(cfg)
        assert a.id != b.id
        assert not overlap(a.region, b.region)

    def test_unknown_program(self, iv):
        with err(Err.UNKNOWN_PROGRAM):
            iv.cvm_make(DeploymentConfig("x", 1 << 20, program="nonexistent"))

    def test_invalid_configs(self, iv):
        with err(Err.CONFIG_INVALID):
            iv.cvm_make(DeploymentConfig("x", 1 << 20, stack_count=0))
        with err(Err.CONFIG_INVALID):
            iv.cvm_make(DeploymentConfig("x", 4096, program="iso_a,iso_b"))
        with err(Err.CONFIG_INVALID):
            iv.cvm_make(DeploymentConfig("x", 1 << 20, disk_image="/nonexistent/disk.img"))

    def test_out_of_space(self):
        iv = Intravisor(1 << 20, console=lambda *a: None)
        with err(Err.OUT_OF_SPACE):
            iv.cvm_make(DeploymentConfig("big", 4 << 20))

    def test_default_capabilities(self, host):
        cvm = host.boot("h", "hello", start=False)
        base, length = cvm.region
        for cap in (cvm.ddc, cvm.pcc):
            assert (cap.base, cap.length, cap.tag) == (base, length, True)
            assert not cap.perms & GRANT_FORBIDDEN
        assert cvm.ddc.perms == Perm.READ | Perm.WRITE | Perm.LOAD_CAP
        assert Perm.EXEC in cvm.pcc.perms and Perm.WRITE not in cvm.pcc.perms
        assert cvm.state is CvmState.CREATED

    def test_stack_pool_inside_region(self, host):
        cvm = host.boot("h", "hello", start=False, stack_count=3, stack_size=8192)
        base, length = cvm.region
        pool = cvm.stack_pool
        assert len(pool) == 3
        for s in pool:
            assert s[1] == 8192 and base <= s[0] and s[0] + s[1] <= base + length
        assert all(not overlap(a, b) for a, b in zip(pool, pool[1:]))

    def test_exit_code_and_fault(self, host):
        def bad(api, argv):
            api.read(0, 1)     # page 0 is never inside a cVM
        cvm = host.settle(host.boot(host.program("bad", bad)))
        assert cvm.exit_code == 1
        assert "BOUNDS" in cvm.faults[0]

        cvm = host.settle(host.boot(host.program("seven", lambda api, argv: 7)))
        assert cvm.exit_code == 7

    def test_terminate_revokes_donated_entries(self, host):
        d = host.boot("d", "hello", start=False)
        host.iv.advertise(d, b"k", Kind.FILE, cap_derive(d.ddc, d.region[0] + 0x100, 64, RW))
        host.iv.terminate(d)
        assert b"k" not in host.iv.registry


class TestAffix:
    def test_slots_hold_sealed_monitor_caps(self, host):
        cvm = host.boot("h", "hello", start=False)
        mem = host.iv.machine.memory
        caps = [mem.read_cap(cvm.affix_addr + off) for off in (AFFIX_MON_DDC, AFFIX_RET, AFFIX_OCALL)]
        assert all(c.tag and c.sealed for c in caps)
        assert len({c.otype for c in caps}) == 1
        assert Perm.EXEC in caps[1].perms and Perm.EXEC in caps[2].perms

    def test_guest_view_of_affix(self, host):
        seen = {}

        def main(api, argv):
            ctx = api.ctx
            base = ctx.ddc.base
            ctx.clc(5, "ddc", base + AFFIX_MON_DDC)
            mon = ctx.cregs[5]
            seen["loaded"] = (mon.tag, mon.sealed)
            with pytest.raises(CapFault) as e:
                cap_inc_offset(mon, 16)
            seen["inc"] = e.value.kind
            ctx.clc(6, "ddc", base + AFFIX_RET)
            with pytest.raises(CapFault) as e:
                ctx.csc(6, "ddc", api.alloc(16))
            seen["store"] = e.value.kind
            seen["clock"] = raw_hostcall(api, HC.CLOCK)
            seen["ddc_after"] = ctx.ddc
            return 0

        cvm = host.run("raw", main, raw=True)
        assert seen["loaded"] == (True, True)
        assert seen["inc"] is FaultKind.SEALED_IMMUTABLE
        assert seen["store"] is FaultKind.PERM
        assert seen["clock"] > 0
        assert (seen["ddc_after"].base, seen["ddc_after"].length) == cvm.region

    def test_hostcall_scrubs_registers_and_switches_tp(self, host):
        seen = {}
        iv = host.iv
        orig = iv.hostcall_table[HC.CLOCK]

        def spy(cvm, ctx, *args):
            seen["host_tp"] = ctx.iregs["tp"]
            seen["ddc"] = ctx.ddc
            return orig.handler(cvm, ctx, *args)

        iv.hostcall_table[HC.CLOCK] = Hostcall(HC.CLOCK, "clock", orig.group, spy)

        def main(api, argv):
            ctx = api.ctx
            ctx.csetbounds(7, "ddc", api.alloc(64), 64)   # a capability the guest made itself
            seen["guest_tp"] = ctx.iregs["tp"]
            raw_hostcall(api, HC.CLOCK)
            seen["tp_after"] = ctx.iregs["tp"]
            seen["tagged"] = [r for r, c in enumerate(ctx.cregs) if c.tag]
            seen["ct6"] = ctx.cregs[CT6]
            return 0

        cvm = host.run("raw", main, raw=True)
        assert seen["host_tp"] == HOST_TP
        assert seen["guest_tp"] == seen["tp_after"] != HOST_TP
        assert seen["tagged"] == [CT6]
        assert not seen["ct6"].sealed and seen["ct6"].base == cvm.region[0]
        assert seen["ddc"].length == iv.machine.size      # monitor authority inside only


class TestHostcallTable:
    @pytest.mark.parametrize("group,names", [
        (HostcallGroup.DISK, ["disk_read", "disk_write", "disk_getsize"]),
        (HostcallGroup.NET, ["net_read", "net_write", "net_poll"]),
    ])
    def test_named_groups(self, iv, group, names):
        assert [h.name for h in iv.hostcalls_in(group)] == names

    def test_group_sizes(self, iv):
        sizes = {g: len(iv.hostcalls_in(g)) for g in HostcallGroup}
        assert sizes == {HostcallGroup.MINIMAL: 12, HostcallGroup.DISK: 3,
                         HostcallGroup.NET: 3, HostcallGroup.COMM: 10}

    def test_unknown_id_is_an_error_value(self, host):
        cvm = host.boot("h", "hello", start=False)
        assert host.iv.hostcall_dispatch(cvm, None, 999, [0] * 6) == -Err.BAD_HOSTCALL
        assert host.iv.hostcall_dispatch(cvm, None, -1, [0] * 6) == -Err.BAD_HOSTCALL

    def test_bad_arguments_are_error_values(self, host):
        seen = {}

        def main(api, argv):
            seen["print"] = raw_hostcall(api, HC.PRINT, 0, 16)        # address outside the cVM
            seen["disk"] = raw_hostcall(api, HC.DISK_GETSIZE)         # no disk attached
            return 0

        host.run("raw", main, raw=True)
        assert seen == {"print": -Err.BOUNDS, "disk": -Err.BADF}

    def test_disk_hostcalls(self, host, tmp_path):
        img = tmp_path / "disk.img"
        img.write_bytes(b"block device contents\n" * 300)
        cvm = host.finish(host.boot("cat", "disk_cat", disk_image=str(img)))
        assert cvm.output() == img.read_text()


class TestRegistry:
    @pytest.fixture
    def pair(self, host):
        d = host.boot("donor", "hello", start=False,
                      allowed_keys=[AclEntry("kv", "r", "reader"), AclEntry("rw.*", "rw", "*")])
        r = host.boot("reader", "hello", start=False)
        o = host.boot("other", "hello", start=False)
        return host.iv, d, r, o

    def buf(self, d, off=0x100, n=4096):
        return cap_derive(d.ddc, d.region[0] + off, n, RW)

    def test_advertise_probe_read_only(self, pair):
        iv, d, r, o = pair
        e = iv.advertise(d, b"kv", Kind.FILE, self.buf(d))
        assert e.live and e.kind is Kind.FILE
        b = iv.probe(r, b"kv")
        assert b.rights == "r" and b.cap.perms == Perm.READ
        assert (b.cap.base, b.cap.length) == (d.region[0] + 0x100, 4096)
        stored = iv.machine.memory.read_cap(b.slot)
        assert stored == b.cap and granted_caps_ok(stored)

    def test_acl_exclusion(self, pair):
        iv, d, r, o = pair
        iv.advertise(d, b"kv", Kind.FILE, self.buf(d))
        with err(Err.ACCESS_DENIED):
            iv.probe(o, b"kv")

    def test_range_not_owned(self, pair):
        iv, d, r, o = pair
        with err(Err.RANGE_NOT_OWNED):
            iv.advertise(d, b"kv", Kind.FILE, cap_derive(r.ddc, r.region[0], 64, RW))

    def test_duplicate_key(self, pair):
        iv, d, r, o = pair
        iv.advertise(d, b"kv", Kind.FILE, self.buf(d))
        with err(Err.DUPLICATE_KEY):
            iv.advertise(d, b"kv", Kind.FILE, self.buf(d, 0x2000))

    def test_no_such_key(self, pair):
        iv, d, r, o = pair
        with err(Err.NO_SUCH_KEY):
            iv.probe(r, b"kv")
        with err(Err.NO_SUCH_KEY):
            iv.revoke(d, b"kv")

    def test_revoke(self, pair):
        iv, d, r, o = pair
        e = iv.advertise(d, b"kv", Kind.FILE, self.buf(d))
        b = iv.probe(r, b"kv")
        with err(Err.NOT_OWNER):
            iv.revoke(r, b"kv")
        iv.revoke(d, b"kv")
        assert not e.live and b.revoked
        assert not iv.machine.memory.tags[b.slot // 16]
        assert not iv.machine.memory.tags[d.layout.device_slot(e.handle) // 16]
        with err(Err.REVOKED):
            iv.probe(r, b"kv")
        e2 = iv.advertise(d, b"kv", Kind.FILE, self.buf(d))
        assert e2.live and e2.epoch > e.epoch
        assert iv.probe(r, b"kv").entry is e2

    def test_rights_union(self, pair):
        iv, d, r, o = pair
        iv.advertise(d, b"rw.x", Kind.FILE, self.buf(d))
        assert iv.probe(o, b"rw.x").cap.perms == RW

    def test_grants_never_carry_store_cap(self, pair):
        iv, d, r, o = pair
        full = cap_derive(d.ddc, d.region[0] + 0x100, 64, d.ddc.perms)
        e = iv.advertise(d, b"rw.y", Kind.FILE, full)
        assert not e.payload.perms & GRANT_FORBIDDEN
        assert not iv.probe(r, b"rw.y").cap.perms & GRANT_FORBIDDEN

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("apr"), st.integers(0, 2)), min_size=5, max_size=40),
           st.integers(1, 4))
    def test_concurrent_registry_never_leaves_live_binding_on_dead_entry(self, ops, nthreads):
        host = Host(4 << 20)
        iv = host.iv
        d = host.boot("d", "hello", start=False, allowed_keys=[AclEntry("*", "rw")])
        rs = [host.boot(f"r{i}", "hello", start=False) for i in range(nthreads)]
        bindings = []
        lock = threading.Lock()

        def worker(rec):
            for op, k in ops:
                key = b"key%d" % k
                try:
                    if op == "a":
                        iv.advertise(d, key, Kind.FILE, self.buf(d, 0x100 + 64 * k, 64))
                    elif op == "r":
                        iv.revoke(d, key)
                    else:
                        b = iv.probe(rec, key)
                        with lock:
                            bindings.append(b)
                        # probe either saw a live epoch, or revocation already unbound it
                        assert b.entry.live or b.revoked
                except CapvmError as e:
                    assert e.code in (Err.DUPLICATE_KEY, Err.NO_SUCH_KEY, Err.REVOKED, Err.OUT_OF_SPACE)

        threads = [threading.Thread(target=worker, args=(r,)) for r in rs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        tags = iv.machine.memory.tags
        for b in bindings:
            assert b.entry.live or b.revoked
            if b.revoked:
                assert not tags[b.slot // 16]
        live = [e for e in iv.registry.values() if e.live]
        assert len({e.key for e in live}) == len(live)


class TestThreads:
    def test_pool_bound(self, host):
        gate = threading.Event()
        started = []

        def block(api, a, b):
            started.append(a)
            gate.wait(10)
            return a

        cvm = host.run("lib", None, {"block": block}, library=True, stack_count=4)
        host.settle(cvm)
        fid = cvm.shim.func_id(0, "block")
        tids = [host.iv.thread_spawn(cvm, LibosFn.PROGRAM_FUNC, 0, fid, i) for i in range(4)]
        with pytest.raises(CapvmError, match="STACK_POOL_EXHAUSTED"):
            host.iv.thread_spawn(cvm, LibosFn.PROGRAM_FUNC, 0, fid, 9)
        gate.set()
        assert sorted(host.iv.call_result(t, 10) for t in tids) == [0, 1, 2, 3]
        # stacks come back to the pool
        host.iv.call_result(host.iv.thread_spawn(cvm, LibosFn.PROGRAM_FUNC, 0, fid, 5), 10)

    def test_threads_share_heap_and_ddc(self, host):
        seen = {}

        def child(api, addr, _):
            seen["child_ddc"] = api.ctx.ddc
            api.write(addr, b"from child")
            return 0

        def main(api, argv):
            seen["main_ddc"] = api.ctx.ddc
            buf = api.alloc(16)
            api.join(api.spawn("child", buf))
            seen["read"] = api.read(buf, 10)
            return 0

        cvm = host.run("raw", main, {"child": child}, raw=True)
        assert seen["read"] == b"from child"
        for k in ("main_ddc", "child_ddc"):
            assert (seen[k].base, seen[k].length) == cvm.region

    def test_each_thread_has_own_context(self, host):
        ctxs = []

        def child(api, a, b):
            ctxs.append(api.ctx)
            return 0

        def main(api, argv):
            ctxs.append(api.ctx)
            for t in [api.spawn("child"), api.spawn("child")]:
                api.join(t)
            return 0

        host.run("p", main, {"child": child})
        assert len({id(c) for c in ctxs}) == 3


def test_authority_confinement_after_workload(host):
    """Scan every capability in guest memory and registers after real traffic."""
    iv = host.iv
    lib = host.boot("lib", "crypto_lib", heap=1 << 20, allowed_keys=[AclEntry("crypto.*", "rw")])
    user = host.boot("u", "crypto_user", heap=1 << 20)
    p = host.boot("producer", "producer", allowed_keys=[AclEntry("pc.*", "rw", "consumer")])
    c = host.boot("consumer", "consumer")
    for cvm in (user, p, c):
        host.finish(cvm)
    mem = iv.machine.memory
    checked = 0
    for cvm in (lib, user, p, c):
        base, length = cvm.region
        for g, cap in list(mem._caps.items()):
            if base // 16 <= g < (base + length) // 16 and mem.tags[g]:
                checked += 1
                assert granted_caps_ok(cap), (cvm.name, cap)
        for ctx in list(cvm.contexts):
            for cap in ctx.cregs:
                assert granted_caps_ok(cap)
    assert checked > 10
