import pytest

from capvm.config import DeploymentConfig
from capvm.guestkit import GuestProgram
from capvm.intravisor import Intravisor
from capvm.programs import PROGRAMS


class Host:
    """An Intravisor with a private program table, for tests that need
    guest code written inline."""

    def __init__(self, size=32 << 20):
        self.iv = Intravisor(size, programs=dict(PROGRAMS), console=lambda name, text: None)

    def program(self, name, main=None, functions=None, library=False, raw=False):
        self.iv.programs[name] = GuestProgram(name, main, functions or {}, library, raw)
        return name

    def boot(self, name, program=None, heap=256 * 1024, start=True, **kw):
        cfg = DeploymentConfig(name, heap, program=program or name, **kw)
        return self.iv.cvm_make(cfg, start=start)

    def run(self, name, main=None, functions=None, library=False, raw=False, **kw):
        """Register ``main`` under ``name``, boot it and wait for it."""
        self.program(name, main, functions, library, raw)
        cvm = self.boot(name, **kw)
        if not library:
            self.finish(cvm)
        return cvm

    def finish(self, cvm, timeout=30):
        assert self.iv.wait(cvm, timeout), f"{cvm.name} did not finish"
        assert not cvm.faults, cvm.faults
        assert cvm.exit_code == 0, f"{cvm.name} exited {cvm.exit_code}"
        return cvm

    def settle(self, cvm, timeout=30):
        assert self.iv.wait(cvm, timeout), f"{cvm.name} did not finish"
        return cvm


@pytest.fixture
def host():
    h = Host()
    yield h
    h.iv.shutdown()


@pytest.fixture
def iv(host):
    return host.iv
