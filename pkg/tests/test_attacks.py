import pytest

from capvm import attacks
from capvm.attacks import ATTACKS, Attack, attacker_suite
from capvm.capmachine import FaultKind
from capvm.errors import Err


@pytest.fixture(scope="module")
def report():
    return attacker_suite()


def test_suite_covers_enough_behaviors(report):
    assert len(report.results) == len(ATTACKS) >= 10
    assert {r.name for r in report.results} == {a.name for a in ATTACKS}


def test_no_escapes_and_victim_intact(report):
    assert report.escapes == 0
    assert report.victim_intact
    assert report.passed


@pytest.mark.parametrize("attack", ATTACKS, ids=lambda a: a.name)
def test_each_behavior_fails_the_expected_way(report, attack):
    result = next(r for r in report.results if r.name == attack.name)
    assert result.observed == attack.expected, str(result)


def test_both_fault_layers_are_exercised():
    kinds = {type(a.expected) for a in ATTACKS}
    assert kinds == {FaultKind, Err}     # hardware faults and Intravisor refusals


def test_subset():
    rep = attacker_suite(["oob_load", "bad_hostcall"])
    assert [r.name for r in rep.results] == ["oob_load", "bad_hostcall"]
    assert rep.passed


def test_detector_reports_a_behavior_that_completes(monkeypatch):
    """A harmless behavior that finishes must be counted as an escape."""
    def benign(api, vbase, vlen):
        api.read(api.region[0] + 4096, 8)

    monkeypatch.setattr(attacks, "ATTACKS", [Attack("benign", benign, FaultKind.BOUNDS)])
    monkeypatch.setitem(attacks.ATTACKER.functions, "benign", attacks._behavior(benign))
    rep = attacker_suite()
    assert rep.escapes == 1 and not rep.passed
    assert "ESCAPED" in str(rep.results[0])
