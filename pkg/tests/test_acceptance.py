"""Acceptance criteria: one verdict line per criterion, at its stated tolerance and time budget.

The full ``all`` suite runs once (its wall clock is the ``check all``
budget); each test then judges the programs belonging to one criterion.
"""

import time

import pytest

from viscoadjoint import verify

CRITERIA = {
    1: ("rheology identities", ["rheology-identities"], 10.0),
    2: ("oracle theorem suite", ["dot-oracle-1", "dot-oracle-2", "taylor-oracle-1", "taylor-oracle-2",
                                 "symmetry-oracle", "second-adjoint-oracle", "lipschitz-oracle"], 120.0),
    3: ("pde discrete adjoint", ["dot-pde-discrete"], 30.0),
    4: ("pde continuous adjoints", ["dot-pde-continuous-1", "dot-pde-continuous-2"], 600.0),
    5: ("misfit gradient", ["misfit-gradient"], 180.0),
    6: ("pde second-derivative symmetry", ["symmetry-pde"], 120.0),
    7: ("ill-posedness demonstration", ["illposed-demo"], 240.0),
    8: ("source regularity", ["source-regularity"], 1.0),
}
CHECK_ALL_BUDGET = 1200.0


@pytest.fixture(scope="module")
def suite_run():
    t0 = time.perf_counter()
    reports = {}
    for prog in verify.suite("all"):
        rep = prog()
        reports[rep.name] = rep
    return reports, time.perf_counter() - t0


def _judge(suite_run, capsys, k):
    reports, _ = suite_run
    title, names, budget = CRITERIA[k]
    reps = [reports[n] for n in names]
    seconds = sum(r.seconds for r in reps)
    ok = all(r.passed for r in reps) and seconds < budget
    with capsys.disabled():
        for r in reps:
            print(f"\n    {r.line()} ({r.seconds:.1f}s)", end="")
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {k}: {title} runtime={seconds:.1f}s budget={budget:.0f}s")
    failed = [r.line() for r in reps if not r.passed]
    assert not failed, failed
    assert seconds < budget


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(suite_run, capsys, k):
    _judge(suite_run, capsys, k)


def test_check_all_budget(suite_run, capsys):
    _, total = suite_run
    ok = total < CHECK_ALL_BUDGET
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} check all runtime={total:.1f}s budget={CHECK_ALL_BUDGET:.0f}s")
    assert ok
