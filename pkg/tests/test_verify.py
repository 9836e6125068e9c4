import numpy as np
import pytest

from viscoadjoint import verify
from viscoadjoint.verify import TestReport


def report(metrics, windows):
    return TestReport("demo", {}, metrics, windows)


def test_window_logic():
    assert report({"gap": 1e-9}, {"gap": (0, 1e-8)}).passed
    assert not report({"gap": 2e-8}, {"gap": (0, 1e-8)}).passed
    assert not report({"gap": np.nan}, {"gap": (0, 1e-8)}).passed
    assert report({"r": 4.1}, {"r": (3.7, 4.3)}).passed
    assert not report({"r": 4.4}, {"r": (3.7, 4.3)}).passed


def test_line_names_the_tightest_metric():
    r = report({"a": 0.9e-8, "b": 5.0, "c": 0.0}, {"a": (0, 1e-8), "b": (1, np.inf), "c": (0, 0)})
    assert r.line() == "PASS demo a=9.000e-09"
    r = report({"a": 1e-9, "b": 0.5}, {"a": (0, 1e-8), "b": (1, np.inf)})
    assert r.line().startswith("FAIL demo b=")


def test_order_estimate():
    hs = np.array([0.1, 0.05, 0.025])
    assert verify._order(hs, 3 * hs ** 2) == pytest.approx(2.0)


def test_rheology_suite_writes_evidence(tmp_path):
    lines = []
    reports = verify.run_suite("rheology", tmp_path, echo=lines.append)
    assert all(r.passed for r in reports)
    assert len(lines) == 2
    csv = (tmp_path / "rheology-identities.csv").read_text().splitlines()
    assert csv[0] == "dim,m,p,inverse_rel,first_fd_rel,second_fd_rel"
    assert len(csv) == 1 + 2 * 2 * 100
    assert reports[0].seconds < 10


def test_unknown_suite():
    with pytest.raises(KeyError):
        verify.suite("nope")
    with pytest.raises(ValueError):
        verify.dot_test("elsewhere")


def test_quick_oracle_programs():
    assert verify.dot_test("oracle", 1, trials=3, n=6).passed
    assert verify.second_adjoint_identity(trials=3, n=6).passed


def test_illposed_demo_small():
    rep = verify.illposed_demo(n=16, nt=150, delta_cells=4, ladder=(1, 2, 4))
    res = [r[1] for r in rep.rows]
    assert all(a > b for a, b in zip(res, res[1:]))
    assert rep.metrics["sup_distance_spread"] <= 1e-12
