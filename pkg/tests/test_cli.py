import json

import numpy as np
import pytest

from viscoadjoint import cli, fwi
from viscoadjoint.io import read_field, read_seismogram, read_vaf, write_field, write_seismogram, write_vaf
from viscoadjoint.scenario import make_scenario, smooth_direction
from viscoadjoint.wave2d import run_forward


def config(n=16, nt=150, T=1.0, **over):
    c = {
        "grid": {"nx": n, "nz": n, "h": 1.0 / n},
        "time": {"T": T, "nt": nt},
        "relaxation": {"L": 1, "f0": 5.0},
        "source": {"location": [n // 2, n // 4], "component": "vz", "f0": 5.0},
        "receivers": [[i, 3 * n // 4, c] for i in range(n // 8, n, n // 8) for c in (0, 1)],
        "field": {"preset": "smooth", "seed": 1},
        "seed": 1,
    }
    for k, v in over.items():
        c[k] = v
    return c


@pytest.fixture
def cfgfile(tmp_path):
    def make(**over):
        p = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.json"
        p.write_text(json.dumps(config(**over)))
        return p
    return make


def test_simulate_matches_library_bytes(cfgfile, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["simulate", str(cfgfile()), "--out", str(out)]) == 0
    sc = make_scenario(16, 150, T=1.0, seed=1)
    rec = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
    write_seismogram(tmp_path / "ref.csv", rec.times, rec.sample(sc.receivers))
    write_vaf(tmp_path / "ref.vaf", rec.velocity(), sc.grid.h, sc.dt)
    assert (out / "receivers.csv").read_bytes() == (tmp_path / "ref.csv").read_bytes()
    assert (out / "wavefield.vaf").read_bytes() == (tmp_path / "ref.vaf").read_bytes()


def test_simulate_stride_and_zero_source(cfgfile, tmp_path):
    src = {"location": [8, 4], "component": "vz", "f0": 5.0, "amplitude": 0.0}
    assert cli.main(["simulate", str(cfgfile(source=src)), "--out", str(tmp_path / "z"), "--stride", "10"]) == 0
    _, tr = read_seismogram(tmp_path / "z" / "receivers.csv")
    assert not np.any(tr)
    snaps = read_vaf(tmp_path / "z" / "wavefield.vaf")
    assert snaps.data.shape == (16, 2, 17, 17)
    assert snaps.dt == pytest.approx(10 / 150)


def test_exit_codes(cfgfile, tmp_path, capsys):
    missing = tmp_path / "nowhere" / "p.vaf"
    assert cli.main(["simulate", str(cfgfile(field={"file": str(missing)})), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err
    bad = {"constant": {"rho": 9.0, "vS": 1.0, "tauS": 0.7, "vP": 3.0, "tauP": 0.7}}
    assert cli.main(["simulate", str(cfgfile(field=bad)), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["simulate", str(cfgfile(nt=20)), "--out", str(tmp_path / "o")]) == 4
    assert cli.main(["simulate", str(tmp_path / "absent.json")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["simulate", str(tmp_path / "broken.json")]) == 2
    assert cli.main(["simulate", str(cfgfile(grid={"nx": 16}))]) == 2
    assert cli.main(["check", "everything"]) == 2


def test_auto_time_step(cfgfile):
    setup = cli.build_setup(cli.RunConfig.load(cfgfile(time={"T": 1.0, "dt": "auto"})))
    assert setup.dt <= setup.ops.dt_max
    assert setup.nt * setup.dt == pytest.approx(1.0, abs=1e-12)
    assert setup.nt == int(np.ceil(1.0 / setup.ops.dt_max))


@pytest.fixture
def observed(cfgfile, tmp_path):
    assert cli.main(["simulate", str(cfgfile(field={"preset": "smooth", "seed": 2})),
                     "--out", str(tmp_path / "obs")]) == 0
    return tmp_path / "obs" / "receivers.csv"


def test_gradient_selfcheck(cfgfile, observed, tmp_path, capsys):
    out = tmp_path / "g.vaf"
    assert cli.main(["gradient", str(cfgfile()), str(observed), "--out", str(out), "--selfcheck"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("PASS gradient-selfcheck")
    assert float(line.split("=")[1]) <= 3e-3
    assert read_field(out, (16, 16)).shape == (5, 16, 16)


def test_zero_residual_gives_zero_gradient(cfgfile, tmp_path):
    cfg = cfgfile()
    assert cli.main(["simulate", str(cfg), "--out", str(tmp_path / "self")]) == 0
    out = tmp_path / "g0.vaf"
    assert cli.main(["gradient", str(cfg), str(tmp_path / "self" / "receivers.csv"), "--out", str(out)]) == 0
    assert not np.any(read_field(out))


def test_gradient_geometry_and_header_errors(cfgfile, observed, tmp_path):
    other = config()
    other["receivers"] = other["receivers"][:4]
    p = tmp_path / "other.json"
    p.write_text(json.dumps(other))
    assert cli.main(["gradient", str(p), str(observed), "--out", str(tmp_path / "x.vaf")]) == 2
    (tmp_path / "corrupt.vaf").write_bytes(b"VAF9" + bytes(40))
    assert cli.main(["hessian", str(cfgfile()), str(tmp_path / "corrupt.vaf")]) == 2


def _direction(tmp_path, seed, scale=1.0):
    sc = make_scenario(16, 150)
    p = tmp_path / f"dir{seed}.vaf"
    write_field(p, scale * smooth_direction(sc.grid, np.random.default_rng(seed)).values, sc.grid.h)
    return p


def test_hessian_swap_and_zero(cfgfile, tmp_path):
    cfg = str(cfgfile())
    d1, d2, z = _direction(tmp_path, 1), _direction(tmp_path, 2), _direction(tmp_path, 3, 0.0)
    assert cli.main(["hessian", cfg, str(d1), "--direction2", str(d2), "--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(["hessian", cfg, str(d2), "--direction2", str(d1), "--out", str(tmp_path / "b.csv")]) == 0
    _, a = read_seismogram(tmp_path / "a.csv")
    _, b = read_seismogram(tmp_path / "b.csv")
    assert np.max(np.abs(a - b)) <= 1e-11 * np.max(np.abs(a))
    assert cli.main(["hessian", cfg, str(z), "--out", str(tmp_path / "z.csv")]) == 0
    assert not np.any(read_seismogram(tmp_path / "z.csv")[1])


def test_hessian_adjoint_selfcheck(cfgfile, observed, tmp_path, capsys):
    d1 = _direction(tmp_path, 1)
    out = tmp_path / "h.vaf"
    rc = cli.main(["hessian", str(cfgfile()), str(d1), str(observed), "--adjoint", "--out", str(out),
                   "--selfcheck"])
    line = capsys.readouterr().out.strip()
    assert rc == 0, line
    assert float(line.split("=")[1]) <= 1e-2
    assert read_field(out).shape == (5, 16, 16)
    assert cli.main(["hessian", str(cfgfile()), str(d1), "--adjoint"]) == 2


def test_hessian_margin_violation(cfgfile, tmp_path):
    edge = {"constant": {"rho": 2.0, "vS": 1.2, "tauS": 0.75, "vP": 3.0, "tauP": 0.75}}
    assert cli.main(["hessian", str(cfgfile(field=edge)), str(_direction(tmp_path, 1))]) == 3


def test_threads_option_and_environment(cfgfile, tmp_path, monkeypatch):
    assert cli.main(["--threads", "1", "simulate", str(cfgfile()), "--out", str(tmp_path / "t")]) == 0
    monkeypatch.setenv("VISCOADJOINT_THREADS", "two")
    assert cli.main(["simulate", str(cfgfile()), "--out", str(tmp_path / "t")]) == 2
    monkeypatch.setenv("VISCOADJOINT_THREADS", "1")
    assert cli.main(["simulate", str(cfgfile()), "--out", str(tmp_path / "t")]) == 0


def test_check_rheology(capsys):
    assert cli.main(["check", "rheology"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(l.startswith("PASS ") for l in lines)


def test_library_and_cli_gradient_agree(cfgfile, observed, tmp_path):
    cfg = cfgfile()
    out = tmp_path / "g.vaf"
    assert cli.main(["gradient", str(cfg), str(observed), "--out", str(out)]) == 0
    setup = cli.build_setup(cli.RunConfig.load(cfg), interior=True)
    _, traces = read_seismogram(observed)
    ref = fwi.Misfit(setup.receivers, traces).gradient(setup.ops, run_forward(setup.ops, setup.source, setup.dt,
                                                                               setup.nt))
    assert np.array_equal(read_field(out), ref.values)
