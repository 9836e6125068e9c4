import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viscoadjoint.io import (
    HEADER,
    FormatError,
    read_field,
    read_seismogram,
    read_vaf,
    write_field,
    write_seismogram,
    write_vaf,
)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 7), st.integers(1, 6),
       st.floats(1e-3, 10.0), st.floats(0.0, 1.0))
def test_vaf_round_trip(tmp_path_factory, nt, ncomp, nx, nz, h, dt):
    path = tmp_path_factory.mktemp("vaf") / "a.vaf"
    data = np.random.default_rng(nt * 31 + nx).standard_normal((nt, ncomp, nx, nz))
    write_vaf(path, data, h, dt)
    a = read_vaf(path)
    assert np.array_equal(a.data, data)
    assert (a.h, a.dt) == (h, dt)
    assert path.stat().st_size == HEADER.size + 8 * data.size


def test_vaf_layout_is_z_fastest(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=float).reshape(1, 2, 3, 4)
    write_vaf(tmp_path / "x.vaf", data, 0.5)
    raw = (tmp_path / "x.vaf").read_bytes()
    assert raw[:4] == b"VAF1"
    flat = np.frombuffer(raw[HEADER.size:], "<f8")
    assert flat[1] == data[0, 0, 0, 1]
    assert flat[4] == data[0, 0, 1, 0]


def test_vaf_rejects_corruption(tmp_path):
    p = tmp_path / "bad.vaf"
    write_vaf(p, np.zeros((1, 5, 3, 3)), 0.1)
    raw = bytearray(p.read_bytes())
    (tmp_path / "magic.vaf").write_bytes(b"XXXX" + bytes(raw[4:]))
    (tmp_path / "short.vaf").write_bytes(bytes(raw[:-8]))
    (tmp_path / "tiny.vaf").write_bytes(b"VAF1")
    for name in ("magic", "short", "tiny"):
        with pytest.raises(FormatError):
            read_vaf(tmp_path / f"{name}.vaf")
    with pytest.raises(FormatError):
        write_vaf(tmp_path / "x.vaf", np.zeros(4), 0.1)


def test_field_shape_and_spacing_checked(tmp_path):
    v = np.ones((5, 4, 3))
    write_field(tmp_path / "f.vaf", v, 0.25)
    assert np.array_equal(read_field(tmp_path / "f.vaf", (4, 3), 0.25), v)
    with pytest.raises(FormatError):
        read_field(tmp_path / "f.vaf", (3, 4))
    with pytest.raises(FormatError):
        read_field(tmp_path / "f.vaf", (4, 3), 0.5)
    write_vaf(tmp_path / "g.vaf", np.ones((2, 5, 4, 3)), 0.25, 0.1)
    with pytest.raises(FormatError):
        read_field(tmp_path / "g.vaf")
    with pytest.raises(FormatError):
        write_field(tmp_path / "h.vaf", np.ones((3, 4, 3)), 0.25)


def test_seismogram_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    t = np.arange(11) * 0.1
    tr = rng.standard_normal((11, 3))
    write_seismogram(tmp_path / "s.csv", t, tr)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "t,comp0,comp1,comp2"
    t2, tr2 = read_seismogram(tmp_path / "s.csv")
    assert np.array_equal(t2, t) and np.array_equal(tr2, tr)


def test_seismogram_header_checked(tmp_path):
    (tmp_path / "s.csv").write_text("time,a\n0,1\n")
    with pytest.raises(FormatError):
        read_seismogram(tmp_path / "s.csv")
    (tmp_path / "r.csv").write_text("t,comp0\n0,1,2\n")
    with pytest.raises(FormatError):
        read_seismogram(tmp_path / "r.csv")
