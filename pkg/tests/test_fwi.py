import numpy as np
import pytest

from viscoadjoint import fwi
from viscoadjoint.rheology import InadmissibleError
from viscoadjoint.scenario import BOX, make_scenario, smooth_direction
from viscoadjoint.wave2d import (
    AdjointData,
    GridError,
    ParameterField,
    SmoothnessError,
    SourceSpec,
    build_operators,
    run_forward,
    step_weights,
)


@pytest.fixture(scope="module")
def sc():
    return make_scenario(16, 150, T=1.0, seed=2)


@pytest.fixture(scope="module")
def base(sc):
    return fwi.phi(sc.ops, sc.source, sc.dt, sc.nt)


@pytest.fixture(scope="module")
def probe(sc):
    rng = np.random.default_rng(9)
    return smooth_direction(sc.grid, rng), smooth_direction(sc.grid, rng), sc.smooth_traces(rng)


def test_phi_is_pure_delegation(sc, base):
    ref = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
    assert np.array_equal(ref.states, base.states)
    assert not np.any(fwi.phi(sc.ops, None, sc.dt, sc.nt).states)


def first_arrivals(traces, level=1e-2):
    return np.array([np.argmax(np.abs(tr) > level * np.abs(tr).max()) for tr in traces.T])


def test_density_doubling_keeps_travel_times():
    sc = make_scenario(32, 300, T=1.0, seed=4)
    b1 = fwi.phi(sc.ops, sc.source, sc.dt, sc.nt)
    vals = sc.field.values.copy()
    vals[0] *= 2.0
    ops2 = build_operators(sc.grid, ParameterField(vals), sc.relax, check=False)
    b2 = fwi.phi(ops2, sc.source, sc.dt, sc.nt)
    t1, t2 = first_arrivals(b1.sample(sc.receivers)), first_arrivals(b2.sample(sc.receivers))
    assert np.max(np.abs(t1 - t2)) <= 1


def test_zero_data_gives_zero_gradients(sc, base, probe):
    p, _, _ = probe
    z = AdjointData.zeros(sc.nt)
    assert not np.any(fwi.phi_prime_adjoint(sc.ops, z, base).values)
    assert not np.any(fwi.phi_second_adjoint(sc.ops, p, z, base).values)


def test_first_order_duality(sc, base, probe):
    p, _, g = probe
    lhs = fwi.phi_prime(sc.ops, p, base).pairing(g)
    rhs = fwi.phi_prime_adjoint(sc.ops, g, base).dot(p, sc.grid.h)
    assert abs(lhs - rhs) <= 1e-2 * abs(lhs)


def test_second_order_duality_and_split(sc, base, probe):
    p, q, g = probe
    lhs = fwi.phi_second(sc.ops, p, q, base).pairing(g)
    parts = fwi.phi_second_adjoint(sc.ops, p, g, base, parts=True)
    h = sc.grid.h
    pieces = [parts.memory.dot(q, h), parts.cross.dot(q, h), parts.curvature.dot(q, h)]
    assert parts.total.dot(q, h) == pytest.approx(sum(pieces), rel=1e-12)
    # coarse grid: the parts cancel, so measure the gap against the largest one
    assert abs(lhs - sum(pieces)) <= 1e-2 * max(abs(x) for x in pieces)
    # the pieces are genuinely separate contributions
    assert all(abs(x) > 1e-6 * abs(lhs) for x in pieces)


def test_printed_variant_breaks_second_order_duality(sc, base, probe):
    p, q, g = probe
    lhs = fwi.phi_second(sc.ops, p, q, base).pairing(g)
    good = fwi.phi_second_adjoint(sc.ops, p, g, base).dot(q, sc.grid.h)
    bad = fwi.phi_second_adjoint(sc.ops, p, g, base, variant="printed").dot(q, sc.grid.h)
    assert abs(bad - lhs) > 10 * abs(good - lhs)


def test_phi_second_symmetry(sc, base, probe):
    p, q, _ = probe
    a = fwi.phi_second(sc.ops, p, q, base).states
    b = fwi.phi_second(sc.ops, q, p, base).states
    assert np.max(np.abs(a - b)) <= 1e-11 * np.max(np.abs(a))


def test_second_derivative_requires_smooth_source(sc, probe):
    p, q, _ = probe
    src = SourceSpec(sc.source.location, sc.source.component, sc.source.f0, cutoff=0.15)
    rough = run_forward(sc.ops, src, sc.dt, sc.nt)
    with pytest.raises(SmoothnessError):
        fwi.phi_second(sc.ops, p, q, rough)


def test_interior_margin_enforced(sc):
    vals = sc.field.values.copy()
    vals[1, 0, 0] = BOX.vS[1] - 1e-4  # inside the box, within the 1% margin
    field = ParameterField(vals, BOX)
    build_operators(sc.grid, field, sc.relax)
    with pytest.raises(InadmissibleError):
        fwi.interior_operators(sc.grid, field, sc.relax)


def test_grid_mismatch_rejected(sc, base, probe):
    other = make_scenario(12, 150, T=1.0)
    with pytest.raises(GridError):
        fwi.phi_prime(other.ops, smooth_direction(other.grid, np.random.default_rng(0)), base)
    with pytest.raises(GridError):
        fwi.phi_prime_adjoint(sc.ops, AdjointData.zeros(sc.nt - 1), base)


def test_misfit_zero_residual(sc, base):
    traces = base.sample(sc.receivers)
    m = fwi.Misfit(sc.receivers, traces)
    assert m.value(base) == 0.0
    assert not np.any(m.gradient(sc.ops, base).values)
    with pytest.raises(GridError):
        fwi.Misfit(sc.receivers, traces[:, :3])


def test_misfit_gradient_matches_finite_differences():
    sc = make_scenario(16, 150, T=1.0, seed=1)
    truth = make_scenario(16, 150, T=1.0, seed=2)
    obs = run_forward(truth.ops, truth.source, truth.dt, truth.nt).sample(sc.receivers)
    m = fwi.Misfit(sc.receivers, obs)
    base = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
    grad = m.gradient(sc.ops, base)
    rng = np.random.default_rng(3)
    for _ in range(2):
        d = smooth_direction(sc.grid, rng)
        step = 1e-3
        vals = []
        for s in (step, -step):
            ops = build_operators(sc.grid, sc.field.axpy(s, d), sc.relax)
            vals.append(m.value(run_forward(ops, sc.source, sc.dt, sc.nt)))
        fd = (vals[0] - vals[1]) / (2 * step)
        assert abs(grad.dot(d, sc.grid.h) - fd) <= 1e-2 * abs(fd)


def test_receiver_checks(sc):
    fwi.check_receivers(sc.grid, sc.receivers)
    for bad in [(0, 5, 0), (5, 5, 2), (99, 5, 0), (5, 5)]:
        with pytest.raises(GridError):
            fwi.check_receivers(sc.grid, [bad])


def test_indicator_perturbation_sup_distance(sc):
    h = sc.grid.h
    amp = 0.05 * np.asarray(BOX.widths())
    for radius in (4 * h, 2 * h, h):
        pk = fwi.indicator_perturbation(sc.field, sc.grid, (8.5 * h, 8.5 * h), radius, amp)
        diff = np.abs(pk.values - sc.field.values)
        assert np.allclose(diff.reshape(5, -1).max(axis=1), amp, rtol=1e-12)
    assert fwi.indicator(sc.grid, (8.5 * h, 8.5 * h), 0.4 * h).sum() == 1.0



@pytest.mark.xfail(strict=True, reason="signed duality gaps cross zero, so the max/min spread over probes is unbounded")
def test_duality_gap_spread_across_probes(sc, base):
    rng = np.random.default_rng(1)
    c = step_weights(sc.nt, sc.dt)
    gaps = []
    for _ in range(10):
        p, g = smooth_direction(sc.grid, rng), sc.smooth_traces(rng)
        out = fwi.phi_prime(sc.ops, p, base)
        rhs = fwi.phi_prime_adjoint(sc.ops, g, base).dot(p, sc.grid.h)
        gaps.append(abs(out.pairing(g) - rhs) / (out.l2_norm() * np.sqrt(np.sum(c[:, None] * g.traces ** 2))))
    assert max(gaps) / min(gaps) < 5.0
