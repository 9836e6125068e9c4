import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viscoadjoint.rheology import (
    InadmissibleError,
    IsotropicMap,
    ParameterBounds,
    ParameterPoint,
    RelaxationSpec,
    SingularMapError,
    StateCell,
    apply_B_inv_point,
    apply_B_point,
    apply_Cinv_derivative,
    apply_Cinv_second,
    apply_isotropic_map,
    apply_Q_point,
    apply_V_prime_point,
    apply_V_second_point,
    check_parameter_domain,
    cinv_apply,
    compute_alpha,
    eigen_bounds,
    from_components,
    invert_isotropic_map,
    moduli_from_params,
    ncomp,
    perturbation_coeffs,
    to_components,
)

ALPHA = 0.5
BOX = ParameterBounds(rho=(1.5, 2.5), vS=(0.8, 1.2), tauS=(0.5, 1.0), vP=(2.5, 3.5), tauP=(0.5, 1.0))


def rand_sym(rng, dim):
    X = rng.standard_normal((dim, dim))
    return X + X.T


def rand_map(rng, dim):
    m = rng.uniform(0.5, 1.5)
    # keep the trace eigenvalue comfortably positive
    p = m * rng.uniform(2.5, 4.0)
    return IsotropicMap(m, p, dim)


def rand_point(rng):
    lo, hi = BOX.lower(), BOX.upper()
    return ParameterPoint(*(rng.uniform(a + 0.1 * (b - a), b - 0.1 * (b - a)) for a, b in zip(lo, hi)))


def rand_cell(rng, dim, L=2):
    return StateCell(rng.standard_normal(dim), rng.standard_normal((L + 1, ncomp(dim))))


def cell_diff(a, b):
    return np.max(np.abs(a.flat() - b.flat()))


# --- isotropic maps --------------------------------------------------------

def test_identity_and_hand_examples():
    np.testing.assert_allclose(apply_isotropic_map(IsotropicMap(1, 3), np.eye(3)), 5 * np.eye(3))
    np.testing.assert_array_equal(apply_isotropic_map(IsotropicMap(0.7, 2.2), np.zeros((3, 3))), 0)
    out = apply_isotropic_map(IsotropicMap(0.5, 2), np.diag([1.0, 0, 0]))
    np.testing.assert_allclose(out, np.diag([2.0, 1.0, 1.0]))


def test_inverse_parameters_3d():
    inv = invert_isotropic_map(IsotropicMap(1, 3))
    assert inv.m == pytest.approx(0.25, abs=1e-15)
    assert inv.p == pytest.approx(0.4, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(10):
        M = rand_sym(rng, 3)
        np.testing.assert_allclose(inv(IsotropicMap(1, 3)(M)), M, atol=1e-13)


def test_inverse_2d_example():
    inv = invert_isotropic_map(IsotropicMap(1, 3, 2))
    M = np.array([[1.0, 2.0], [2.0, -1.0]])
    np.testing.assert_allclose(inv(M), 0.5 * M - 0.125 * np.trace(M) * np.eye(2))


@pytest.mark.parametrize("m,p,dim", [(1.0, 4.0 / 3.0, 3), (1.0, 1.0, 2), (0.0, 1.0, 3)])
def test_singular_maps_rejected(m, p, dim):
    with pytest.raises(SingularMapError):
        invert_isotropic_map(IsotropicMap(m, p, dim))


def test_non_symmetric_input_rejected():
    with pytest.raises(ValueError):
        apply_isotropic_map(IsotropicMap(1, 3), np.arange(9.0).reshape(3, 3))
    with pytest.raises(ValueError):
        apply_isotropic_map(IsotropicMap(1, 3), np.eye(2))


def test_eigen_bounds_match_mandel_spectrum():
    assert eigen_bounds(IsotropicMap(1, 3)) == (2.0, 5.0)
    rng = np.random.default_rng(1)
    for dim in (2, 3):
        for _ in range(20):
            c = rand_map(rng, dim)
            ev = np.linalg.eigvalsh(c.mandel())
            lo, hi = eigen_bounds(c)
            assert ev.min() == pytest.approx(lo, rel=1e-12)
            assert ev.max() == pytest.approx(hi, rel=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_self_adjoint_and_roundtrip(dim):
    rng = np.random.default_rng(2)
    for _ in range(1000):
        c = rand_map(rng, dim)
        M, N = rand_sym(rng, dim), rand_sym(rng, dim)
        a = np.sum(c(M) * N)
        b = np.sum(M * c(N))
        assert abs(a - b) <= 1e-13 * max(abs(a), np.linalg.norm(M) * np.linalg.norm(N))
        inv = c.inverse()
        assert np.linalg.norm(inv(c(M)) - M) <= 1e-13 * np.linalg.norm(M)
        assert np.linalg.norm(c(inv(M)) - M) <= 1e-13 * np.linalg.norm(M)
    m = c.mandel()
    np.testing.assert_allclose(m, m.T, atol=1e-15)


@pytest.mark.parametrize("dim", [2, 3])
def test_rayleigh_quotients_bracketed(dim):
    rng = np.random.default_rng(3)
    for _ in range(1000):
        c = rand_map(rng, dim)
        M = rand_sym(rng, dim)
        q = np.sum(c(M) * M) / np.sum(M * M)
        lo, hi = eigen_bounds(c)
        assert lo * (1 - 1e-12) <= q <= hi * (1 + 1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_composition_is_isotropic(dim):
    rng = np.random.default_rng(4)
    a, b = rand_map(rng, dim), rand_map(rng, dim)
    comp = a.compose(b)
    # least-squares fit of (m', p') to the action on the component basis
    n = ncomp(dim)
    rows, rhs = [], []
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        E = from_components(e, dim)
        target = a(b(E))
        rows.append(np.stack([(2 * E - 2 * np.trace(E) * np.eye(dim)).ravel(),
                              (np.trace(E) * np.eye(dim)).ravel()], axis=1))
        rhs.append(target.ravel())
    coef, res, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    assert np.allclose(coef, [comp.m, comp.p], rtol=1e-13)
    assert np.linalg.norm(np.vstack(rows) @ coef - np.concatenate(rhs)) < 1e-12


def test_components_roundtrip():
    rng = np.random.default_rng(5)
    for dim in (2, 3):
        M = rand_sym(rng, dim)
        np.testing.assert_array_equal(from_components(to_components(M), dim), M)


# --- derivatives of the inverse ----------------------------------------------

def test_cinv_derivative_example():
    out = apply_Cinv_derivative(1, 3, 1, 0, np.eye(3))
    np.testing.assert_allclose(out, 0.16 * np.eye(3), rtol=1e-14)
    h = 1e-4
    fd = (IsotropicMap(1 + h, 3).inverse()(np.eye(3)) - IsotropicMap(1 - h, 3).inverse()(np.eye(3))) / (2 * h)
    np.testing.assert_allclose(out, fd, rtol=1e-7)
    np.testing.assert_array_equal(apply_Cinv_derivative(1, 3, 0, 0, np.eye(3)), 0)


@pytest.mark.parametrize("dim", [2, 3])
def test_cinv_derivative_fd_rate(dim):
    rng = np.random.default_rng(6)
    ratios = []
    for _ in range(100):
        c = rand_map(rng, dim)
        mh, ph = rng.standard_normal(2)
        M = rand_sym(rng, dim)
        exact = apply_Cinv_derivative(c.m, c.p, mh, ph, M, dim)

        def fd(h):
            plus = IsotropicMap(c.m + h * mh, c.p + h * ph, dim).inverse()(M)
            minus = IsotropicMap(c.m - h * mh, c.p - h * ph, dim).inverse()(M)
            return (plus - minus) / (2 * h)

        err1 = np.linalg.norm(fd(1e-2) - exact)
        err2 = np.linalg.norm(fd(5e-3) - exact)
        assert np.linalg.norm(fd(1e-4) - exact) <= 1e-6 * np.linalg.norm(exact)
        ratios.append(err1 / err2)
    assert np.median(ratios) == pytest.approx(4.0, abs=0.3)


@pytest.mark.parametrize("dim", [2, 3])
def test_cinv_second_symmetric_and_fd(dim):
    rng = np.random.default_rng(7)
    h = 1e-3
    for _ in range(100):
        c = rand_map(rng, dim)
        # directions on the scale of the base point
        d1 = tuple(rng.uniform(-1, 1, 2) * (c.m, c.p))
        d2 = tuple(rng.uniform(-1, 1, 2) * (c.m, c.p))
        M = rand_sym(rng, dim)
        s12 = apply_Cinv_second(c.m, c.p, d1, d2, M, dim)
        s21 = apply_Cinv_second(c.m, c.p, d2, d1, M, dim)
        np.testing.assert_allclose(s12, s21, atol=1e-14 * np.abs(s12).max())
        fd = (apply_Cinv_derivative(c.m + h * d2[0], c.p + h * d2[1], *d1, M, dim)
              - apply_Cinv_derivative(c.m - h * d2[0], c.p - h * d2[1], *d1, M, dim)) / (2 * h)
        assert np.linalg.norm(fd - s12) <= 1e-5 * np.linalg.norm(s12)
    np.testing.assert_array_equal(apply_Cinv_second(1, 3, (0, 0), (1, 2), np.eye(3)), 0)


# --- relaxation, moduli, coefficients -----------------------------------------

def test_alpha_examples():
    assert compute_alpha(RelaxationSpec((1.0,), 1.0)) == pytest.approx(0.5)
    assert compute_alpha(RelaxationSpec((2.0, 2.0), 0.5)) == pytest.approx(1.0)
    assert compute_alpha(RelaxationSpec((10.0,), 1.0)) == pytest.approx(100 / 101, rel=1e-15)
    with pytest.raises(ValueError):
        RelaxationSpec((1.0,) * 6, 1.0)
    with pytest.raises(ValueError):
        RelaxationSpec((-1.0,), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=5), st.floats(1e-2, 1e2))
def test_alpha_range(taus, w0):
    spec = RelaxationSpec(tuple(taus), w0)
    assert 0 < spec.alpha < spec.L


def test_moduli_examples():
    mod = moduli_from_params(ParameterPoint(2, 1, 0.3, 3, 0.2), 0.5)
    assert mod.pi0 == pytest.approx(18 / 1.1, rel=1e-15)
    assert mod.pi == pytest.approx(mod.pi0 / 2)
    assert moduli_from_params(ParameterPoint(2, 1, 0.3, 3, 0.0), 0.5).pi0 == pytest.approx(18.0)
    with pytest.raises(InadmissibleError):
        moduli_from_params(ParameterPoint(-1, 1, 1, 3, 1), 0.5)


def test_perturbation_examples():
    pt = ParameterPoint(1.0, 2.0, 1.0, 3.0, 0.4)
    c = perturbation_coeffs(pt, 0.5, (0, 1, 0, 0, 0))
    assert c.mu_tilde == pytest.approx(4 / 1.5)
    assert c.mu_hat == pytest.approx(4 / 1.5)
    assert all(x == 0 for x in perturbation_coeffs(pt, 0.5, (1, 0, 0, 0, 0)))
    assert all(x == 0 for x in perturbation_coeffs(pt, 0.5, (0, 0, 0, 0, 0)))


def test_perturbation_forms_agree_and_match_fd():
    rng = np.random.default_rng(8)
    h = 1e-4
    for _ in range(100):
        pt = rand_point(rng)
        ph = rng.standard_normal(5)
        a = np.array(perturbation_coeffs(pt, ALPHA, ph, "velocity"))
        b = np.array(perturbation_coeffs(pt, ALPHA, ph, "moduli"))
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)
        mp = moduli_from_params(pt.axpy(h, ph), ALPHA)
        mm = moduli_from_params(pt.axpy(-h, ph), ALPHA)
        tp, tm = pt.axpy(h, ph), pt.axpy(-h, ph)
        fd = np.array([(mp.mu - mm.mu), (mp.pi - mm.pi),
                       tp.tauS * mp.mu - tm.tauS * mm.mu, tp.tauP * mp.pi - tm.tauP * mm.pi]) / (2 * h)
        np.testing.assert_allclose(a, fd, rtol=1e-6, atol=1e-8)


# --- admissibility -----------------------------------------------------------

def test_box_midpoint_admissible():
    rep = check_parameter_domain(BOX.midpoint(), BOX, ALPHA, dim=2)
    assert rep.admissible, rep.summary()
    d = BOX.derived(ALPHA)
    assert d.p_lo == pytest.approx(3.125)
    assert d.m_hi == pytest.approx(2.88)


def test_point_bounds_example():
    b = ParameterBounds(rho=(1, 1), vS=(1, 1), tauS=(1, 1), vP=(3, 3), tauP=(1, 1))
    rep = check_parameter_domain(b.lower(), b, 0.5, dim=3)
    assert rep.admissible
    assert rep.composite_left == pytest.approx(4 / 3)
    assert rep.composite_right == pytest.approx(9.0)


def test_boundary_case_is_inadmissible():
    # left side equals 4 exactly; vP_min^2 / vS_max^2 = 4 as well
    b = ParameterBounds(rho=(1, 3), vS=(0.5, 1), tauS=(1, 1), vP=(2, 2.5), tauP=(1, 1))
    rep = check_parameter_domain(b.midpoint(), b, 0.5, dim=3)
    assert rep.composite_left == rep.composite_right == 4.0
    assert not rep.box_admissible
    assert not rep.admissible


def test_out_of_bounds_counted():
    pt = ParameterPoint(np.array([2.0, 3.0]), 1.0, 0.7, 3.0, 0.7)
    rep = check_parameter_domain(pt, BOX, ALPHA, dim=2)
    assert rep.violations["rho"] == 1
    assert not rep.admissible


# --- B, Q, V', V'' -----------------------------------------------------------

@pytest.mark.parametrize("dim", [2, 3])
def test_B_roundtrip_and_commutation(dim):
    rng = np.random.default_rng(9)
    taus = (0.7, 1.3)
    for _ in range(50):
        pt = rand_point(rng)
        mod = moduli_from_params(pt, ALPHA)
        cell = rand_cell(rng, dim)
        b = apply_B_point(mod, pt.tauS, pt.tauP, pt.rho, cell)
        back = apply_B_inv_point(mod, pt.tauS, pt.tauP, pt.rho, b)
        assert cell_diff(back, cell) <= 1e-13 * np.abs(cell.flat()).max()
        bq = apply_Q_point(taus, apply_B_point(mod, pt.tauS, pt.tauP, pt.rho, cell))
        qb = apply_B_point(mod, pt.tauS, pt.tauP, pt.rho, apply_Q_point(taus, cell))
        assert cell_diff(bq, qb) <= 1e-14 * max(1.0, np.abs(bq.flat()).max())
    zero = StateCell(cell.w, np.zeros_like(cell.psi))
    out = apply_B_point(mod, pt.tauS, pt.tauP, pt.rho, zero)
    np.testing.assert_allclose(out.w, pt.rho * cell.w)
    np.testing.assert_array_equal(out.psi, 0)


@pytest.mark.parametrize("dim", [2, 3])
def test_B_spectrum_within_box_bounds(dim):
    rng = np.random.default_rng(10)
    lo, hi = BOX.beta_range(ALPHA, dim)
    for _ in range(200):
        pt = rand_point(rng)
        mod = moduli_from_params(pt, ALPHA)
        cell = rand_cell(rng, dim)
        q = cell.inner(apply_B_point(mod, pt.tauS, pt.tauP, pt.rho, cell)) / cell.inner(cell)
        assert lo * (1 - 1e-12) <= q <= hi * (1 + 1e-12)


def _B_of(pt, cell):
    mod = moduli_from_params(pt, ALPHA)
    return apply_B_point(mod, pt.tauS, pt.tauP, pt.rho, cell)


@pytest.mark.parametrize("dim", [2, 3])
def test_V_prime_matches_fd(dim):
    rng = np.random.default_rng(11)
    h = 1e-4
    for _ in range(30):
        pt = rand_point(rng)
        ph = ParameterPoint(*rng.standard_normal(5))
        cell = rand_cell(rng, dim)
        exact = apply_V_prime_point(pt, ALPHA, ph, cell).flat()
        fd = (_B_of(pt.axpy(h, ph), cell).flat() - _B_of(pt.axpy(-h, ph), cell).flat()) / (2 * h)
        assert np.linalg.norm(fd - exact) <= 1e-6 * np.linalg.norm(exact)


def test_V_prime_density_only():
    rng = np.random.default_rng(12)
    pt = rand_point(rng)
    cell = rand_cell(rng, 2)
    out = apply_V_prime_point(pt, ALPHA, (1, 0, 0, 0, 0), cell)
    mod = moduli_from_params(pt, ALPHA)
    np.testing.assert_allclose(out.psi[0], -cinv_apply(mod.mu, mod.pi, cell.psi[0], 2) / pt.rho ** 2, rtol=1e-14)
    np.testing.assert_allclose(out.psi[1], -cinv_apply(pt.tauS * mod.mu, pt.tauP * mod.pi, cell.psi[1], 2)
                               / pt.rho ** 2, rtol=1e-14)
    assert np.all(apply_V_prime_point(pt, ALPHA, (0,) * 5, cell).flat() == 0)


@pytest.mark.parametrize("dim", [2, 3])
def test_V_second_symmetric_and_fd(dim):
    rng = np.random.default_rng(13)
    h = 1e-3
    for _ in range(30):
        pt = rand_point(rng)
        p1 = ParameterPoint(*(rng.uniform(-1, 1, 5) * BOX.widths()))
        p2 = ParameterPoint(*(rng.uniform(-1, 1, 5) * BOX.widths()))
        cell = rand_cell(rng, dim)
        s12 = apply_V_second_point(pt, ALPHA, p1, p2, cell).flat()
        s21 = apply_V_second_point(pt, ALPHA, p2, p1, cell).flat()
        np.testing.assert_allclose(s12, s21, atol=1e-14 * np.abs(s12).max())
        fd = (apply_V_prime_point(pt.axpy(h, p2), ALPHA, p1, cell).flat()
              - apply_V_prime_point(pt.axpy(-h, p2), ALPHA, p1, cell).flat()) / (2 * h)
        assert np.linalg.norm(fd - s12) <= 1e-5 * np.linalg.norm(s12)
    assert np.all(apply_V_second_point(pt, ALPHA, p1, (0,) * 5, cell).flat() == 0)
