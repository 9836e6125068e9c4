"""Pointwise material algebra for the GSLS viscoelastic model.

Symmetric tensors are stored as component arrays with the component axis
first: ``(xx, zz, xz)`` in 2D and ``(xx, yy, zz, yz, xz, xy)`` in 3D.  All
functions broadcast over trailing axes, so the same code serves single
cells and whole grids.  The Frobenius pairing weights off-diagonal
components by 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "SingularMapError",
    "InadmissibleError",
    "ncomp",
    "to_components",
    "from_components",
    "frobenius",
    "trace",
    "identity_components",
    "c_apply",
    "cinv_params",
    "cinv_apply",
    "cinv_deriv_apply",
    "cinv_second_apply",
    "IsotropicMap",
    "apply_isotropic_map",
    "invert_isotropic_map",
    "eigen_bounds",
    "apply_Cinv_derivative",
    "apply_Cinv_second",
    "RelaxationSpec",
    "compute_alpha",
    "ParameterPoint",
    "ParameterBounds",
    "DerivedBounds",
    "Moduli",
    "moduli_from_params",
    "PerturbationCoeffs",
    "perturbation_coeffs",
    "perturbation_second_coeffs",
    "AdmissibilityReport",
    "check_parameter_domain",
    "StateCell",
    "apply_B_point",
    "apply_B_inv_point",
    "apply_Q_point",
    "apply_V_prime_point",
    "apply_V_second_point",
]

PARAM_NAMES = ("rho", "vS", "tauS", "vP", "tauP")


class SingularMapError(ValueError):
    """Raised when an isotropic map is not invertible."""


class InadmissibleError(ValueError):
    """Raised when material parameters leave the admissible domain."""


# ---------------------------------------------------------------------------
# symmetric-tensor components

def ncomp(dim: int) -> int:
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    return dim * (dim + 1) // 2


def _offdiag_pairs(dim):
    return [(1, 0)] if dim == 2 else [(1, 2), (0, 2), (0, 1)]


def _weights(dim):
    w = np.ones(ncomp(dim))
    w[dim:] = 2.0
    return w


def to_components(M: np.ndarray, *, check: bool = True, rtol: float = 1e-12) -> np.ndarray:
    """Map ``(..., d, d)`` symmetric matrices to ``(ncomp, ...)`` components."""
    M = np.asarray(M, dtype=float)
    dim = M.shape[-1]
    if M.shape[-2] != dim:
        raise ValueError(f"expected square matrices, got shape {M.shape}")
    ncomp(dim)
    if check:
        asym = np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0)
        scale = max(np.max(np.abs(M), initial=0.0), 1e-300)
        if asym > rtol * scale:
            raise ValueError(f"matrix is not symmetric (relative asymmetry {asym / scale:.3e})")
    comps = [M[..., i, i] for i in range(dim)]
    comps += [M[..., i, j] for i, j in _offdiag_pairs(dim)]
    return np.stack(comps)


def from_components(c: np.ndarray, dim: int) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape[0] != ncomp(dim):
        raise ValueError(f"expected {ncomp(dim)} components for dim {dim}, got {c.shape[0]}")
    M = np.zeros(c.shape[1:] + (dim, dim))
    for i in range(dim):
        M[..., i, i] = c[i]
    for k, (i, j) in enumerate(_offdiag_pairs(dim)):
        M[..., i, j] = c[dim + k]
        M[..., j, i] = c[dim + k]
    return M


def frobenius(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """Pointwise Frobenius product of two component arrays."""
    out = a[0] * b[0]
    for k in range(1, dim):
        out = out + a[k] * b[k]
    for k in range(dim, ncomp(dim)):
        out = out + 2.0 * a[k] * b[k]
    return out


def trace(c: np.ndarray, dim: int) -> np.ndarray:
    out = c[0]
    for k in range(1, dim):
        out = out + c[k]
    return out


def identity_components(dim: int) -> np.ndarray:
    e = np.zeros(ncomp(dim))
    e[:dim] = 1.0
    return e


def c_apply(m, p, c: np.ndarray, dim: int) -> np.ndarray:
    """Apply ``C(m, p) M = 2m M + (p - 2m) tr(M) I`` in component form."""
    tr = trace(c, dim)
    out = 2.0 * m * c
    shift = (p - 2.0 * m) * tr
    out[:dim] = out[:dim] + shift
    return out


def _trace_eigenvalue(m, p, dim):
    # C(m,p) I = (2m + dim (p - 2m)) I
    return dim * p - 2.0 * (dim - 1) * m


def cinv_params(m, p, dim: int):
    """Parameters ``(m', p')`` with ``C(m', p') = C(m, p)^{-1}``."""
    m = np.asarray(m, dtype=float)
    p = np.asarray(p, dtype=float)
    s = _trace_eigenvalue(m, p, dim)
    if np.any(m == 0) or np.any(s == 0):
        raise SingularMapError(
            "isotropic map is singular (need m != 0 and "
            + ("3p != 4m)" if dim == 3 else "p != m)")
        )
    mi = 1.0 / (4.0 * m)
    if dim == 3:
        pi = (p - m) / (m * (3.0 * p - 4.0 * m))
    else:
        pi = p / (4.0 * m * (p - m))
    return mi, pi


def cinv_apply(m, p, c: np.ndarray, dim: int) -> np.ndarray:
    mi, pi = cinv_params(m, p, dim)
    return c_apply(mi, pi, c, dim)


def cinv_deriv_apply(m, p, mh, ph, c, dim):
    """Directional derivative of ``C~`` applied to ``c``: ``-C~ C(mh,ph) C~ c``."""
    return -cinv_apply(m, p, c_apply(mh, ph, cinv_apply(m, p, c, dim), dim), dim)


def cinv_second_apply(m, p, d1, d2, c, dim):
    """Second derivative of ``C~`` in directions ``d1 = (mh1, ph1)`` and ``d2``."""
    (m1, p1), (m2, p2) = d1, d2
    x = cinv_apply(m, p, c, dim)
    a = cinv_apply(m, p, c_apply(m1, p1, cinv_apply(m, p, c_apply(m2, p2, x, dim), dim), dim), dim)
    b = cinv_apply(m, p, c_apply(m2, p2, cinv_apply(m, p, c_apply(m1, p1, x, dim), dim), dim), dim)
    return a + b


# ---------------------------------------------------------------------------
# matrix-level isotropic maps

@dataclass(frozen=True)
class IsotropicMap:
    """The map ``C(m, p)`` acting on symmetric ``dim x dim`` matrices."""

    m: float
    p: float
    dim: int = 3

    def __post_init__(self):
        ncomp(self.dim)

    def __call__(self, M):
        return apply_isotropic_map(self, M)

    def inverse(self) -> "IsotropicMap":
        return invert_isotropic_map(self)

    def compose(self, other: "IsotropicMap") -> "IsotropicMap":
        """Return the isotropic map equal to ``self o other``."""
        if other.dim != self.dim:
            raise ValueError("cannot compose maps of different dimension")
        s2 = _trace_eigenvalue(other.m, other.p, self.dim)
        m = 2.0 * self.m * other.m
        shift = 2.0 * self.m * (other.p - 2.0 * other.m) + (self.p - 2.0 * self.m) * s2
        return IsotropicMap(m, shift + 2.0 * m, self.dim)

    def mandel(self) -> np.ndarray:
        """Matrix of the map in an orthonormal basis of symmetric matrices.

        Off-diagonal basis elements carry the factor ``sqrt(2)``, so the
        returned matrix is symmetric exactly when the map is self-adjoint.
        """
        n = ncomp(self.dim)
        s = np.sqrt(_weights(self.dim))
        out = np.empty((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0 / s[k]
            out[:, k] = c_apply(self.m, self.p, e, self.dim) * s
        return out


def _check_matrix(M, dim):
    M = np.asarray(M, dtype=float)
    if M.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got shape {M.shape}")
    return M


def apply_isotropic_map(cmap: IsotropicMap, M) -> np.ndarray:
    M = _check_matrix(M, cmap.dim)
    c = to_components(M)
    return from_components(c_apply(cmap.m, cmap.p, c, cmap.dim), cmap.dim)


def invert_isotropic_map(cmap: IsotropicMap) -> IsotropicMap:
    mi, pi = cinv_params(cmap.m, cmap.p, cmap.dim)
    return IsotropicMap(float(mi), float(pi), cmap.dim)


def eigen_bounds(cmap: IsotropicMap) -> tuple[float, float]:
    """Smallest and largest eigenvalue of ``C(m, p)`` on symmetric matrices."""
    s = _trace_eigenvalue(cmap.m, cmap.p, cmap.dim)
    return float(min(2.0 * cmap.m, s)), float(max(2.0 * cmap.m, s))


def apply_Cinv_derivative(m, p, mh, ph, M, dim: int = 3) -> np.ndarray:
    c = to_components(_check_matrix(M, dim))
    return from_components(cinv_deriv_apply(m, p, mh, ph, c, dim), dim)


def apply_Cinv_second(m, p, d1, d2, M, dim: int = 3) -> np.ndarray:
    c = to_components(_check_matrix(M, dim))
    return from_components(cinv_second_apply(m, p, d1, d2, c, dim), dim)


# ---------------------------------------------------------------------------
# relaxation and parameters

@dataclass(frozen=True)
class RelaxationSpec:
    """Stress relaxation times of the ``L`` mechanisms and centre frequency."""

    tau_sigma: tuple
    omega0: float
    alpha: float = field(init=False)

    def __post_init__(self):
        taus = tuple(float(t) for t in np.atleast_1d(self.tau_sigma))
        if not 1 <= len(taus) <= 5:
            raise ValueError(f"need 1 to 5 relaxation mechanisms, got {len(taus)}")
        if min(taus) <= 0 or self.omega0 <= 0:
            raise ValueError("relaxation times and omega0 must be positive")
        object.__setattr__(self, "tau_sigma", taus)
        object.__setattr__(self, "alpha", compute_alpha(self))

    @property
    def L(self) -> int:
        return len(self.tau_sigma)


def compute_alpha(spec: RelaxationSpec) -> float:
    taus = np.asarray(spec.tau_sigma, dtype=float)
    if np.any(taus <= 0) or spec.omega0 <= 0:
        raise ValueError("relaxation times and omega0 must be positive")
    x = (spec.omega0 * taus) ** 2
    return float(np.sum(x / (1.0 + x)))


class ParameterPoint(NamedTuple):
    """The five FWI parameters; entries may be scalars or equally shaped arrays."""

    rho: object
    vS: object
    tauS: object
    vP: object
    tauP: object

    def axpy(self, a: float, direction: "ParameterPoint") -> "ParameterPoint":
        """Return ``self + a * direction``."""
        return ParameterPoint(*(x + a * d for x, d in zip(self, direction)))

    def scaled(self, a: float) -> "ParameterPoint":
        return ParameterPoint(*(a * x for x in self))


@dataclass(frozen=True)
class DerivedBounds:
    mu_min: float
    mu_max: float
    pi_min: float
    pi_max: float
    m_lo: float
    m_hi: float
    p_lo: float
    p_hi: float


@dataclass(frozen=True)
class ParameterBounds:
    """Box bounds ``(min, max)`` for each parameter."""

    rho: tuple
    vS: tuple
    tauS: tuple
    vP: tuple
    tauP: tuple

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"bounds for {name} must satisfy 0 < min <= max, got {(lo, hi)}")

    def lower(self) -> ParameterPoint:
        return ParameterPoint(*(getattr(self, n)[0] for n in PARAM_NAMES))

    def upper(self) -> ParameterPoint:
        return ParameterPoint(*(getattr(self, n)[1] for n in PARAM_NAMES))

    def widths(self) -> ParameterPoint:
        return ParameterPoint(*(getattr(self, n)[1] - getattr(self, n)[0] for n in PARAM_NAMES))

    def midpoint(self) -> ParameterPoint:
        return ParameterPoint(*(0.5 * sum(getattr(self, n)) for n in PARAM_NAMES))

    def derived(self, alpha: float) -> DerivedBounds:
        mu_min = self.rho[0] * self.vS[0] ** 2 / (1.0 + self.tauS[1] * alpha)
        mu_max = self.rho[1] * self.vS[1] ** 2 / (1.0 + self.tauS[0] * alpha)
        pi_min = self.rho[0] * self.vP[0] ** 2 / (1.0 + self.tauP[1] * alpha)
        pi_max = self.rho[1] * self.vP[1] ** 2 / (1.0 + self.tauP[0] * alpha)
        return DerivedBounds(
            mu_min, mu_max, pi_min, pi_max,
            m_lo=mu_min * min(1.0, self.tauS[0]),
            m_hi=mu_max * max(1.0, self.tauS[1]),
            p_lo=pi_min * min(1.0, self.tauP[0]),
            p_hi=pi_max * max(1.0, self.tauP[1]),
        )

    def composite_sides(self, alpha: float, dim: int = 3) -> tuple[float, float]:
        """Both sides of the wave-speed inequality that makes ``D(C)`` non-empty.

        In 3D the condition ``3 p_lo > 4 m_hi`` is equivalent to
        ``left < right``; the 2D analogue ``p_lo > m_hi`` drops the factor 4/3.
        """
        factor = 4.0 / 3.0 if dim == 3 else 1.0
        left = (factor * (self.rho[1] / self.rho[0])
                * (1.0 + self.tauP[1] * alpha) / (1.0 + self.tauS[0] * alpha)
                * max(1.0, self.tauS[1]) / min(1.0, self.tauP[0]))
        right = self.vP[0] ** 2 / self.vS[1] ** 2
        return left, right

    def admissible(self, alpha: float, dim: int = 3) -> bool:
        d = self.derived(alpha)
        if dim == 3:
            return bool(3.0 * d.p_lo > 4.0 * d.m_hi)
        return bool(d.p_lo > d.m_hi)

    def beta_range(self, alpha: float, dim: int = 3) -> tuple[float, float]:
        """Spectral enclosure ``[beta-, beta+]`` of ``B`` over the whole box."""
        d = self.derived(alpha)
        lo_c, hi_c = _c_bounds_over_box(d, dim)
        return min(self.rho[0], 1.0 / hi_c), max(self.rho[1], 1.0 / lo_c)


def _c_bounds_over_box(d: DerivedBounds, dim):
    if dim == 3:
        lo = min(2.0 * d.m_lo, 3.0 * d.p_lo - 4.0 * d.m_hi)
        hi = max(2.0 * d.m_hi, 3.0 * d.p_hi - 4.0 * d.m_lo)
    else:
        lo = min(2.0 * d.m_lo, 2.0 * (d.p_lo - d.m_hi))
        hi = max(2.0 * d.m_hi, 2.0 * (d.p_hi - d.m_lo))
    return lo, hi


@dataclass(frozen=True)
class Moduli:
    mu0: object
    pi0: object
    mu: object
    pi: object


def moduli_from_params(pt: ParameterPoint, alpha: float) -> Moduli:
    rho, vS, tauS, vP, tauP = (np.asarray(x, dtype=float) for x in pt)
    if np.any(rho <= 0) or np.any(vS <= 0) or np.any(vP <= 0):
        raise InadmissibleError("density and velocities must be positive")
    mu = vS ** 2 / (1.0 + tauS * alpha)
    pi = vP ** 2 / (1.0 + tauP * alpha)
    return Moduli(mu0=rho * mu, pi0=rho * pi, mu=mu, pi=pi)


class PerturbationCoeffs(NamedTuple):
    mu_tilde: object
    pi_tilde: object
    mu_hat: object
    pi_hat: object


def perturbation_coeffs(pt: ParameterPoint, alpha: float, phat, form: str = "velocity") -> PerturbationCoeffs:
    """Linearized changes of ``(mu, pi)`` and ``(tauS mu, tauP pi)``.

    ``form="velocity"`` evaluates the expressions in ``(vS, vP)``;
    ``form="moduli"`` uses the equivalent expressions in ``(mu, pi)``.
    The density component of ``phat`` does not enter.
    """
    _, vS, tauS, vP, tauP = pt
    _, vSh, tauSh, vPh, tauPh = phat
    dS = 1.0 + tauS * alpha
    dP = 1.0 + tauP * alpha
    if form == "velocity":
        mu_t = 2.0 * vS / dS * vSh - alpha * vS ** 2 / dS ** 2 * tauSh
        pi_t = 2.0 * vP / dP * vPh - alpha * vP ** 2 / dP ** 2 * tauPh
        mu_h = 2.0 * tauS * vS / dS * vSh + vS ** 2 / dS ** 2 * tauSh
        pi_h = 2.0 * tauP * vP / dP * vPh + vP ** 2 / dP ** 2 * tauPh
    elif form == "moduli":
        mu = vS ** 2 / dS
        pi = vP ** 2 / dP
        mu_t = 2.0 * mu / vS * vSh - alpha * mu / dS * tauSh
        pi_t = 2.0 * pi / vP * vPh - alpha * pi / dP * tauPh
        mu_h = 2.0 * tauS * mu / vS * vSh + mu / dS * tauSh
        pi_h = 2.0 * tauP * pi / vP * vPh + pi / dP * tauPh
    else:
        raise ValueError(f"unknown form {form!r}")
    return PerturbationCoeffs(mu_t, pi_t, mu_h, pi_h)


def perturbation_second_coeffs(pt: ParameterPoint, alpha: float, phat1, phat2) -> PerturbationCoeffs:
    """Second derivatives of ``(mu, pi, tauS mu, tauP pi)`` in two directions.

    These curvature terms vanish for pure density perturbations but not in
    general, since ``mu = vS^2 / (1 + tauS alpha)`` is not affine in
    ``(vS, tauS)``.
    """
    _, vS, tauS, vP, tauP = pt

    def relaxed(v, t, v1, t1, v2, t2):
        d = 1.0 + t * alpha
        return (2.0 * v1 * v2 / d - 2.0 * alpha * v * (v1 * t2 + v2 * t1) / d ** 2
                + 2.0 * alpha ** 2 * v ** 2 * t1 * t2 / d ** 3)

    def scaled(v, t, v1, t1, v2, t2):
        d = 1.0 + t * alpha
        return (2.0 * t * v1 * v2 / d + 2.0 * v * (v1 * t2 + v2 * t1) / d ** 2
                - 2.0 * alpha * v ** 2 * t1 * t2 / d ** 3)

    s = (vS, tauS, phat1[1], phat1[2], phat2[1], phat2[2])
    p = (vP, tauP, phat1[3], phat1[4], phat2[3], phat2[4])
    return PerturbationCoeffs(relaxed(*s), relaxed(*p), scaled(*s), scaled(*p))


# ---------------------------------------------------------------------------
# admissibility

@dataclass
class AdmissibilityReport:
    violations: dict
    relaxed_in_DC: bool
    memory_in_DC: bool
    box_admissible: bool
    composite_left: float
    composite_right: float
    margin_ok: bool = True

    @property
    def admissible(self) -> bool:
        return (not any(self.violations.values()) and self.relaxed_in_DC
                and self.memory_in_DC and self.box_admissible)

    def summary(self) -> str:
        bad = [k for k, v in self.violations.items() if v]
        parts = [f"admissible={self.admissible}"]
        if bad:
            parts.append("out of bounds: " + ", ".join(f"{k} ({self.violations[k]} cells)" for k in bad))
        if not self.box_admissible:
            parts.append(f"box violates wave-speed condition ({self.composite_left:.6g} >= {self.composite_right:.6g})")
        if not self.relaxed_in_DC:
            parts.append("(mu0, pi0) outside D(C)")
        if not self.memory_in_DC:
            parts.append("(tauS mu0, tauP pi0) outside D(C)")
        return "; ".join(parts)


def check_parameter_domain(pt: ParameterPoint, bounds: ParameterBounds, alpha: float,
                           dim: int = 3, margin: float = 0.0) -> AdmissibilityReport:
    """Report bound violations and membership of the induced moduli in ``D(C)``.

    ``margin`` is a fraction of each box width that values must keep from
    the bounds (interior-point check for derivative evaluations).
    """
    violations = {}
    for name, x in zip(PARAM_NAMES, pt):
        lo, hi = getattr(bounds, name)
        pad = margin * (hi - lo)
        x = np.asarray(x, dtype=float)
        violations[name] = int(np.count_nonzero((x < lo + pad) | (x > hi - pad)))
    d = bounds.derived(alpha)
    box_ok = bounds.admissible(alpha, dim)
    left, right = bounds.composite_sides(alpha, dim)
    # cross-multiplied form of left < right avoids rounding at the boundary
    factor_num, factor_den = (4.0, 3.0) if dim == 3 else (1.0, 1.0)
    lhs = (factor_num * bounds.rho[1] * (1.0 + bounds.tauP[1] * alpha) * max(1.0, bounds.tauS[1])
           * bounds.vS[1] ** 2)
    rhs = (factor_den * bounds.rho[0] * (1.0 + bounds.tauS[0] * alpha) * min(1.0, bounds.tauP[0])
           * bounds.vP[0] ** 2)
    box_ok = box_ok and lhs < rhs

    mod = moduli_from_params(pt, alpha)
    tol = 1e-12

    def in_dc(m, p):
        m = np.asarray(m)
        p = np.asarray(p)
        return bool(np.all(m >= d.m_lo * (1 - tol)) and np.all(m <= d.m_hi * (1 + tol))
                    and np.all(p >= d.p_lo * (1 - tol)) and np.all(p <= d.p_hi * (1 + tol)))

    relaxed = in_dc(mod.mu0, mod.pi0)
    memory = in_dc(np.asarray(pt.tauS) * mod.mu0, np.asarray(pt.tauP) * mod.pi0)
    return AdmissibilityReport(violations, relaxed, memory, box_ok, left, right)


# ---------------------------------------------------------------------------
# the operators B, Q, V', V'' on a single state cell

@dataclass
class StateCell:
    """One spatial point of a state ``(w, psi_0, ..., psi_L)``.

    ``w`` has shape ``(dim, ...)`` and ``psi`` shape ``(L+1, ncomp, ...)``.
    """

    w: np.ndarray
    psi: np.ndarray

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def inner(self, other: "StateCell") -> np.ndarray:
        dim = self.dim
        out = np.sum(self.w * other.w, axis=0)
        for a, b in zip(self.psi, other.psi):
            out = out + frobenius(a, b, dim)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w.ravel(), self.psi.ravel()])


def _check_moduli(m, p, dim):
    s = _trace_eigenvalue(np.asarray(m), np.asarray(p), dim)
    if np.any(np.asarray(m) <= 0) or np.any(s <= 0):
        raise InadmissibleError("moduli outside the invertibility region")


def apply_B_point(mod: Moduli, tauS, tauP, rho, cell: StateCell, dim: int | None = None) -> StateCell:
    dim = dim or cell.dim
    _check_moduli(mod.mu0, mod.pi0, dim)
    _check_moduli(tauS * mod.mu0, tauP * mod.pi0, dim)
    psi = np.empty_like(cell.psi, dtype=float)
    psi[0] = cinv_apply(mod.mu0, mod.pi0, cell.psi[0], dim)
    for l in range(1, cell.psi.shape[0]):
        psi[l] = cinv_apply(tauS * mod.mu0, tauP * mod.pi0, cell.psi[l], dim)
    return StateCell(rho * cell.w, psi)


def apply_B_inv_point(mod: Moduli, tauS, tauP, rho, cell: StateCell, dim: int | None = None) -> StateCell:
    dim = dim or cell.dim
    psi = np.empty_like(cell.psi, dtype=float)
    psi[0] = c_apply(mod.mu0, mod.pi0, cell.psi[0], dim)
    for l in range(1, cell.psi.shape[0]):
        psi[l] = c_apply(tauS * mod.mu0, tauP * mod.pi0, cell.psi[l], dim)
    return StateCell(cell.w / rho, psi)


def apply_Q_point(tau_sigma: Sequence[float], cell: StateCell) -> StateCell:
    psi = np.zeros_like(cell.psi, dtype=float)
    for l, ts in enumerate(tau_sigma, start=1):
        psi[l] = cell.psi[l] / ts
    return StateCell(np.zeros_like(cell.w, dtype=float), psi)


def apply_V_prime_point(pt: ParameterPoint, alpha: float, phat, cell: StateCell,
                        dim: int | None = None) -> StateCell:
    """Apply the derivative of the parameter-to-``B`` map in direction ``phat``."""
    dim = dim or cell.dim
    rho = pt.rho
    rh = phat[0]
    mod = moduli_from_params(pt, alpha)
    mu, pi = mod.mu, mod.pi
    mt, pt_, mh, ph = perturbation_coeffs(pt, alpha, phat)
    tS, tP = pt.tauS, pt.tauP
    psi = np.empty_like(cell.psi, dtype=float)
    psi[0] = (-rh / rho ** 2 * cinv_apply(mu, pi, cell.psi[0], dim)
              + cinv_deriv_apply(mu, pi, mt, pt_, cell.psi[0], dim) / rho)
    for l in range(1, cell.psi.shape[0]):
        psi[l] = (-rh / rho ** 2 * cinv_apply(tS * mu, tP * pi, cell.psi[l], dim)
                  + cinv_deriv_apply(tS * mu, tP * pi, mh, ph, cell.psi[l], dim) / rho)
    return StateCell(rh * cell.w, psi)


def apply_V_second_point(pt: ParameterPoint, alpha: float, phat1, phat2, cell: StateCell,
                         dim: int | None = None) -> StateCell:
    """Apply the second derivative of the parameter-to-``B`` map.

    The density block is ``2 rho1 rho2 / rho^3 C~`` (second derivative of
    ``1/rho``), and besides the bilinear terms in the first-order
    coefficients this carries ``(1/rho) C~'[d12]`` with ``d12`` from
    :func:`perturbation_second_coeffs`.
    """
    dim = dim or cell.dim
    rho = pt.rho
    r1, r2 = phat1[0], phat2[0]
    mod = moduli_from_params(pt, alpha)
    mu, pi = mod.mu, mod.pi
    c1 = perturbation_coeffs(pt, alpha, phat1)
    c2 = perturbation_coeffs(pt, alpha, phat2)
    tS, tP = pt.tauS, pt.tauP

    c12 = perturbation_second_coeffs(pt, alpha, phat1, phat2)

    def block(m, p, d1, d2, d12, x):
        return (2.0 * r1 * r2 / rho ** 3 * cinv_apply(m, p, x, dim)
                + cinv_deriv_apply(m, p, d12[0], d12[1], x, dim) / rho
                - r1 / rho ** 2 * cinv_deriv_apply(m, p, d2[0], d2[1], x, dim)
                - r2 / rho ** 2 * cinv_deriv_apply(m, p, d1[0], d1[1], x, dim)
                + cinv_second_apply(m, p, d1, d2, x, dim) / rho)

    psi = np.empty_like(cell.psi, dtype=float)
    psi[0] = block(mu, pi, (c1.mu_tilde, c1.pi_tilde), (c2.mu_tilde, c2.pi_tilde),
                   (c12.mu_tilde, c12.pi_tilde), cell.psi[0])
    for l in range(1, cell.psi.shape[0]):
        psi[l] = block(tS * mu, tP * pi, (c1.mu_hat, c1.pi_hat), (c2.mu_hat, c2.pi_hat),
                       (c12.mu_hat, c12.pi_hat), cell.psi[l])
    return StateCell(np.zeros_like(cell.w, dtype=float), psi)
