"""Pointwise integrands of the gradient and second-order adjoint formulas.

Every quantity is a linear combination of the relaxed adjoint stress
``phi0`` and the memory sum ``S = sum_l phi_l`` whose coefficients depend on
the moduli ``(mu, pi)``, relaxation parameters ``(tauS, tauP, alpha)``,
density and (for second-order terms) the direction coefficients
``(rho_hat, mu~, pi~, mu^, pi^)``.

``variant="printed"`` reproduces the published closed forms verbatim,
including the dimension-specific coefficient sets.  ``variant="corrected"``
uses closed forms re-derived from the operator identities; the two differ
where the published forms are inconsistent with ``<V'(e_k) d, w>`` and
``<V''(phat, e_k) d, w>`` (see the tests for the cellwise comparison).

Tensors are component arrays with the component axis first (see
:mod:`viscoadjoint.rheology`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .rheology import (
    ParameterPoint,
    SingularMapError,
    frobenius,
    moduli_from_params,
    perturbation_coeffs,
    perturbation_second_coeffs,
    trace,
)

VARIANTS = ("printed", "corrected")


@dataclass(frozen=True)
class PointData:
    """Material parameters at a point (scalars or equally shaped arrays)."""

    point: ParameterPoint
    alpha: float
    dim: int = 2

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        mod = moduli_from_params(self.point, self.alpha)
        object.__setattr__(self, "_mu", mod.mu)
        object.__setattr__(self, "_pi", mod.pi)

    rho = property(lambda self: self.point.rho)
    vS = property(lambda self: self.point.vS)
    tauS = property(lambda self: self.point.tauS)
    vP = property(lambda self: self.point.vP)
    tauP = property(lambda self: self.point.tauP)
    mu = property(lambda self: self._mu)
    pi = property(lambda self: self._pi)

    @property
    def D(self):
        """Trace eigenvalue of ``C(mu, pi)``: ``3 pi - 4 mu`` (3D) or ``2 (pi - mu)`` (2D)."""
        return den(self.dim, self.mu, self.pi)

    @property
    def Dt(self):
        return den(self.dim, self.tauS * self.mu, self.tauP * self.pi)

    def direction(self, phat) -> "DirectionData":
        c = perturbation_coeffs(self.point, self.alpha, phat)
        return DirectionData(phat[0], *c)


class DirectionData(NamedTuple):
    """Direction-dependent coefficients at a point."""

    rho_hat: object
    mu_t: object
    pi_t: object
    mu_h: object
    pi_h: object


def den(dim, m, p):
    return 3.0 * p - 4.0 * m if dim == 3 else 2.0 * (p - m)


def check_denominators(pd: PointData, rtol: float = 1e-6):
    """Reject points where ``3 pi - 4 mu`` (or ``pi - mu``) nearly vanishes."""
    scale = float(np.max(np.abs(np.asarray(pd.pi, dtype=float))))
    for d in (pd.D, pd.Dt):
        if np.min(np.asarray(d, dtype=float)) < rtol * scale:
            raise SingularMapError("singular denominator in the adjoint integrands")


class SigmaQuantities(NamedTuple):
    v: np.ndarray
    tauS1: np.ndarray
    tauS2: np.ndarray
    tauP: np.ndarray


class GammaQuantities(NamedTuple):
    rho1: np.ndarray
    rho2: np.ndarray
    vS1: np.ndarray
    vS2: np.ndarray
    tauS0: np.ndarray
    tauS1: np.ndarray
    tauS2: np.ndarray
    vP1: np.ndarray
    vP2: np.ndarray
    tauP1: np.ndarray
    tauP2: np.ndarray


class UpsilonQuantities(NamedTuple):
    rho1: np.ndarray
    rho2: np.ndarray
    vS1: np.ndarray
    vS2: np.ndarray
    tauS1: np.ndarray
    tauS2: np.ndarray
    vP: np.ndarray
    tauP: np.ndarray


class KCoefficients(NamedTuple):
    K_mu: object
    K_mu_tau: object
    K_pi: object
    K_pi_tau: object
    K_S_phi: object
    K_S_Sigma: object
    K_P_phi: object
    K_P_Sigma: object


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


# ---------------------------------------------------------------------------
# first order

def sigma_quantities(pd: PointData, phi0, S) -> SigmaQuantities:
    D, Dt = pd.D, pd.Dt
    a, tS, tP = pd.alpha, pd.tauS, pd.tauP
    return SigmaQuantities(
        v=phi0 / D + tP / Dt * S,
        tauS1=-a / D * phi0 + tP / (tS * Dt) * S,
        tauS2=a * phi0 - S / tS,
        tauP=a / D * phi0 - S / Dt,
    )


def first_order_rows(pd: PointData, eps_v, vel_dot, phi0, S):
    """Integrand of the five gradient rows at one time.

    ``vel_dot`` is ``d_t v . w`` (already reduced to the cell), ``eps_v`` the
    strain of the forward velocity and ``phi0``, ``S`` the adjoint stresses.
    """
    dim = pd.dim
    sq = sigma_quantities(pd, phi0, S)
    div = trace(eps_v, dim)
    e_tot = frobenius(eps_v, phi0 + S, dim)
    rows = np.empty((5,) + np.shape(div))
    rows[0] = vel_dot - e_tot / pd.rho
    rows[1] = 2.0 / pd.vS * (-e_tot + pd.pi * trace(sq.v, dim) * div)
    rows[2] = (frobenius(eps_v, sq.tauS2, dim) + pd.pi * trace(sq.tauS1, dim) * div) / (1.0 + pd.alpha * pd.tauS)
    rows[3] = -2.0 * pd.pi / pd.vP * trace(sq.v, dim) * div
    rows[4] = pd.pi / (1.0 + pd.alpha * pd.tauP) * trace(sq.tauP, dim) * div
    return rows


# ---------------------------------------------------------------------------
# 2D K coefficients

def k_coefficients(pd: PointData, dd: DirectionData) -> KCoefficients:
    mu, pi, tS, tP = pd.mu, pd.pi, pd.tauS, pd.tauP
    r = dd.rho_hat / pd.rho
    m, p = tS * mu, tP * pi
    K_mu = (2 * pi * mu * dd.mu_t - dd.mu_t * pi ** 2 - dd.pi_t * mu ** 2) / (2 * mu * (pi - mu) ** 2)
    K_mu_tau = (2 * p * m * dd.mu_h - dd.mu_h * p ** 2 - dd.pi_h * m ** 2) / (2 * m * (p - m) ** 2)
    K_pi = (dd.pi_t - dd.mu_t) / (2 * (pi - mu) ** 2)
    K_pi_tau = (dd.pi_h - dd.mu_h) / (2 * (p - m) ** 2)
    K_S_phi = (2 * pi * mu * dd.mu_t - dd.mu_t * pi ** 2 - dd.pi_t * mu ** 2) / (mu * (pi - mu) ** 2) \
        - r * pi / (2 * (pi - mu))
    K_S_Sigma = (2 * p * m * dd.mu_h - dd.mu_h * p ** 2 - dd.pi_h * m ** 2) / (m * (p - m) ** 2) \
        - r * p / (2 * (p - m))
    K_P_phi = r / (2 * (pi - mu)) + (dd.pi_t - dd.mu_t) / (pi - mu) ** 2
    K_P_Sigma = r / (2 * (p - m)) + (dd.pi_h - dd.mu_h) / (p - m) ** 2
    return KCoefficients(K_mu, K_mu_tau, K_pi, K_pi_tau, K_S_phi, K_S_Sigma, K_P_phi, K_P_Sigma)


# ---------------------------------------------------------------------------
# cross terms (part 2 of the second-order adjoint)

def gamma_quantities(pd: PointData, dd: DirectionData, phi0, S) -> GammaQuantities:
    """The cross-term tensors exactly as published (dimension-specific)."""
    return _gamma_printed_3d(pd, dd, phi0, S) if pd.dim == 3 else _gamma_printed_2d(pd, dd, phi0, S)


def _gamma_common(pd, dd, phi0, S):
    mu, tS = pd.mu, pd.tauS
    r = dd.rho_hat / pd.rho
    a = pd.alpha
    rho1 = (r + dd.mu_t / mu) * phi0 + (r + dd.mu_h / (tS * mu)) * S
    tauS0 = -a * (r + dd.mu_t / mu) * phi0 + (dd.rho_hat / (tS * pd.rho) + dd.mu_h / (tS ** 2 * mu)) * S
    return rho1, tauS0


def _gamma_printed_3d(pd, dd, phi0, S):
    mu, pi, tS, tP, a = pd.mu, pd.pi, pd.tauS, pd.tauP, pd.alpha
    D, Dt = pd.D, pd.Dt
    r = dd.rho_hat / pd.rho
    mt, pt, mh, ph = dd.mu_t, dd.pi_t, dd.mu_h, dd.pi_h
    rho1, tauS0 = _gamma_common(pd, dd, phi0, S)
    rho2 = (mu * pt - mt * pi) / (mu * D) * phi0 + (tS * mu * ph - tP * mh * pi) / (tS * mu * Dt) * S
    ks = (3 * mt * pi ** 2 - 4 * pt * mu ** 2) / (mu * D ** 2)
    ksh = (3 * mh * tP ** 2 * pi ** 2 - 4 * ph * tS ** 2 * mu ** 2)
    kp = (3 * pt * pi ** 2 - 4 * mt * mu ** 2) / (mu ** 2 * D ** 2)
    kph = (3 * ph * tP ** 2 * pi ** 2 - 4 * mh * tS * mu ** 2) / (tS ** 2 * mu ** 2 * Dt ** 2)
    return GammaQuantities(
        rho1=rho1,
        rho2=rho2,
        vS1=pi / D * phi0 + tP * pi / Dt * S,
        vS2=(r * pi / D - ks) * phi0 + (r * tP * pi / Dt - ksh / (tS * mu * Dt ** 2)) * S,
        tauS0=tauS0,
        tauS1=-a * pi / D * phi0 + tP * pi / (tS * Dt) * S,
        tauS2=-a * (r * pi / D - ks) * phi0 + (r * tP * pi / (tS * Dt) - ksh / (tS ** 2 * mu * Dt ** 2)) * S,
        vP1=phi0 / D + tP / Dt * S,
        vP2=(r / D + kp) * phi0 + tP * (r / Dt + kph) * S,
        tauP1=a / D * phi0 - S / Dt,
        tauP2=a * (r / D + kp) * phi0 + (r / Dt + kph) * S,
    )


def _gamma_printed_2d(pd, dd, phi0, S):
    mu, pi, tS, tP, a = pd.mu, pd.pi, pd.tauS, pd.tauP, pd.alpha
    r = dd.rho_hat / pd.rho
    mt, pt, mh, ph = dd.mu_t, dd.pi_t, dd.mu_h, dd.pi_h
    K = k_coefficients(pd, dd)
    rho1, tauS0 = _gamma_common(pd, dd, phi0, S)
    dm = pi - mu
    dmt = tP * pi - tS * mu
    return GammaQuantities(
        rho1=rho1,
        rho2=(mu * pt - mt * pi) / (2 * mu * dm) * phi0 + (tS * mu * ph - tP * mh * pi) / (tS * mu * dmt) * S,
        vS1=pi / (2 * dm) * phi0 + tP * pi / (2 * dmt) * S,
        vS2=(r * pi / (2 * dm) - K.K_mu) * phi0 + (r * tP * pi / (2 * dmt) - K.K_mu_tau) * S,
        tauS0=tauS0,
        tauS1=-a * pi / (2 * dm) * phi0 + tP * pi / (2 * tS * dmt) * S,
        tauS2=-a * (r * pi / (2 * dm) - K.K_mu) * phi0 + (r * tP * pi / (2 * tS * dmt) - K.K_mu_tau / tS) * S,
        vP1=phi0 / (2 * dm) + tP / (2 * dmt) * S,
        vP2=(r / (2 * dm) + K.K_pi) * phi0 + tP * (r / (3 * tP * pi - 4 * tS * mu) + K.K_pi_tau) * S,
        tauP1=a / (2 * dm) * phi0 - S / (2 * dmt),
        tauP2=a * (r / (2 * dm) + K.K_pi) * phi0 + (r / (2 * dmt) + K.K_pi_tau) * S,
    )


def cross_rows(pd: PointData, phat, eps_v, eps_v1, vel_dot1, phi0, S, variant: str = "corrected"):
    """Integrand of the cross-term part (forward, linearised and first adjoint fields).

    ``eps_v1`` and ``vel_dot1`` (``d_t v1 . w``) come from the linearised run
    in direction ``phat``.
    """
    _check_variant(variant)
    if variant == "corrected":
        return _cross_rows_iso(pd, phat, eps_v, eps_v1, vel_dot1, phi0, S)
    dim = pd.dim
    dd = pd.direction(phat)
    vS, vP = pd.vS, pd.vP
    G = gamma_quantities(pd, dd, phi0, S)
    div, div1 = trace(eps_v, dim), trace(eps_v1, dim)
    e1 = frobenius(eps_v1, phi0 + S, dim)
    er = frobenius(eps_v, G.rho1, dim)
    rows = np.empty((5,) + np.shape(div))
    rows[0] = vel_dot1 - (e1 + er + trace(G.rho2, dim) * div) / pd.rho
    rows[1] = 2.0 / vS * (-e1 - er + trace(G.vS1, dim) * div1 + trace(G.vS2, dim) * div)
    rows[2] = (-frobenius(eps_v1, phi0 + S / pd.tauS, dim) - frobenius(eps_v, G.tauS0, dim)
               + trace(G.tauS1, dim) * div1 + trace(G.tauS2, dim) * div) / (1.0 + pd.alpha * pd.tauS)
    rows[3] = -2.0 * pd.pi / vP * (trace(G.vP1, dim) * div1 + trace(G.vP2, dim) * div)
    rows[4] = pd.pi / (1.0 + pd.alpha * pd.tauP) * (trace(G.tauP1, dim) * div1 - trace(G.tauP2, dim) * div)
    return rows


# ---------------------------------------------------------------------------
# second derivative of the material map (Upsilon part)

def upsilon_quantities(pd: PointData, dd: DirectionData, phi0, S) -> UpsilonQuantities:
    """The second-map tensors exactly as published (dimension-specific)."""
    return _upsilon_printed_3d(pd, dd, phi0, S) if pd.dim == 3 else _upsilon_printed_2d(pd, dd, phi0, S)


def _upsilon_printed_3d(pd, dd, phi0, S):
    mu, pi, tS, tP, a = pd.mu, pd.pi, pd.tauS, pd.tauP, pd.alpha
    D, Dt = pd.D, pd.Dt
    r = dd.rho_hat / pd.rho
    mt, pt, mh, ph = dd.mu_t, dd.pi_t, dd.mu_h, dd.pi_h
    ks = 2 * (3 * mt * pi ** 2 - 4 * pt * mu ** 2) / (mu * D ** 2) - r * pi / D
    ksh = 2 * (3 * mh * tP ** 2 * pi ** 2 - 4 * ph * tS ** 2 * mu ** 2)
    kp = r / D + 2 * (3 * pt * pi ** 2 - 4 * mt * mu ** 2) / (mu ** 2 * D ** 2)
    kph = r / Dt + 2 * (3 * ph * tP ** 2 * pi ** 2 - 4 * mh * tS ** 2 * mu ** 2) / (tS ** 2 * mu ** 2 * Dt ** 2)
    return UpsilonQuantities(
        rho1=(r + mt / mu) * phi0 + (r + mh / (tS * mu)) * S,
        rho2=(mu * pt - mt * pi) / (mu * D) * phi0 + (tS * mu * ph - tP * mh * pi) / (tS * mu * Dt) * S,
        vS1=(r + 2 * mt / mu) * phi0 + (r + 2 * mh / (tS * mu)) * S,
        vS2=ks * phi0 + (ksh / (tS * mu * Dt ** 2) - r * tP * pi / Dt) * S,
        tauS1=-a * (r + 2 * mt / mu) * phi0 + (dd.rho_hat / (tS * pd.rho) + 2 * mh / (tS ** 2 * mu)) * S,
        tauS2=-a * ks * phi0 + (ksh / (tS ** 2 * mu * Dt ** 2) - r * tP * pi / (tS * Dt)) * S,
        vP=kp * phi0 + tP * kph * S,
        tauP=-a * kp * phi0 + kph * S,
    )


def _upsilon_printed_2d(pd, dd, phi0, S):
    mu, pi, tS, tP, a = pd.mu, pd.pi, pd.tauS, pd.tauP, pd.alpha
    r = dd.rho_hat / pd.rho
    mt, pt, mh, ph = dd.mu_t, dd.pi_t, dd.mu_h, dd.pi_h
    K = k_coefficients(pd, dd)
    return UpsilonQuantities(
        rho1=(r + mt / mu) * phi0 + (r + mh / (tS * mu)) * S,
        rho2=(pt * mu - mt * pi) / (2 * mu * (pi - mu)) * phi0
        + (ph * tS * mu - mh * tP * pi) / (2 * tS * mu * (tP * pi - tS * mu)) * S,
        vS1=(r + 2 * mt / mu) * phi0 + (r + 2 * mh / (tS * mu)) * S,
        vS2=K.K_S_phi * phi0 + K.K_S_Sigma * S,
        tauS1=-a * (r + 2 * mt / mu) * phi0 + (dd.rho_hat / (tS * pd.rho) + 2 * mh / (tS ** 2 * mu)) * S,
        tauS2=-a * K.K_S_phi * phi0 + K.K_S_Sigma / tS * S,
        vP=K.K_P_phi * phi0 + tP * K.K_P_Sigma * S,
        tauP=-a * K.K_P_phi * phi0 + K.K_P_Sigma * S,
    )


def upsilon_rows(pd: PointData, phat, eps_v, phi0, S, variant: str = "corrected"):
    """Integrand of the second-map part (forward field and first adjoint)."""
    _check_variant(variant)
    if variant == "corrected":
        return _upsilon_rows_iso(pd, phat, eps_v, phi0, S)
    dim = pd.dim
    dd = pd.direction(phat)
    vS, vP = pd.vS, pd.vP
    U = upsilon_quantities(pd, dd, phi0, S)
    div = trace(eps_v, dim)
    rows = np.empty((5,) + np.shape(div))
    rows[0] = (frobenius(eps_v, U.rho1, dim) + trace(U.rho2, dim) * div) / pd.rho
    rows[1] = 2.0 / vS * (frobenius(eps_v, U.vS1, dim) + trace(U.vS2, dim) * div)
    rows[2] = (frobenius(eps_v, U.tauS1, dim) + trace(U.tauS2, dim) * div) / (1.0 + pd.alpha * pd.tauS)
    rows[3] = 2.0 * pd.pi / vP * trace(U.vP, dim) * div
    rows[4] = pd.pi / (1.0 + pd.alpha * pd.tauP) * trace(U.tauP, dim) * div
    return rows


# ---------------------------------------------------------------------------
# re-derived forms via isotropic eigenvalue algebra
#
# An isotropic map acts on deviators with eigenvalue ``s`` and on the
# identity with eigenvalue ``k``; compositions multiply eigenvalues, and
# <M eps, phi> = s eps:phi + (k - s)/dim tr(eps) tr(phi).

class Iso(NamedTuple):
    s: object
    k: object

    def __matmul__(self, other: "Iso") -> "Iso":
        return Iso(self.s * other.s, self.k * other.k)

    def __add__(self, other: "Iso") -> "Iso":
        return Iso(self.s + other.s, self.k + other.k)

    def __sub__(self, other: "Iso") -> "Iso":
        return Iso(self.s - other.s, self.k - other.k)

    def scale(self, a) -> "Iso":
        return Iso(a * self.s, a * self.k)

    def pair(self, eps, phi, dim):
        return self.s * frobenius(eps, phi, dim) + (self.k - self.s) / dim * trace(eps, dim) * trace(phi, dim)


def iso_C(m, p, dim) -> Iso:
    return Iso(2.0 * m, dim * p - 2.0 * (dim - 1) * m)


def iso_Cinv(m, p, dim) -> Iso:
    return Iso(1.0 / (2.0 * m), 1.0 / den(dim, m, p))


IDENTITY = Iso(1.0, 1.0)


def _unit(k):
    e = [0.0] * 5
    e[k] = 1.0
    return e


def _blocks(pd: PointData):
    """Base moduli of the relaxed block and of the (shared) memory block."""
    return ((pd.mu, pd.pi), (pd.tauS * pd.mu, pd.tauP * pd.pi))


def _deltas(dd: DirectionData):
    return ((dd.mu_t, dd.pi_t), (dd.mu_h, dd.pi_h))


def _cross_rows_iso(pd, phat, eps_v, eps_v1, vel_dot1, phi0, S):
    dim = pd.dim
    dd = pd.direction(phat)
    r = dd.rho_hat / pd.rho
    rows = np.zeros((5,) + np.shape(trace(eps_v, dim)))
    for k in range(5):
        ek = pd.direction(_unit(k))
        rk = ek.rho_hat / pd.rho
        for (m, p), delta, dk, phi in zip(_blocks(pd), _deltas(dd), _deltas(ek), (phi0, S)):
            ct = iso_Cinv(m, p, dim)
            # the linearised rate is rho C (eps1 + X eps) with X = r + C~ C(delta)
            X = IDENTITY.scale(r) + ct @ iso_C(*delta, dim)
            Hk = IDENTITY.scale(rk) + ct @ iso_C(*dk, dim)
            rows[k] -= Hk.pair(eps_v1, phi, dim) + (Hk @ X).pair(eps_v, phi, dim)
    rows[0] += vel_dot1
    return rows


def _upsilon_rows_iso(pd, phat, eps_v, phi0, S):
    dim = pd.dim
    dd = pd.direction(phat)
    r = dd.rho_hat / pd.rho
    rows = np.zeros((5,) + np.shape(trace(eps_v, dim)))
    for k in range(5):
        ek = pd.direction(_unit(k))
        rk = ek.rho_hat / pd.rho
        c12 = perturbation_second_coeffs(pd.point, pd.alpha, phat, _unit(k))
        for (m, p), delta, dk, d12, phi in zip(_blocks(pd), _deltas(dd), _deltas(ek),
                                               ((c12.mu_tilde, c12.pi_tilde), (c12.mu_hat, c12.pi_hat)),
                                               (phi0, S)):
            ct = iso_Cinv(m, p, dim)
            a1 = ct @ iso_C(*delta, dim)
            a2 = ct @ iso_C(*dk, dim)
            N = (IDENTITY.scale(2.0 * r * rk) - ct @ iso_C(*d12, dim)
                 + a2.scale(r) + a1.scale(rk) + a1 @ a2 + a2 @ a1)
            rows[k] += N.pair(eps_v, phi, dim)
    return rows
