"""Two-dimensional viscoelastic wave solver with exact discrete structure.

Velocities live on grid nodes and every stress component lives at cell
centres (rotated staggered arrangement), so the isotropic material maps act
pointwise per cell.  The divergence is the negative adjoint of the strain
operator under the grid inner product, which makes the discrete ``A``
skew-symmetric to rounding error.

A state is a flat vector holding the node velocities ``(2, nx+1, nz+1)``
followed by the stresses ``(L+1, 3, nx, nz)`` with components
``(xx, zz, xz)``.  Time stepping is classical RK4 with forcing sampled on
the half-step grid.  Linearised and second-order runs differentiate the
discrete one-step map stage by stage, so they are exact derivatives of
:func:`run_forward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rheology as rh
from .rheology import (
    InadmissibleError,
    ParameterBounds,
    ParameterPoint,
    RelaxationSpec,
    c_apply,
    cinv_apply,
    frobenius,
)

DIM = 2
NCOMP = 3
SIDES = ("left", "right", "top", "bottom")
BOUNDARY_KINDS = ("dirichlet", "free")

# desk-scale storage cap
MAX_CELLS = 128 * 128
MAX_STEPS = 2000
MAX_MECHANISMS = 3


class CFLError(RuntimeError):
    """Raised for time steps outside the stability region or blow-up."""


class SmoothnessError(ValueError):
    """Source too rough for second derivatives of the wavefield."""


class GridError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grid and parameter fields

@dataclass(frozen=True)
class Grid2D:
    """Uniform grid of ``nx x nz`` cells with spacing ``h``.

    ``boundary`` maps each side to ``"dirichlet"`` (v = 0) or ``"free"``
    (traction-free, imposed weakly through the transpose construction).
    The top side is ``z = 0`` (node row ``j = 0``).
    """

    nx: int
    nz: int
    h: float
    boundary: tuple = (("left", "dirichlet"), ("right", "dirichlet"),
                       ("top", "dirichlet"), ("bottom", "dirichlet"))

    def __post_init__(self):
        if self.nx < 1 or self.nz < 1 or not self.h > 0:
            raise GridError("grid needs positive cell counts and spacing")
        spec = dict(self.boundary)
        if set(spec) != set(SIDES):
            raise GridError(f"boundary must name each of {SIDES} exactly once")
        for side, kind in spec.items():
            if kind not in BOUNDARY_KINDS:
                raise GridError(f"unknown boundary kind {kind!r} on {side}")
        object.__setattr__(self, "boundary", tuple((s, spec[s]) for s in SIDES))

    @classmethod
    def box(cls, nx: int, nz: int, h: float, free_surface: bool = False) -> "Grid2D":
        top = "free" if free_surface else "dirichlet"
        return cls(nx, nz, h, (("left", "dirichlet"), ("right", "dirichlet"),
                               ("top", top), ("bottom", "dirichlet")))

    def side(self, name: str) -> str:
        return dict(self.boundary)[name]

    @property
    def node_shape(self):
        return (self.nx + 1, self.nz + 1)

    @property
    def cell_shape(self):
        return (self.nx, self.nz)

    def require_solver_size(self):
        if self.nx < 8 or self.nz < 8:
            raise GridError(f"solver paths need nx, nz >= 8, got {self.nx} x {self.nz}")
        if self.nx * self.nz > MAX_CELLS:
            raise GridError(f"grid {self.nx} x {self.nz} exceeds the in-memory cap of {MAX_CELLS} cells")

    def node_mask(self) -> np.ndarray:
        """1 where the node velocity is unknown, 0 on Dirichlet sides."""
        m = np.ones(self.node_shape)
        if self.side("left") == "dirichlet":
            m[0, :] = 0.0
        if self.side("right") == "dirichlet":
            m[-1, :] = 0.0
        if self.side("top") == "dirichlet":
            m[:, 0] = 0.0
        if self.side("bottom") == "dirichlet":
            m[:, -1] = 0.0
        return m

    def node_cell_count(self) -> np.ndarray:
        c = np.zeros(self.node_shape)
        c[:-1, :-1] += 1
        c[1:, :-1] += 1
        c[:-1, 1:] += 1
        c[1:, 1:] += 1
        return c

    def cell_centres(self):
        x = (np.arange(self.nx) + 0.5) * self.h
        z = (np.arange(self.nz) + 0.5) * self.h
        return np.meshgrid(x, z, indexing="ij")


@dataclass(frozen=True)
class ParameterField:
    """The five material grids ``(rho, vS, tauS, vP, tauP)`` on the cells.

    ``values`` has shape ``(5, nx, nz)``.  Directions of perturbation use the
    same type with ``bounds=None``.
    """

    values: np.ndarray
    bounds: ParameterBounds | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3 or v.shape[0] != 5:
            raise ValueError(f"parameter field must have shape (5, nx, nz), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter field has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def homogeneous(cls, grid: Grid2D, pt: ParameterPoint, bounds: ParameterBounds | None = None):
        vals = np.stack([np.full(grid.cell_shape, float(x)) for x in pt])
        return cls(vals, bounds)

    @classmethod
    def zeros(cls, grid: Grid2D):
        return cls(np.zeros((5,) + grid.cell_shape))

    @property
    def shape(self):
        return self.values.shape[1:]

    def point(self) -> ParameterPoint:
        return ParameterPoint(*self.values)

    def axpy(self, a: float, d: "ParameterField") -> "ParameterField":
        return ParameterField(self.values + a * d.values, self.bounds)

    def scaled(self, a: float) -> "ParameterField":
        return ParameterField(a * self.values, self.bounds)

    def dot(self, other: "ParameterField", h: float) -> float:
        """``sum_k int_D a_k b_k`` with cell quadrature weight ``h^2``."""
        return float(h * h * np.sum(self.values * other.values))

    def check(self, relax: RelaxationSpec, margin: float = 0.0) -> rh.AdmissibilityReport:
        if self.bounds is None:
            raise InadmissibleError("parameter field carries no bounds")
        return rh.check_parameter_domain(self.point(), self.bounds, relax.alpha, dim=DIM, margin=margin)


# ---------------------------------------------------------------------------
# difference operators (pure functions on arrays)

def _dx(u, h):
    return (u[1:, 1:] + u[1:, :-1] - u[:-1, 1:] - u[:-1, :-1]) / (2.0 * h)


def _dz(u, h):
    return (u[1:, 1:] + u[:-1, 1:] - u[1:, :-1] - u[:-1, :-1]) / (2.0 * h)


def _dx_t(c, h):
    out = np.zeros((c.shape[0] + 1, c.shape[1] + 1))
    out[1:, 1:] += c
    out[1:, :-1] += c
    out[:-1, 1:] -= c
    out[:-1, :-1] -= c
    return out / (2.0 * h)


def _dz_t(c, h):
    out = np.zeros((c.shape[0] + 1, c.shape[1] + 1))
    out[1:, 1:] += c
    out[:-1, 1:] += c
    out[1:, :-1] -= c
    out[:-1, :-1] -= c
    return out / (2.0 * h)


def cell_average_to_nodes(c: np.ndarray, count: np.ndarray) -> np.ndarray:
    """Average cell values onto nodes (mean over the adjacent cells)."""
    out = np.zeros(count.shape)
    out[:-1, :-1] += c
    out[1:, :-1] += c
    out[:-1, 1:] += c
    out[1:, 1:] += c
    return out / count


def corner_sum(n: np.ndarray) -> np.ndarray:
    """Sum node values over the four corners of every cell."""
    return n[:-1, :-1] + n[1:, :-1] + n[:-1, 1:] + n[1:, 1:]


# ---------------------------------------------------------------------------
# discrete operators

@dataclass(frozen=True)
class StateLayout:
    nx: int
    nz: int
    L: int

    @property
    def nv(self) -> int:
        return 2 * (self.nx + 1) * (self.nz + 1)

    @property
    def ns(self) -> int:
        return (self.L + 1) * NCOMP * self.nx * self.nz

    @property
    def size(self) -> int:
        return self.nv + self.ns

    def split(self, u: np.ndarray):
        """Views ``(v, s)`` of a flat state (or of a stack of states)."""
        lead = u.shape[:-1]
        v = u[..., :self.nv].reshape(lead + (2, self.nx + 1, self.nz + 1))
        s = u[..., self.nv:].reshape(lead + (self.L + 1, NCOMP, self.nx, self.nz))
        return v, s

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def join(self, v, s) -> np.ndarray:
        return np.concatenate([np.ravel(v), np.ravel(s)])


@dataclass(frozen=True, eq=False)
class DiscreteOperators:
    """Grid operators ``A``, ``B``, ``Q`` and the grid inner product.

    Stress blocks are given by isotropic-map parameters per cell:
    ``mods[l] = (m_l, p_l)`` are the relaxed (``l = 0``) or memory moduli
    *without* the density factor, so that the ``B`` block reads
    ``(1/rho) C~(m_l, p_l)``.
    """

    grid: Grid2D
    field: ParameterField
    relax: RelaxationSpec
    layout: StateLayout
    mask: np.ndarray
    count: np.ndarray
    node_weight: np.ndarray
    rho_c: np.ndarray
    rho_n: np.ndarray
    mods: tuple
    decay: np.ndarray
    weights: np.ndarray
    dt_max: float

    # -- structure --------------------------------------------------------
    @property
    def L(self) -> int:
        return self.relax.L

    @property
    def h(self) -> float:
        return self.grid.h

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Grid inner product (node weights, ``h^2`` and Frobenius on cells)."""
        return float(np.dot(a * self.weights, b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def eps(self, v: np.ndarray) -> np.ndarray:
        """Discrete strain ``(xx, zz, xz)`` of a node velocity field."""
        h = self.h
        vx = v[0] * self.mask
        vz = v[1] * self.mask
        out = np.empty((NCOMP,) + self.grid.cell_shape)
        out[0] = _dx(vx, h)
        out[1] = _dz(vz, h)
        out[2] = 0.5 * (_dz(vx, h) + _dx(vz, h))
        return out

    def div(self, s: np.ndarray) -> np.ndarray:
        """Negative grid adjoint of :meth:`eps` applied to one stress field."""
        h = self.h
        scale = self.mask * (h * h) / self.node_weight
        out = np.empty((2,) + self.grid.node_shape)
        out[0] = -scale * (_dx_t(s[0], h) + _dz_t(s[2], h))
        out[1] = -scale * (_dx_t(s[2], h) + _dz_t(s[1], h))
        return out

    def apply_A(self, u: np.ndarray) -> np.ndarray:
        v, s = self.layout.split(u)
        out = np.empty_like(u)
        ov, os_ = self.layout.split(out)
        ov[:] = -self.div(s.sum(axis=0))
        os_[:] = -self.eps(v)[None]
        return out

    def apply_B(self, u: np.ndarray) -> np.ndarray:
        v, s = self.layout.split(u)
        out = np.empty_like(u)
        ov, os_ = self.layout.split(out)
        ov[:] = self.rho_n * v
        for l, (m, p) in enumerate(self.mods):
            os_[l] = cinv_apply(m, p, s[l], DIM) / self.rho_c
        return out

    def apply_Binv(self, u: np.ndarray) -> np.ndarray:
        v, s = self.layout.split(u)
        out = np.empty_like(u)
        ov, os_ = self.layout.split(out)
        ov[:] = self.mask * v / self.rho_n
        for l, (m, p) in enumerate(self.mods):
            os_[l] = c_apply(self.rho_c * m, self.rho_c * p, s[l], DIM)
        return out

    def apply_Q(self, u: np.ndarray) -> np.ndarray:
        v, s = self.layout.split(u)
        out = np.zeros_like(u)
        _, os_ = self.layout.split(out)
        os_[:] = s * self.decay[:, None, None, None]
        return out

    def energy(self, u: np.ndarray) -> float:
        return self.inner(self.apply_B(u), u)

    # -- right-hand sides ---------------------------------------------------
    def rate(self, u: np.ndarray, force_v: np.ndarray | None = None) -> np.ndarray:
        """``B^{-1}(f - A u) - Q u`` with ``f`` acting on velocities only."""
        v, s = self.layout.split(u)
        out = np.empty_like(u)
        ov, os_ = self.layout.split(out)
        total = self.div(s.sum(axis=0))
        if force_v is not None:
            total = total + force_v.reshape(total.shape)
        ov[:] = self.mask * total / self.rho_n
        e = self.eps(v)
        for l, (m, p) in enumerate(self.mods):
            os_[l] = c_apply(self.rho_c * m, self.rho_c * p, e, DIM)
            if l:
                os_[l] -= self.decay[l] * s[l]
        return out

    def rate_adjoint(self, lam: np.ndarray) -> np.ndarray:
        """Grid adjoint ``(A B^{-1} - Q)`` of the homogeneous rate map."""
        return self.apply_A(self.apply_Binv(lam)) - self.apply_Q(lam)

    def adjoint_rate(self, w: np.ndarray, g: np.ndarray | None) -> np.ndarray:
        """``B^{-1}(g - A w) + Q w`` (right-hand side of the adjoint system)."""
        r = -self.apply_A(w)
        if g is not None:
            r = r + g
        return self.apply_Binv(r) + self.apply_Q(w)

    # -- material perturbations ---------------------------------------------
    def direction(self, phat: ParameterField) -> "MaterialDirection":
        return MaterialDirection.build(self, phat)

    def Binv_H(self, d: "MaterialDirection", x: np.ndarray) -> np.ndarray:
        """``B^{-1} V'(p)[phat] x`` evaluated cellwise."""
        v, s = self.layout.split(x)
        out = np.empty_like(x)
        ov, os_ = self.layout.split(out)
        ov[:] = (d.rho_n / self.rho_n) * v * self.mask
        r = d.rho_c / self.rho_c
        for l, (m, p) in enumerate(self.mods):
            dm, dp = d.mods[l]
            os_[l] = -r * s[l] - c_apply(dm, dp, cinv_apply(m, p, s[l], DIM), DIM)
        return out

    def Binv_H2(self, d1: "MaterialDirection", d2: "MaterialDirection", x: np.ndarray) -> np.ndarray:
        """``B^{-1} V''(p)[phat1, phat2] x`` evaluated cellwise."""
        out = np.zeros_like(x)
        _, s = self.layout.split(x)
        _, os_ = self.layout.split(out)
        r1 = d1.rho_c / self.rho_c
        r2 = d2.rho_c / self.rho_c
        curv = second_mods(self, d1.field, d2.field)
        for l, (m, p) in enumerate(self.mods):
            (a1, b1), (a2, b2), (a12, b12) = d1.mods[l], d2.mods[l], curv[l]
            y = cinv_apply(m, p, s[l], DIM)
            c1y = c_apply(a1, b1, y, DIM)
            c2y = c_apply(a2, b2, y, DIM)
            os_[l] = (2.0 * r1 * r2 * s[l] - c_apply(a12, b12, y, DIM)
                      + r1 * c2y + r2 * c1y
                      + c_apply(a1, b1, cinv_apply(m, p, c2y, DIM), DIM)
                      + c_apply(a2, b2, cinv_apply(m, p, c1y, DIM), DIM))
        return out


@dataclass(frozen=True, eq=False)
class MaterialDirection:
    field: ParameterField
    rho_c: np.ndarray
    rho_n: np.ndarray
    mods: tuple

    @classmethod
    def build(cls, ops: DiscreteOperators, phat: ParameterField) -> "MaterialDirection":
        if phat.shape != ops.grid.cell_shape:
            raise GridError(f"direction shape {phat.shape} does not match grid {ops.grid.cell_shape}")
        c = rh.perturbation_coeffs(ops.field.point(), ops.relax.alpha, phat.point())
        mods = ((c.mu_tilde, c.pi_tilde),) + ((c.mu_hat, c.pi_hat),) * ops.L
        rho_c = phat.values[0]
        return cls(phat, rho_c, cell_average_to_nodes(rho_c, ops.count), mods)


def second_mods(ops: DiscreteOperators, p1: ParameterField, p2: ParameterField):
    c = rh.perturbation_second_coeffs(ops.field.point(), ops.relax.alpha, p1.point(), p2.point())
    return ((c.mu_tilde, c.pi_tilde),) + ((c.mu_hat, c.pi_hat),) * ops.L


def cell_moduli(field: ParameterField, relax: RelaxationSpec):
    """Relaxed moduli ``(mu, pi)`` and memory moduli ``(tauS mu, tauP pi)`` per cell."""
    pt = field.point()
    mod = rh.moduli_from_params(pt, relax.alpha)
    return ((mod.mu, mod.pi),) + ((pt.tauS * mod.mu, pt.tauP * mod.pi),) * relax.L


def max_wave_speed(field: ParameterField, relax: RelaxationSpec) -> float:
    """Speed from the instantaneous (unrelaxed) P modulus ``pi0 (1 + L tauP)``."""
    pt = field.point()
    mod = rh.moduli_from_params(pt, relax.alpha)
    return float(np.sqrt(np.max(mod.pi * (1.0 + relax.L * pt.tauP))))


def recommend_dt(grid: Grid2D, field: ParameterField, relax: RelaxationSpec, cfl: float = 0.4) -> float:
    """``cfl * h / v_max``, capped so ``dt / tau_sigma`` stays inside the RK4 real-axis region."""
    dt = cfl * grid.h / max_wave_speed(field, relax)
    return min(dt, 0.5 * min(relax.tau_sigma))


def build_operators(grid: Grid2D, field: ParameterField, relax: RelaxationSpec,
                    *, check: bool = True, margin: float = 0.0,
                    memory_decay: bool = True) -> DiscreteOperators:
    """Assemble the discrete operators for ``field``.

    ``memory_decay=False`` drops ``Q`` (used for energy checks only).
    """
    grid.require_solver_size()
    if relax.L > MAX_MECHANISMS:
        raise GridError(f"solver paths support at most {MAX_MECHANISMS} relaxation mechanisms, got {relax.L}")
    if field.shape != grid.cell_shape:
        raise GridError(f"field shape {field.shape} does not match grid {grid.cell_shape}")
    if check:
        rep = field.check(relax, margin=margin)
        if not rep.admissible:
            raise InadmissibleError(rep.summary())
    mods = cell_moduli(field, relax)
    for m, p in mods:
        if np.any(m <= 0) or np.any(p - m <= 0):
            raise InadmissibleError("cell moduli outside the 2D invertibility region (need pi > mu > 0)")
    layout = StateLayout(grid.nx, grid.nz, relax.L)
    count = grid.node_cell_count()
    node_weight = count * grid.h ** 2 / 4.0
    mask = grid.node_mask()
    rho_c = field.values[0]
    rho_n = cell_average_to_nodes(rho_c, count)
    decay = np.zeros(relax.L + 1)
    if memory_decay:
        decay[1:] = 1.0 / np.asarray(relax.tau_sigma)
    wv = np.broadcast_to(node_weight, (2,) + grid.node_shape)
    ws = np.broadcast_to(np.array([1.0, 1.0, 2.0])[:, None, None] * grid.h ** 2,
                         (relax.L + 1, NCOMP) + grid.cell_shape)
    weights = np.concatenate([wv.ravel(), ws.ravel()])
    dt_max = recommend_dt(grid, field, relax)
    return DiscreteOperators(grid, field, relax, layout, mask, count, node_weight, rho_c, rho_n,
                             mods, decay, weights, dt_max)


def spectral_radius(ops: DiscreteOperators, iters: int = 60, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral radius of ``B^{-1} A``.

    ``B^{-1} A`` is skew in the ``B`` inner product, so ``(B^{-1}A)^2`` is
    negative semidefinite and the iteration runs on its square.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ops.layout.size)
    lam = 0.0
    for _ in range(iters):
        y = ops.apply_Binv(ops.apply_A(ops.apply_Binv(ops.apply_A(x))))
        nrm = np.sqrt(ops.inner(ops.apply_B(y), y))
        lam = nrm / np.sqrt(ops.inner(ops.apply_B(x), x))
        x = y / nrm
    return float(np.sqrt(lam))


# ---------------------------------------------------------------------------
# wavelet and sources

def wavelet_value(t, f0: float, t0: float | None = None):
    """``(t/t0)^3 exp(1.5 (1 - (t/t0)^2)) sin(2 pi f0 t)`` (zero for ``t <= 0``)."""
    t0 = 1.0 / f0 if t0 is None else t0
    t = np.asarray(t, dtype=float)
    s = np.where(t > 0, t / t0, 0.0)
    return s ** 3 * np.exp(1.5 * (1.0 - s * s)) * np.sin(2.0 * np.pi * f0 * t)


def make_wavelet(f0: float, dt: float, nt: int, t0: float | None = None) -> np.ndarray:
    """Wavelet samples at ``n dt``, ``n = 0..nt``.

    The envelope grows like ``t^3`` so the pulse and its first two
    derivatives vanish at ``t = 0``.
    """
    if f0 <= 0 or dt <= 0 or nt < 1:
        raise ValueError("need f0 > 0, dt > 0 and nt >= 1")
    if f0 * dt > 0.1:
        raise ValueError(f"undersampled wavelet: f0*dt = {f0 * dt:.3g} > 0.1")
    return wavelet_value(np.arange(nt + 1) * dt, f0, t0)


@dataclass(frozen=True)
class SourceSpec:
    """Point force at node ``(i, j)`` on component ``"vx"`` or ``"vz"``."""

    location: tuple
    component: str
    f0: float
    amplitude: float = 1.0
    t0: float | None = None
    cutoff: float | None = None

    def __post_init__(self):
        if self.component not in ("vx", "vz"):
            raise ValueError(f"component must be 'vx' or 'vz', got {self.component!r}")
        if self.f0 <= 0:
            raise ValueError("peak frequency must be positive")

    def signal(self, t):
        w = self.amplitude * wavelet_value(t, self.f0, self.t0)
        if self.cutoff is not None:
            w = np.where(np.asarray(t) <= self.cutoff, w, 0.0)
        return w

    def check_smooth(self, rtol: float = 1e-10):
        """Require the signal to vanish to second order at ``t = 0`` and to have no cutoff jump.

        Second derivatives of the wavefield need a source that is twice
        continuously differentiable in time with ``f(0) = f'(0) = f''(0) = 0``.
        """
        t0 = 1.0 / self.f0 if self.t0 is None else self.t0
        scale = float(np.max(np.abs(self.signal(np.linspace(0.0, 4.0 * t0, 4001))))) or 1.0
        if abs(float(self.signal(0.0))) > rtol * scale:
            raise SmoothnessError("source does not vanish at t = 0")
        # at least cubic onset: f(e)/e^3 stays bounded as e shrinks (a t^2 onset grows tenfold)
        q = [abs(float(self.signal(e * t0))) * e ** -3 for e in (1e-3, 1e-4)]
        if q[1] > 1.5 * q[0] + rtol * scale:
            raise SmoothnessError("source does not vanish to second order at t = 0")
        if self.cutoff is not None:
            jump = abs(float(self.amplitude * wavelet_value(self.cutoff, self.f0, self.t0)))
            if jump > rtol * scale:
                raise SmoothnessError(f"source cutoff at t = {self.cutoff:g} leaves a jump of {jump:.3g}")

    def pattern(self, grid: Grid2D) -> np.ndarray:
        """Spatial force density: a normalised 3x3 binomial smear divided by ``h^2``."""
        i, j = self.location
        if not (0 < i < grid.nx and 0 < j < grid.nz):
            raise GridError(f"source node {self.location} must be interior")
        k = np.array([1.0, 2.0, 1.0])
        stencil = np.outer(k, k) / 16.0
        out = np.zeros((2,) + grid.node_shape)
        c = 0 if self.component == "vx" else 1
        lo_i, lo_j = max(i - 1, 0), max(j - 1, 0)
        hi_i, hi_j = min(i + 2, grid.nx + 1), min(j + 2, grid.nz + 1)
        out[c, lo_i:hi_i, lo_j:hi_j] = stencil[lo_i - i + 1:hi_i - i + 1, lo_j - j + 1:hi_j - j + 1]
        return out * grid.node_mask() / grid.h ** 2


class Forcing:
    """Velocity forcing on the half-step grid ``t_k = k dt / 2``, ``k = 0..2 nt``."""

    def __init__(self, nv: int, nt: int, dt: float):
        self.nv, self.nt, self.dt = nv, nt, dt

    def at(self, k: int) -> np.ndarray | None:
        raise NotImplementedError

    def samples(self) -> np.ndarray:
        return np.stack([self._dense(k) for k in range(2 * self.nt + 1)])

    def _dense(self, k):
        f = self.at(k)
        return np.zeros(self.nv) if f is None else f


class PointForcing(Forcing):
    def __init__(self, grid: Grid2D, src: SourceSpec, nt: int, dt: float):
        super().__init__(2 * (grid.nx + 1) * (grid.nz + 1), nt, dt)
        self.src = src
        self.shape = src.pattern(grid).ravel()
        self.amp = src.signal(np.arange(2 * nt + 1) * (0.5 * dt))

    def at(self, k):
        a = self.amp[k]
        return None if a == 0.0 else a * self.shape


class DenseForcing(Forcing):
    def __init__(self, data: np.ndarray, dt: float):
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] % 2 != 1:
            raise ValueError("dense forcing needs shape (2 nt + 1, nv)")
        super().__init__(data.shape[1], (data.shape[0] - 1) // 2, dt)
        self.data = data

    def at(self, k):
        return self.data[k]


class ZeroForcing(Forcing):
    def at(self, k):
        return None


def half_weights(nt: int, dt: float) -> np.ndarray:
    """Simpson weights of the half-step grid (composite per step)."""
    s = np.zeros(2 * nt + 1)
    s[0:-1:2] += dt / 6.0
    s[1::2] += 4.0 * dt / 6.0
    s[2::2] += dt / 6.0
    return s


def step_weights(nt: int, dt: float) -> np.ndarray:
    """Trapezoid weights on the step grid."""
    c = np.full(nt + 1, dt)
    c[0] = c[-1] = 0.5 * dt
    return c


# ---------------------------------------------------------------------------
# recorded wavefields

@dataclass(eq=False)
class RecordedWavefield:
    """State at every time step ``n dt``, ``n = 0..nt`` (shape ``(nt+1, N)``)."""

    ops: DiscreteOperators
    states: np.ndarray
    dt: float
    nt: int
    forcing: Forcing | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.states.shape != (self.nt + 1, self.ops.layout.size):
            raise ValueError("state array does not match (nt+1, N)")

    @property
    def T(self) -> float:
        return self.nt * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def velocity(self, n: int | slice = slice(None)):
        return self.ops.layout.split(self.states[n])[0]

    def stress(self, n: int | slice = slice(None)):
        return self.ops.layout.split(self.states[n])[1]

    def sample(self, receivers: Sequence[tuple]) -> np.ndarray:
        """Velocity traces ``(nt+1, nrec)`` at ``(i, j, comp)`` receivers."""
        v = self.velocity()
        return np.stack([v[:, c, i, j] for i, j, c in receivers], axis=1)

    def pairing(self, g: "AdjointData") -> float:
        """Trapezoid space-time pairing ``int_0^T <u, g> dt``."""
        c = step_weights(self.nt, self.dt)
        return float(sum(c[n] * g.pair_step(self.ops, n, self.states[n]) for n in range(self.nt + 1)))

    def l2_norm(self) -> float:
        c = step_weights(self.nt, self.dt)
        return float(np.sqrt(sum(c[n] * self.ops.inner(u, u) for n, u in enumerate(self.states))))


def _check_run(ops: DiscreteOperators, dt: float, nt: int, check_cfl: bool):
    if nt < 1 or not dt > 0:
        raise ValueError("need nt >= 1 and dt > 0")
    if nt > MAX_STEPS:
        raise GridError(f"nt = {nt} exceeds the in-memory cap of {MAX_STEPS} steps")
    if check_cfl and dt > ops.dt_max * (1.0 + 1e-12):
        raise CFLError(f"dt = {dt:.4g} exceeds the stable step {ops.dt_max:.4g}")


def _stage_index(n: int):
    return (2 * n, 2 * n + 1, 2 * n + 1, 2 * n + 2)


def _rk4(u, rate, dt, n):
    """One RK4 step; ``rate(y, k, i)`` gets the half index ``k`` and stage ``i``."""
    ks = _stage_index(n)
    k1 = rate(u, ks[0], 0)
    k2 = rate(u + 0.5 * dt * k1, ks[1], 1)
    k3 = rate(u + 0.5 * dt * k2, ks[2], 2)
    k4 = rate(u + dt * k3, ks[3], 3)
    return u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _stages(u, rate, dt, n):
    """Stage inputs and slopes of one RK4 step."""
    ks = _stage_index(n)
    ys, ds = [], []
    y = u
    for i, coef in enumerate((0.5, 0.5, 1.0, None)):
        k = rate(y, ks[i], i)
        ys.append(y)
        ds.append(k)
        if coef is not None:
            y = u + coef * dt * k
    return ys, ds


def run_forward(ops: DiscreteOperators, forcing: Forcing | SourceSpec | None, dt: float, nt: int,
                *, check_cfl: bool = True, u0: np.ndarray | None = None) -> RecordedWavefield:
    """Integrate ``u' = B^{-1}(f - A u) - Q u`` from ``u(0) = u0`` (default 0)."""
    _check_run(ops, dt, nt, check_cfl)
    if isinstance(forcing, SourceSpec):
        forcing = PointForcing(ops.grid, forcing, nt, dt)
    if forcing is None:
        forcing = ZeroForcing(ops.layout.nv, nt, dt)
    if forcing.nt != nt or abs(forcing.dt - dt) > 1e-15 * dt:
        raise GridError("forcing sampled on a different time grid")
    states = np.zeros((nt + 1, ops.layout.size))
    if u0 is not None:
        states[0] = u0
    # energy bound from the continuous estimate |u(t)|_B <= int |f|_{B^-1}
    s = half_weights(nt, dt)
    inv_rho = 1.0 / ops.rho_n.ravel()
    wv = ops.weights[:ops.layout.nv]
    budget = np.sqrt(max(ops.energy(states[0]), 0.0))
    bound = [budget]
    for k in range(2 * nt + 1):
        f = forcing.at(k)
        if f is not None:
            budget += s[k] * 2.0 * np.sqrt(np.dot(wv * np.tile(inv_rho, 2) * f, f))
        if k % 2 == 0 and k:
            bound.append(budget)

    def rate(y, k, i):
        return ops.rate(y, forcing.at(k))

    for n in range(nt):
        states[n + 1] = _rk4(states[n], rate, dt, n)
        e = np.sqrt(max(ops.energy(states[n + 1]), 0.0))
        if not np.isfinite(e) or e > 1e6 * (bound[n + 1] + 1e-300) and e > 0:
            raise CFLError(f"instability detected at step {n + 1} (energy growth beyond the source bound)")
    return RecordedWavefield(ops, states, dt, nt, forcing)


def _base_stages(base: RecordedWavefield, n: int):
    ops = base.ops
    f = base.forcing

    def rate(y, k, i):
        return ops.rate(y, f.at(k))

    ys, ks = _stages(base.states[n], rate, base.dt, n)
    # d = u' + Q u at every stage
    return [k + ops.apply_Q(y) for y, k in zip(ys, ks)]


def _check_base(ops, base, dt, nt):
    if base.ops is not ops and (base.ops.grid != ops.grid):
        raise GridError("base wavefield recorded on a different grid")
    if dt is not None and abs(dt - base.dt) > 1e-15 * base.dt:
        raise GridError("dt does not match the base run")
    if nt is not None and nt != base.nt:
        raise GridError("nt does not match the base run")


def run_linearized(ops: DiscreteOperators, phat: ParameterField, base: RecordedWavefield,
                   dt: float | None = None, nt: int | None = None) -> RecordedWavefield:
    """Exact derivative of :func:`run_forward` with respect to the material field.

    Each stage obeys ``k' = M y' - B^{-1} V'[phat] d`` with ``d = k + Q y``
    of the base stage, recomputed from the stored step states.
    """
    _check_base(ops, base, dt, nt)
    dirn = ops.direction(phat)
    dt, nt = base.dt, base.nt
    states = np.zeros_like(base.states)
    rhs = lambda y: ops.rate(y)  # noqa: E731
    for n in range(nt):
        d = _base_stages(base, n)

        def rate(y, k, i):
            return rhs(y) - ops.Binv_H(dirn, d[i])

        states[n + 1] = _rk4(states[n], rate, dt, n)
    return RecordedWavefield(ops, states, dt, nt, None, {"direction": phat})


def _lin_stages(ops, dirn, lin: RecordedWavefield, d_base, n):
    """Stage values ``y' + ...`` of a linearised run: returns ``d_i = k_i + Q y_i``."""

    def rate(y, k, i):
        return ops.rate(y) - ops.Binv_H(dirn, d_base[i])

    ys, ks = _stages(lin.states[n], rate, lin.dt, n)
    return [k + ops.apply_Q(y) for y, k in zip(ys, ks)]


def run_second_linearized(ops: DiscreteOperators, phat1: ParameterField, phat2: ParameterField,
                          base: RecordedWavefield, lin1: RecordedWavefield, lin2: RecordedWavefield,
                          dt: float | None = None, nt: int | None = None):
    """Second derivative of :func:`run_forward`, split into two parts.

    Returns ``(uu, vv)``: ``uu`` carries the cross sources
    ``-B^{-1}(V'[phat2] d1 + V'[phat1] d2)`` and ``vv`` the source
    ``-B^{-1} V''[phat1, phat2] d``.  Their sum is the second derivative.
    """
    _check_base(ops, base, dt, nt)
    for lin in (lin1, lin2):
        if lin.nt != base.nt or abs(lin.dt - base.dt) > 1e-15 * base.dt:
            raise GridError("linearised runs do not match the base run")
    d1f, d2f = ops.direction(phat1), ops.direction(phat2)
    dt, nt = base.dt, base.nt
    uu = np.zeros_like(base.states)
    vv = np.zeros_like(base.states)
    for n in range(nt):
        d = _base_stages(base, n)
        e1 = _lin_stages(ops, d1f, lin1, d, n)
        e2 = _lin_stages(ops, d2f, lin2, d, n)

        def rate_u(y, k, i):
            return ops.rate(y) - (ops.Binv_H(d2f, e1[i]) + ops.Binv_H(d1f, e2[i]))

        def rate_v(y, k, i):
            return ops.rate(y) - ops.Binv_H2(d1f, d2f, d[i])

        uu[n + 1] = _rk4(uu[n], rate_u, dt, n)
        vv[n + 1] = _rk4(vv[n], rate_v, dt, n)
    return (RecordedWavefield(ops, uu, dt, nt), RecordedWavefield(ops, vv, dt, nt))


# ---------------------------------------------------------------------------
# adjoint data and adjoint runs

@dataclass(eq=False)
class AdjointData:
    """Data ``g`` of the adjoint system on the step grid.

    ``dense`` is an optional ``(nt+1, N)`` array over the full state;
    ``receivers`` lists node receivers ``(i, j, comp)`` with ``traces`` of
    shape ``(nt+1, nrec)``, injected as ``trace / node_weight`` so that
    ``<u, g>`` equals ``sum_r v_r * trace_r``.
    """

    nt: int
    dense: np.ndarray | None = None
    receivers: tuple = ()
    traces: np.ndarray | None = None

    @classmethod
    def from_receivers(cls, receivers, traces):
        traces = np.asarray(traces, dtype=float)
        return cls(traces.shape[0] - 1, None, tuple(tuple(r) for r in receivers), traces)

    @classmethod
    def zeros(cls, nt: int):
        return cls(nt)

    def state(self, ops: DiscreteOperators, n: int) -> np.ndarray:
        out = np.zeros(ops.layout.size) if self.dense is None else np.array(self.dense[n])
        self._inject(ops, out, self.traces[n] if self.traces is not None else None)
        return out

    def state_half(self, ops: DiscreteOperators, n: int) -> np.ndarray:
        """Cubic interpolation between steps ``n`` and ``n+1``."""
        idx, wts = _cubic_midpoint(n, self.nt)
        out = np.zeros(ops.layout.size)
        if self.dense is not None:
            for i, w in zip(idx, wts):
                out += w * self.dense[i]
        if self.traces is not None:
            tr = sum(w * self.traces[i] for i, w in zip(idx, wts))
            self._inject(ops, out, tr)
        return out

    def _inject(self, ops, out, tr):
        if tr is None or not self.receivers:
            return
        v, _ = ops.layout.split(out)
        for (i, j, c), val in zip(self.receivers, tr):
            v[c, i, j] += val / ops.node_weight[i, j] * ops.mask[i, j]

    def pair_step(self, ops: DiscreteOperators, n: int, u: np.ndarray) -> float:
        out = 0.0
        if self.dense is not None:
            out += ops.inner(u, self.dense[n])
        if self.traces is not None and self.receivers:
            v, _ = ops.layout.split(u)
            out += float(sum(v[c, i, j] * ops.mask[i, j] * self.traces[n, r]
                             for r, (i, j, c) in enumerate(self.receivers)))
        return out

    def is_zero(self) -> bool:
        return ((self.dense is None or not np.any(self.dense))
                and (self.traces is None or not np.any(self.traces)))


def _cubic_midpoint(n: int, nt: int):
    if nt < 3:
        return (n, n + 1), (0.5, 0.5)
    if n == 0:
        return (0, 1, 2, 3), (5 / 16, 15 / 16, -5 / 16, 1 / 16)
    if n == nt - 1:
        return (nt, nt - 1, nt - 2, nt - 3), (5 / 16, 15 / 16, -5 / 16, 1 / 16)
    return (n - 1, n, n + 1, n + 2), (-1 / 16, 9 / 16, 9 / 16, -1 / 16)


def run_adjoint(ops: DiscreteOperators, g: AdjointData, dt: float, nt: int,
                mode: str = "continuous", forward: RecordedWavefield | None = None) -> RecordedWavefield:
    """Adjoint wavefield for data ``g``.

    ``mode="continuous"`` integrates ``w' = B^{-1}(g - A w) + Q w`` backwards
    from ``w(T) = 0`` with RK4 (so ``int <u', g> = int <H d, w>`` holds up to
    time discretisation).  ``mode="discrete"`` applies the exact grid
    transpose of the :func:`run_forward` step map in reverse; its states are
    the sensitivities ``lambda_n`` and ``extras["source"]`` holds the
    half-step source sensitivities normalised by :func:`half_weights`.
    """
    if g.nt != nt:
        raise GridError("adjoint data sampled on a different time grid")
    if mode == "continuous":
        return _adjoint_continuous(ops, g, dt, nt)
    if mode == "discrete":
        if forward is not None and (forward.ops is not ops or forward.nt != nt or forward.dt != dt):
            raise GridError("discrete adjoint requires the forward stepper configuration")
        return _adjoint_discrete(ops, g, dt, nt)
    raise ValueError(f"unknown adjoint mode {mode!r}")


def _adjoint_continuous(ops, g, dt, nt):
    states = np.zeros((nt + 1, ops.layout.size))
    zero = g.is_zero()

    def gval(k):
        if zero:
            return None
        if k % 2 == 0:
            return g.state(ops, k // 2)
        return g.state_half(ops, (k - 1) // 2)

    # reversed time s = T - t: dw/ds = -(B^{-1}(g - A w) + Q w)
    for m in range(nt):
        n = nt - m
        w = states[n]
        gk = [gval(2 * n), gval(2 * n - 1), gval(2 * n - 1), gval(2 * n - 2)]

        def rate(y, i):
            return -ops.adjoint_rate(y, gk[i])

        k1 = rate(w, 0)
        k2 = rate(w + 0.5 * dt * k1, 1)
        k3 = rate(w + 0.5 * dt * k2, 2)
        k4 = rate(w + dt * k3, 3)
        states[n - 1] = w + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return RecordedWavefield(ops, states, dt, nt, None, {"mode": "continuous", "data": g})


def _adjoint_discrete(ops, g, dt, nt):
    c = step_weights(nt, dt)
    s = half_weights(nt, dt)
    nv = ops.layout.nv
    lam = np.zeros((nt + 1, ops.layout.size))
    src = np.zeros((2 * nt + 1, nv))
    zero = g.is_zero()
    ubar = np.zeros(ops.layout.size) if zero else c[nt] * g.state(ops, nt)
    lam[nt] = ubar
    Mt = ops.rate_adjoint
    for n in range(nt - 1, -1, -1):
        a4 = dt / 6.0 * ubar
        y4 = Mt(a4)
        a3 = dt / 3.0 * ubar + dt * y4
        y3 = Mt(a3)
        a2 = dt / 3.0 * ubar + 0.5 * dt * y3
        y2 = Mt(a2)
        a1 = dt / 6.0 * ubar + 0.5 * dt * y2
        y1 = Mt(a1)
        k = _stage_index(n)
        for ki, a in zip(k, (a1, a2, a3, a4)):
            src[ki] += ops.apply_Binv(a)[:nv]
        ubar = ubar + y1 + y2 + y3 + y4
        if not zero:
            ubar = ubar + c[n] * g.state(ops, n)
        lam[n] = ubar
    src /= s[:, None]
    return RecordedWavefield(ops, lam, dt, nt, None, {"mode": "discrete", "source": src})


def source_pairing(ops: DiscreteOperators, forcing: Forcing, adj: RecordedWavefield) -> float:
    """``sum_k s_k <f_k, lambda_k>`` over the half-step grid (discrete adjoint)."""
    src = adj.extras["source"]
    s = half_weights(adj.nt, adj.dt)
    wv = ops.weights[:ops.layout.nv]
    total = 0.0
    for k in range(2 * adj.nt + 1):
        f = forcing.at(k)
        if f is not None:
            total += s[k] * float(np.dot(wv * f, src[k]))
    return total


def state_rates(ops: DiscreteOperators, rec: RecordedWavefield, forcing: Forcing | None = None) -> np.ndarray:
    """``u' + Q u = B^{-1}(f - A u)`` at every step (from the ODE right-hand side)."""
    f = forcing if forcing is not None else rec.forcing
    out = np.empty_like(rec.states)
    for n in range(rec.nt + 1):
        fv = None if f is None else f.at(2 * n)
        out[n] = ops.rate(rec.states[n], fv) + ops.apply_Q(rec.states[n])
    return out


def mirror_x(ops: DiscreteOperators, u: np.ndarray) -> np.ndarray:
    """Reflect a state across the vertical grid mid-line (vx, xz change sign)."""
    v, s = ops.layout.split(u)
    mv = v[:, ::-1, :].copy()
    mv[0] *= -1.0
    ms = s[:, :, ::-1, :].copy()
    ms[:, 2] *= -1.0
    return ops.layout.join(mv, ms)


__all__ = [
    "AdjointData", "CFLError", "SmoothnessError", "DenseForcing", "DiscreteOperators", "Forcing", "Grid2D", "GridError",
    "MaterialDirection", "ParameterField", "PointForcing", "RecordedWavefield", "SourceSpec",
    "StateLayout", "ZeroForcing", "build_operators", "cell_average_to_nodes", "cell_moduli",
    "corner_sum", "frobenius", "half_weights", "make_wavelet", "max_wave_speed", "mirror_x",
    "recommend_dt", "run_adjoint", "run_forward", "run_linearized", "run_second_linearized",
    "second_mods", "source_pairing", "spectral_radius", "state_rates", "step_weights", "wavelet_value",
]
