"""Parameter-to-wavefield map and its first and second derivatives and adjoints.

The forward map sends a :class:`ParameterField` to the recorded wavefield
of :func:`wave2d.run_forward`.  Derivatives delegate to the exact
linearised runs of the solver; adjoints are assembled from the pointwise
integrands of :mod:`viscoadjoint.kernels`, time-integrated with the
trapezoid rule against the continuous adjoint wavefield.

Gradients are densities on the cells: ``GradientField.dot(phat)`` applies
the ``h^2`` cell weight so that pairings approximate integrals over the
domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels as kn
from .kernels import PointData, check_denominators
from .rheology import InadmissibleError, RelaxationSpec, SingularMapError
from .wave2d import (
    AdjointData,
    DiscreteOperators,
    GridError,
    ParameterField,
    RecordedWavefield,
    SourceSpec,
    build_operators,
    corner_sum,
    run_adjoint,
    run_forward,
    run_linearized,
    run_second_linearized,
    state_rates,
    step_weights,
)

INTERIOR_MARGIN = 0.01
PARAM_NAMES = ("rho", "vS", "tauS", "vP", "tauP")


class GradientField(ParameterField):
    """Five cell densities ``(d rho, d vS, d tauS, d vP, d tauP)``."""


# ---------------------------------------------------------------------------
# setup

def interior_operators(grid, field: ParameterField, relax: RelaxationSpec,
                       margin: float = INTERIOR_MARGIN) -> DiscreteOperators:
    """Operators for a derivative evaluation: interior point and non-singular integrands."""
    ops = build_operators(grid, field, relax, check=True, margin=margin)
    check_denominators(_point_data(ops))
    return ops


def _point_data(ops: DiscreteOperators) -> PointData:
    return PointData(ops.field.point(), ops.relax.alpha, 2)


def _same_grid(ops: DiscreteOperators, rec: RecordedWavefield):
    if rec.ops.grid != ops.grid:
        raise GridError("wavefield recorded on a different grid")


def _velocity_density(ops: DiscreteOperators, dv: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Cell density of ``sum_nodes rho_hat_n dv . wv`` per unit ``rho_hat`` on a cell."""
    return 0.25 * corner_sum(ops.mask * np.sum(dv * wv, axis=0))


def _stress_parts(ops: DiscreteOperators, s: np.ndarray):
    """Relaxed block and memory sum of one stress state ``(L+1, 3, nx, nz)``."""
    return s[0], s[1:].sum(axis=0)


# ---------------------------------------------------------------------------
# forward map and first derivative

def phi(ops: DiscreteOperators, src: SourceSpec | None, dt: float, nt: int, **kw) -> RecordedWavefield:
    """Forward wavefield (pure delegation to the solver)."""
    return run_forward(ops, src, dt, nt, **kw)


def phi_prime(ops: DiscreteOperators, phat: ParameterField, base: RecordedWavefield) -> RecordedWavefield:
    _same_grid(ops, base)
    return run_linearized(ops, phat, base)


def phi_prime_adjoint(ops: DiscreteOperators, g: AdjointData, base: RecordedWavefield,
                      adjoint: RecordedWavefield | None = None) -> GradientField:
    """Gradient density of ``phat -> <phi_prime(phat), g>``.

    Runs the continuous adjoint (unless ``adjoint`` is supplied) and
    integrates the first-order rows over the step grid.
    """
    _same_grid(ops, base)
    if g.nt != base.nt:
        raise GridError("adjoint data sampled on a different time grid")
    if adjoint is None:
        adjoint = run_adjoint(ops, g, base.dt, base.nt, mode="continuous")
    if g.is_zero():
        return GradientField(np.zeros((5,) + ops.grid.cell_shape))
    rates = state_rates(ops, base)
    return GradientField(_first_order_integral(ops, base, rates, adjoint.states))


def _first_order_integral(ops, base, rates, w_states):
    pd = _point_data(ops)
    c = step_weights(base.nt, base.dt)
    lay = ops.layout
    out = np.zeros((5,) + ops.grid.cell_shape)
    for n in range(base.nt + 1):
        if c[n] == 0.0:
            continue
        wv, ws = lay.split(w_states[n])
        if not np.any(ws) and not np.any(wv):
            continue
        uv, _ = lay.split(base.states[n])
        dv, _ = lay.split(rates[n])
        phi0, S = _stress_parts(ops, ws)
        out += c[n] * kn.first_order_rows(pd, ops.eps(uv), _velocity_density(ops, dv, wv), phi0, S)
    return out


# ---------------------------------------------------------------------------
# second derivative

def phi_second(ops: DiscreteOperators, p1: ParameterField, p2: ParameterField, base: RecordedWavefield,
               lin1: RecordedWavefield | None = None, lin2: RecordedWavefield | None = None,
               split: bool = False):
    """Second derivative ``u'' = uu + vv``; ``split=True`` returns the two parts."""
    _same_grid(ops, base)
    _require_smooth(base)
    lin1 = lin1 if lin1 is not None else run_linearized(ops, p1, base)
    lin2 = lin2 if lin2 is not None else run_linearized(ops, p2, base)
    uu, vv = run_second_linearized(ops, p1, p2, base, lin1, lin2)
    if split:
        return uu, vv
    return RecordedWavefield(ops, uu.states + vv.states, base.dt, base.nt)


def _require_smooth(base: RecordedWavefield):
    src = getattr(base.forcing, "src", None)
    if src is not None:
        src.check_smooth()


@dataclass
class SecondAdjointParts:
    """The three contributions to the second-order gradient."""

    memory: GradientField     # first-order rows against the second adjoint z
    cross: GradientField      # linearised forward field against w
    curvature: GradientField  # second material derivative against w

    @property
    def total(self) -> GradientField:
        return GradientField(self.memory.values + self.cross.values + self.curvature.values)


def second_adjoint_datum(ops: DiscreteOperators, phat: ParameterField, g: AdjointData,
                         adjoint: RecordedWavefield) -> AdjointData:
    """Data ``-V'(p)phat (w' - Q w)`` of the second adjoint system.

    ``w' - Q w = B^{-1}(g - A w)`` is taken from the adjoint right-hand side.
    """
    dirn = ops.direction(phat)
    dense = np.zeros_like(adjoint.states)
    if g.is_zero():
        return AdjointData(g.nt, dense)
    for n in range(g.nt + 1):
        r = ops.apply_Binv(g.state(ops, n) - ops.apply_A(adjoint.states[n]))
        dense[n] = -ops.apply_B(ops.Binv_H(dirn, r))
    return AdjointData(g.nt, dense)


def phi_second_adjoint(ops: DiscreteOperators, phat: ParameterField, g: AdjointData,
                       base: RecordedWavefield, variant: str = "corrected",
                       adjoint: RecordedWavefield | None = None,
                       lin: RecordedWavefield | None = None,
                       parts: bool = False):
    """Gradient density of ``qhat -> <phi_second(phat, qhat), g>``.

    Four solves: the forward field (``base``), the adjoint ``w`` for ``g``,
    the linearised field in direction ``phat`` and the second adjoint ``z``.
    ``w`` and the linearised field are independent and may be supplied.
    """
    _same_grid(ops, base)
    _require_smooth(base)
    if g.nt != base.nt:
        raise GridError("adjoint data sampled on a different time grid")
    kn._check_variant(variant)
    shape = (5,) + ops.grid.cell_shape
    if g.is_zero():
        z = GradientField(np.zeros(shape))
        res = SecondAdjointParts(z, z, z)
        return res if parts else res.total
    if adjoint is None:
        adjoint = run_adjoint(ops, g, base.dt, base.nt, mode="continuous")
    if lin is None:
        lin = run_linearized(ops, phat, base)
    zdat = second_adjoint_datum(ops, phat, g, adjoint)
    z = run_adjoint(ops, zdat, base.dt, base.nt, mode="continuous")

    rates = state_rates(ops, base)
    memory = _first_order_integral(ops, base, rates, z.states)

    pd = _point_data(ops)
    dirn = ops.direction(phat)
    ph = phat.point()
    c = step_weights(base.nt, base.dt)
    lay = ops.layout
    cross = np.zeros(shape)
    curv = np.zeros(shape)
    for n in range(base.nt + 1):
        if c[n] == 0.0:
            continue
        wv, ws = lay.split(adjoint.states[n])
        uv, _ = lay.split(base.states[n])
        u1v, _ = lay.split(lin.states[n])
        # d1 = u1' + Q u1 including the material source of the linearised run
        d1 = ops.rate(lin.states[n]) + ops.apply_Q(lin.states[n]) - ops.Binv_H(dirn, rates[n])
        d1v, _ = lay.split(d1)
        phi0, S = _stress_parts(ops, ws)
        eps, eps1 = ops.eps(uv), ops.eps(u1v)
        cross += c[n] * kn.cross_rows(pd, ph, eps, eps1, _velocity_density(ops, d1v, wv), phi0, S, variant)
        curv += c[n] * kn.upsilon_rows(pd, ph, eps, phi0, S, variant)
    res = SecondAdjointParts(GradientField(memory), GradientField(cross), GradientField(curv))
    return res if parts else res.total


# ---------------------------------------------------------------------------
# pointwise quantities

def assemble_quantities(kind: str, pd: PointData, phi0, S, phat=None):
    """``Sigma``, ``Gamma`` or ``Upsilon`` tensors at points, selected by ``pd.dim``."""
    check_denominators(pd)
    if kind == "sigma":
        return kn.sigma_quantities(pd, phi0, S)
    if phat is None:
        raise ValueError(f"{kind} quantities need a direction")
    dd = pd.direction(phat)
    if kind == "gamma":
        return kn.gamma_quantities(pd, dd, phi0, S)
    if kind == "upsilon":
        return kn.upsilon_quantities(pd, dd, phi0, S)
    raise ValueError(f"unknown quantity set {kind!r}")


# ---------------------------------------------------------------------------
# misfit

@dataclass(frozen=True)
class Misfit:
    """``J(p) = 1/2 int sum_r (v_r(t) - d_r(t))^2 dt`` with trapezoid time weights."""

    receivers: tuple
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "receivers", tuple(tuple(int(x) for x in r) for r in self.receivers))
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2 or d.shape[1] != len(self.receivers):
            raise GridError("data must have shape (nt+1, number of receivers)")
        object.__setattr__(self, "data", d)

    def residual(self, rec: RecordedWavefield) -> np.ndarray:
        if rec.nt + 1 != self.data.shape[0]:
            raise GridError("data and wavefield have different numbers of steps")
        return rec.sample(self.receivers) - self.data

    def value(self, rec: RecordedWavefield) -> float:
        r = self.residual(rec)
        c = step_weights(rec.nt, rec.dt)
        return 0.5 * float(np.sum(c[:, None] * r * r))

    def adjoint_data(self, rec: RecordedWavefield) -> AdjointData:
        return AdjointData.from_receivers(self.receivers, self.residual(rec))

    def gradient(self, ops: DiscreteOperators, rec: RecordedWavefield) -> GradientField:
        return phi_prime_adjoint(ops, self.adjoint_data(rec), rec)


def check_receivers(grid, receivers: Sequence[tuple]):
    for r in receivers:
        if len(r) != 3:
            raise GridError(f"receiver {r!r} must be (i, j, component)")
        i, j, comp = r
        if not (0 <= i <= grid.nx and 0 <= j <= grid.nz) or comp not in (0, 1):
            raise GridError(f"receiver {r!r} outside the node grid")
        if not grid.node_mask()[i, j]:
            raise GridError(f"receiver {r!r} sits on a clamped boundary node")


# ---------------------------------------------------------------------------
# indicator perturbations

def indicator(grid, centre: tuple, radius: float) -> np.ndarray:
    """Cell indicator of the disc of ``radius`` around ``centre`` (cell centres)."""
    X, Z = grid.cell_centres()
    return ((X - centre[0]) ** 2 + (Z - centre[1]) ** 2 <= radius ** 2).astype(float)


def indicator_perturbation(field: ParameterField, grid, centre, radius, amplitude) -> ParameterField:
    """``p + amplitude * chi`` with a per-parameter amplitude vector."""
    chi = indicator(grid, centre, radius)
    a = np.broadcast_to(np.asarray(amplitude, dtype=float), (5,))
    return ParameterField(field.values + a[:, None, None] * chi[None], field.bounds)


__all__ = [
    "GradientField", "INTERIOR_MARGIN", "InadmissibleError", "Misfit", "ParameterField",
    "SecondAdjointParts", "SingularMapError", "assemble_quantities", "check_receivers", "indicator",
    "indicator_perturbation", "interior_operators", "phi", "phi_prime", "phi_prime_adjoint",
    "phi_second", "phi_second_adjoint", "second_adjoint_datum",
]
