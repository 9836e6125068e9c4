"""A small reproducible model setup shared by checks, demos and the command line."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rheology import ParameterBounds, ParameterPoint, RelaxationSpec
from .wave2d import (
    AdjointData,
    DiscreteOperators,
    Grid2D,
    ParameterField,
    SourceSpec,
    build_operators,
    step_weights,
)

BOX = ParameterBounds(rho=(1.5, 2.5), vS=(0.8, 1.2), tauS=(0.5, 1.0), vP=(2.5, 3.5), tauP=(0.5, 1.0))
F0 = 5.0


def default_relaxation(f0: float = F0, L: int = 1) -> RelaxationSpec:
    """``L`` mechanisms at ``tau_sigma = 1/omega0`` (so ``alpha = L/2``)."""
    w0 = 2.0 * np.pi * f0
    return RelaxationSpec(tuple([1.0 / w0] * L), w0)


def smooth_field(grid: Grid2D, rng: np.random.Generator, scale: float, modes: int = 2) -> np.ndarray:
    """Random low-order trigonometric field with ``max |.| <= scale``."""
    X, Z = grid.cell_centres()
    Lx, Lz = grid.nx * grid.h, grid.nz * grid.h
    out = np.zeros(grid.cell_shape)
    for _ in range(modes):
        a, b = rng.integers(1, 3, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        out += rng.uniform(-1, 1) * np.sin(a * np.pi * X / Lx + ph[0]) * np.cos(b * np.pi * Z / Lz + ph[1])
    m = np.max(np.abs(out))
    return out * (scale / m) if m > 0 else out


def smooth_direction(grid: Grid2D, rng: np.random.Generator, bounds: ParameterBounds = BOX,
                     fraction: float = 0.3) -> ParameterField:
    """Direction with each component bounded by ``fraction`` of its box width."""
    w = bounds.widths()
    return ParameterField(np.stack([smooth_field(grid, rng, fraction * wk) for wk in w]))


def base_field(grid: Grid2D, seed: int = 1, bounds: ParameterBounds = BOX, variation: float = 0.15) -> ParameterField:
    """Box midpoint plus a smooth variation of ``variation`` box widths."""
    rng = np.random.default_rng(seed)
    mid = ParameterField.homogeneous(grid, bounds.midpoint(), bounds)
    return mid.axpy(1.0, smooth_direction(grid, rng, bounds, variation))


@dataclass(frozen=True, eq=False)
class Scenario:
    grid: Grid2D
    field: ParameterField
    relax: RelaxationSpec
    ops: DiscreteOperators
    source: SourceSpec
    receivers: tuple
    dt: float
    nt: int

    def smooth_traces(self, rng: np.random.Generator, modes: int = 3) -> AdjointData:
        """Receiver data made of a few random low-frequency sines."""
        t = np.arange(self.nt + 1) * self.dt
        T = self.nt * self.dt
        tr = np.zeros((self.nt + 1, len(self.receivers)))
        for r in range(len(self.receivers)):
            for k in range(1, modes + 1):
                tr[:, r] += rng.standard_normal() * np.sin(k * np.pi * t / T + rng.uniform(0, 2 * np.pi))
        return AdjointData.from_receivers(self.receivers, tr)


def make_scenario(n: int = 32, nt: int | None = None, T: float = 1.0, seed: int = 1,
                  f0: float = F0, homogeneous: bool = False, free_surface: bool = False) -> Scenario:
    """Unit square with ``n x n`` cells, a vertical point force and a receiver line.

    ``dt = T / nt``; with ``nt=None`` the smallest ``nt`` meeting the
    stability limit is used.
    """
    grid = Grid2D.box(n, n, 1.0 / n, free_surface=free_surface)
    relax = default_relaxation(f0)
    field = (ParameterField.homogeneous(grid, BOX.midpoint(), BOX) if homogeneous
             else base_field(grid, seed))
    ops = build_operators(grid, field, relax)
    if nt is None:
        nt = int(np.ceil(T / ops.dt_max))
    dt = T / nt
    src = SourceSpec((n // 2, n // 4), "vz", f0)
    step = max(1, n // 8)
    j = (3 * n) // 4
    receivers = tuple((i, j, c) for i in range(step, n, step) for c in (0, 1))
    return Scenario(grid, field, relax, ops, src, receivers, dt, nt)


def trapezoid_pairing(sc: Scenario, traces_a: np.ndarray, traces_b: np.ndarray) -> float:
    c = step_weights(sc.nt, sc.dt)
    return float(np.sum(c[:, None] * traces_a * traces_b))


__all__ = ["BOX", "F0", "ParameterPoint", "Scenario", "base_field", "default_relaxation", "make_scenario",
           "smooth_direction", "smooth_field", "trapezoid_pairing"]
