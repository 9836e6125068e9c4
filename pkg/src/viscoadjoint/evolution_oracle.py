"""Dense finite-dimensional evolution systems ``B u' + A u + B Q u = f``.

Every abstract derivative and adjoint identity can be checked here by brute
force: the systems are small, the integrator is a high-order adaptive
Runge-Kutta method run at tight tolerance, and pairings are evaluated by
composite Simpson quadrature on a uniform grid sampled from dense output.

Conventions
-----------
``F(B)`` is the solution ``u`` on ``[0, T]``.  A direction ``H`` is a
symmetric matrix perturbing ``B``.  The adjoint state for data ``g`` solves
``B w' - A^T w - Q^T B w = g`` with ``w(T) = 0``, so that
``int <F'(B)H, g> dt = int <H(u' + Qu), w> dt``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.linalg import cho_factor, cho_solve

log = logging.getLogger(__name__)

__all__ = [
    "OracleSystem",
    "Trajectory",
    "IntegratorError",
    "SmoothnessError",
    "random_system",
    "default_source",
    "smooth_data",
    "solve_forward",
    "solve_first_derivative",
    "solve_adjoint",
    "solve_adjoint_direct",
    "solve_second_derivative",
    "second_adjoint_pairing",
    "second_adjoint_gradient",
    "pairing",
    "rate_plus_Q",
    "sup_norm",
    "lipschitz_scan",
    "illposed_probe",
    "IllposedReport",
    "illposed_family",
    "write_trajectory_csv",
    "write_table_csv",
]

DEFAULT_TOL = 1e-10
N_QUAD = 801


class IntegratorError(RuntimeError):
    pass


class SmoothnessError(ValueError):
    pass


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class OracleSystem:
    """A dense instance of ``B u' + A u + B Q u = f`` on ``[0, T]``.

    ``f`` maps a time to an ``n``-vector.  ``source_vanishes`` declares
    that ``f`` and its first two derivatives vanish at ``t = 0``; it is
    verified numerically before second-order solves.
    """

    B: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    f: Callable[[float], np.ndarray]
    T: float = 1.0
    source_vanishes: bool = True
    beta: tuple = (None, None)
    _chol: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        A = np.array(self.A, dtype=float)
        Q = np.array(self.Q, dtype=float)
        n = B.shape[0]
        if n > 32:
            raise ValueError(f"oracle systems are limited to n <= 32, got {n}")
        if B.shape != (n, n) or A.shape != (n, n) or Q.shape != (n, n):
            raise ValueError("B, A, Q must be square and of equal size")
        if np.max(np.abs(B - B.T)) > 1e-14 * np.max(np.abs(B)):
            raise ValueError("B must be symmetric")
        ev = np.linalg.eigvalsh(B)
        lo, hi = self.beta
        if ev[0] <= 0 or (lo is not None and ev[0] < lo * (1 - 1e-12)) or (hi is not None and ev[-1] > hi * (1 + 1e-12)):
            raise ValueError(f"spectrum of B [{ev[0]:.3g}, {ev[-1]:.3g}] outside admissible range {self.beta}")
        if np.linalg.eigvalsh(_sym(A))[0] < -1e-12:
            raise ValueError("A is not monotone")
        for name, M in (("B", B), ("A", A), ("Q", Q)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        object.__setattr__(self, "_chol", cho_factor(B))

    @property
    def n(self) -> int:
        return self.B.shape[0]

    def solve_B(self, x):
        return cho_solve(self._chol, x)

    def with_B(self, B) -> "OracleSystem":
        return OracleSystem(B, self.A, self.Q, self.f, self.T, self.source_vanishes, self.beta)

    def rate(self, u, t):
        """``u'`` from the equation itself: ``B^{-1}(f - A u) - Q u``."""
        return self.solve_B(self.f(t) - self.A @ u) - self.Q @ u

    def check_source(self):
        """Verify ``f(0) = f'(0) = f''(0) = 0`` through ``|f(h)| = O(h^3)``."""
        scale = max(np.max(np.abs(self.f(t))) for t in np.linspace(0, self.T, 51))
        f0 = np.max(np.abs(self.f(0.0)))
        r1 = np.max(np.abs(self.f(1e-3))) / 1e-9
        r2 = np.max(np.abs(self.f(1e-4))) / 1e-12
        ok = self.source_vanishes and f0 <= 1e-12 * scale and abs(r1 - r2) <= 1e-2 * max(r1, r2) + 1e-12 * scale
        if not ok:
            raise SmoothnessError("source does not vanish to third order at t = 0")


@dataclass
class Trajectory:
    """States sampled on a uniform grid, plus the dense interpolant."""

    times: np.ndarray
    states: np.ndarray
    tol: float
    dense: Callable | None = None

    def __call__(self, t):
        return self.dense(t) if self.dense is not None else None

    @property
    def n(self):
        return self.states.shape[1]


def default_source(c: np.ndarray) -> Callable[[float], np.ndarray]:
    """``t^3 exp(-t) c``: vanishes with its first two derivatives at 0."""
    c = np.asarray(c, dtype=float).copy()
    return lambda t: (t ** 3 * np.exp(-t)) * c


def smooth_data(rng: np.random.Generator, n: int, T: float = 1.0, modes: int = 3) -> Callable:
    """Random trigonometric data ``g(t)`` for adjoint solves."""
    a = rng.standard_normal((modes, n))
    b = rng.standard_normal((modes, n))
    k = np.arange(1, modes + 1)[:, None]
    w = np.pi / T

    def g(t):
        return np.sum(a * np.cos(k * w * t) + b * np.sin(k * w * t), axis=0)

    return g


def random_system(n: int, seed: int = 0, *, beta=(0.5, 2.0), T: float = 1.0,
                  skew: bool = True, q_scale: float = 1.0, source: Callable | None = None) -> OracleSystem:
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    G = M.T @ M
    ev = np.linalg.eigvalsh(G)
    # spectrum mapped into the middle half of [beta-, beta+] so that
    # perturbations of moderate size stay admissible
    width = beta[1] - beta[0]
    lo, hi = beta[0] + 0.25 * width, beta[1] - 0.25 * width
    B = lo * np.eye(n) + (hi - lo) * (G - ev[0] * np.eye(n)) / (ev[-1] - ev[0])
    B = _sym(B)
    S = rng.standard_normal((n, n))
    A = S - S.T
    if not skew:
        R = rng.standard_normal((n, n))
        A = A + 0.1 * R @ R.T
    Q = q_scale * rng.uniform(-1, 1, (n, n))
    if source is None:
        source = default_source(rng.standard_normal(n))
    return OracleSystem(B, A, Q, source, T, True, beta)


# ---------------------------------------------------------------------------
# integration

def _grid(T, n_quad=N_QUAD):
    return np.linspace(0.0, T, n_quad)


def _integrate(rhs, y0, T, tol, n_quad=N_QUAD):
    times = _grid(T, n_quad)
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=tol, atol=tol * 1e-2,
                    dense_output=True, t_eval=times)
    if not sol.success:
        raise IntegratorError(sol.message)
    return times, sol.y.T.copy(), sol.sol


def solve_forward(sys: OracleSystem, u0=None, tol: float = DEFAULT_TOL) -> Trajectory:
    n = sys.n
    u0 = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float)
    times, states, dense = _integrate(lambda t, u: sys.rate(u, t), u0, sys.T, tol)
    return Trajectory(times, states, tol, dense)


def _coupled_rhs(sys, Hs):
    """Right-hand side for ``(u, u_1, .., u_k)`` with first-derivative couplings."""
    n = sys.n

    def rhs(t, y):
        u = y[:n]
        du = sys.rate(u, t)
        out = [du]
        src = du + sys.Q @ u
        for i, H in enumerate(Hs):
            ui = y[(i + 1) * n:(i + 2) * n]
            out.append(-sys.solve_B(sys.A @ ui + H @ src) - sys.Q @ ui)
        return np.concatenate(out)

    return rhs


def solve_first_derivative(sys: OracleSystem, H, base: Trajectory | None = None,
                           tol: float = DEFAULT_TOL) -> Trajectory:
    """Solve ``B ubar' + A ubar + B Q ubar = -H(u' + Q u)``, ``ubar(0) = 0``.

    The base state is integrated alongside so that ``u'`` comes from the
    equation at every stage rather than from interpolated output.
    """
    n = sys.n
    u0 = np.zeros(n) if base is None else base.states[0]
    y0 = np.concatenate([u0, np.zeros(n)])
    times, states, dense = _integrate(_coupled_rhs(sys, [np.asarray(H, float)]), y0, sys.T, tol)
    return Trajectory(times, states[:, n:], tol, lambda t: dense(t)[n:])


def solve_second_derivative(sys: OracleSystem, H1, H2, tol: float = DEFAULT_TOL) -> Trajectory:
    """Solve for ``F''(B)[H1, H2]`` with zero initial state."""
    sys.check_source()
    n = sys.n
    H1 = np.asarray(H1, float)
    H2 = np.asarray(H2, float)
    first = _coupled_rhs(sys, [H1, H2])

    def rhs(t, y):
        head = first(t, y[:3 * n])
        u1, u2 = y[n:2 * n], y[2 * n:3 * n]
        d1 = head[n:2 * n] + sys.Q @ u1
        d2 = head[2 * n:3 * n] + sys.Q @ u2
        u12 = y[3 * n:]
        du12 = -sys.solve_B(sys.A @ u12 + H1 @ d2 + H2 @ d1) - sys.Q @ u12
        return np.concatenate([head, du12])

    times, states, dense = _integrate(rhs, np.zeros(4 * n), sys.T, tol)
    return Trajectory(times, states[:, 3 * n:], tol, lambda t: dense(t)[3 * n:])


def solve_adjoint(sys: OracleSystem, g: Callable, tol: float = DEFAULT_TOL) -> Trajectory:
    """Solve ``B w' - A^T w - Q^T B w = g``, ``w(T) = 0``, by time reversal.

    With ``wr(s) = w(T - s)`` the problem becomes the initial value problem
    ``B wr' + A^T wr + Q^T B wr = -g(T - s)``, ``wr(0) = 0``.
    """
    T = sys.T
    BQ = sys.Q.T @ sys.B

    def rhs(s, wr):
        return -sys.solve_B(g(T - s) + sys.A.T @ wr + BQ @ wr)

    times, states, dense = _integrate(rhs, np.zeros(sys.n), T, tol)
    return Trajectory(times, states[::-1].copy(), tol, lambda t: dense(T - t))


def solve_adjoint_direct(sys: OracleSystem, g: Callable, tol: float = DEFAULT_TOL) -> Trajectory:
    """Integrate the adjoint equation backward from ``T`` without substitution."""
    BQ = sys.Q.T @ sys.B
    times = _grid(sys.T)
    sol = solve_ivp(lambda t, w: sys.solve_B(g(t) + sys.A.T @ w + BQ @ w), (sys.T, 0.0), np.zeros(sys.n),
                    method="DOP853", rtol=tol, atol=tol * 1e-2, dense_output=True, t_eval=times[::-1])
    if not sol.success:
        raise IntegratorError(sol.message)
    return Trajectory(times, sol.y.T[::-1].copy(), tol, sol.sol)


# ---------------------------------------------------------------------------
# pairings

def pairing(times, a, b) -> float:
    """``int_0^T <a(t), b(t)> dt`` by composite Simpson on the sample grid."""
    return float(simpson(np.sum(a * b, axis=1), x=times))


def sup_norm(traj_or_states) -> float:
    states = getattr(traj_or_states, "states", traj_or_states)
    return float(np.max(np.linalg.norm(states, axis=1)))


def _rates(sys, states, times, g=None):
    if g is None:
        F = np.array([sys.f(t) for t in times])
    else:
        F = np.array([g(t) for t in times])
    return sys.solve_B((F - states @ sys.A.T).T).T - states @ sys.Q.T


def _forward_with_first(sys, Hs, tol):
    n = sys.n
    y0 = np.zeros((len(Hs) + 1) * n)
    times, states, _ = _integrate(_coupled_rhs(sys, [np.asarray(H, float) for H in Hs]), y0, sys.T, tol)
    return times, [states[:, i * n:(i + 1) * n] for i in range(len(Hs) + 1)]


def second_adjoint_pairing(sys: OracleSystem, H1, g: Callable, H2, tol: float = DEFAULT_TOL) -> float:
    """``int <H1(u2' + Q u2) + H2(u1' + Q u1), w> dt`` with ``w`` the adjoint state for ``g``."""
    sys.check_source()
    H1 = np.asarray(H1, float)
    H2 = np.asarray(H2, float)
    times, (u, u1, u2) = _forward_with_first(sys, [H1, H2], tol)
    w = solve_adjoint(sys, g, tol).states
    s = rate_plus_Q(sys, times, u)
    d1 = _first_rate_plus_Q(sys, u1, s, H1)
    d2 = _first_rate_plus_Q(sys, u2, s, H2)
    return pairing(times, d2 @ H1.T + d1 @ H2.T, w)


def rate_plus_Q(sys, times, u):
    return _rates(sys, u, times) + u @ sys.Q.T


def _first_rate_plus_Q(sys, ui, s, H):
    # ui' + Q ui = -B^{-1}(A ui + H (u' + Q u))
    return -sys.solve_B((ui @ sys.A.T + s @ H.T).T).T


def second_adjoint_gradient(sys: OracleSystem, H1, g: Callable, tol: float = DEFAULT_TOL,
                            memory_sign: float = 1.0) -> np.ndarray:
    """Symmetric matrix ``G`` with ``<G, H2>_F = <F''(B)[H1, H2], g>``.

    Needs the adjoint state ``w`` for ``g`` and a second adjoint ``z``
    driven by ``-H1 w' + Q^T H1 w``.  ``memory_sign = -1`` flips the sign of
    the ``Q`` term in that datum (kept for comparison studies only).
    """
    sys.check_source()
    H1 = np.asarray(H1, float)
    n = sys.n
    T = sys.T
    times, (u, u1) = _forward_with_first(sys, [H1], tol)
    BQ = sys.Q.T @ sys.B

    def w_rate(t, w):
        return sys.solve_B(g(t) + sys.A.T @ w + BQ @ w)

    def rhs(s, y):
        t = T - s
        w, z = y[:n], y[n:]
        dw = w_rate(t, w)
        data = -H1 @ dw + memory_sign * sys.Q.T @ (H1 @ w)
        return np.concatenate([-dw, -sys.solve_B(data + sys.A.T @ z + BQ @ z)])

    _, states, _ = _integrate(rhs, np.zeros(2 * n), T, tol)
    states = states[::-1]
    w, z = states[:, :n], states[:, n:]
    s = rate_plus_Q(sys, times, u)
    d1 = _first_rate_plus_Q(sys, u1, s, H1)
    integrand = w[:, :, None] * d1[:, None, :] + z[:, :, None] * s[:, None, :]
    G = simpson(integrand, x=times, axis=0)
    return _sym(G)


# ---------------------------------------------------------------------------
# Lipschitz scan and ill-posedness

def lipschitz_scan(sys: OracleSystem, H1, H2, dB, scales: Sequence[float],
                   tol: float = 1e-12) -> list[tuple[float, float]]:
    """Ratios ``||F''(B + s dB)[H1,H2] - F''(B)[H1,H2]||_C / (s ||dB||)``."""
    dB = _sym(np.asarray(dB, float))
    nrm = np.linalg.norm(dB, 2)
    if nrm == 0:
        raise ValueError("perturbation direction dB must be nonzero")
    ref = solve_second_derivative(sys, H1, H2, tol).states
    out = []
    for s in scales:
        try:
            pert = sys.with_B(sys.B + s * dB)
        except ValueError as exc:
            raise ValueError(f"B + {s:g} dB leaves the admissible set: {exc}") from exc
        other = solve_second_derivative(pert, H1, H2, tol).states
        out.append((float(s), sup_norm(other - ref) / (s * nrm)))
    return out


@dataclass
class IllposedReport:
    residuals: list
    norms: list
    monotone: bool
    reduction: float

    def passed(self, factor: float = 1.0) -> bool:
        return self.monotone and self.reduction >= factor


def illposed_probe(sys: OracleSystem, E_list: Sequence[np.ndarray], r: float, r_hat: float | None = None,
                   tol: float = 1e-11) -> IllposedReport:
    """Residuals ``||F(B + E_k) - F(B)||_{L^2}`` for perturbations of fixed size."""
    r_hat = r if r_hat is None else r_hat
    base = solve_forward(sys, tol=tol)
    res, norms = [], []
    for k, E in enumerate(E_list):
        E = _sym(np.asarray(E, float))
        nrm = float(np.linalg.norm(E, 2))
        if nrm > 0 and not (r_hat * (1 - 1e-12) <= nrm <= r * (1 + 1e-12)):
            raise ValueError(f"perturbation {k} has norm {nrm:.6g} outside [{r_hat:g}, {r:g}]")
        norms.append(nrm)
        if nrm == 0:
            res.append(0.0)
            continue
        diff = solve_forward(sys.with_B(sys.B + E), tol=tol).states - base.states
        res.append(float(np.sqrt(pairing(base.times, diff, diff))))
    monotone = all(b < a for a, b in zip(res, res[1:]))
    reduction = res[0] / res[-1] if res[-1] > 0 else np.inf
    return IllposedReport(res, norms, monotone, reduction)


def illposed_family(n: int = 16, r: float = 0.25, decay: float = 3.0):
    """System with ``B = I`` and rank-one perturbations ``E_k = r e_k e_k^T``.

    The generator rotates coordinate pairs and ``Q`` damps mildly, so modes
    do not mix across pairs; the source weights mode ``k`` by ``decay^-k``.
    Each ``E_k`` has norm ``r`` yet ``E_k v -> 0`` for every fixed ``v``.
    """
    if n % 2:
        raise ValueError("n must be even")
    A = np.zeros((n, n))
    for j in range(0, n, 2):
        A[j, j + 1], A[j + 1, j] = 2.0, -2.0
    Q = np.diag(np.linspace(0.1, 0.5, n))
    sys = OracleSystem(np.eye(n), A, Q, default_source(decay ** -np.arange(n)), 1.0, True, (0.5, 2.0))
    eye = np.eye(n)
    return sys, [r * np.outer(eye[k], eye[k]) for k in range(n)]


# ---------------------------------------------------------------------------
# CSV output

def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u{i}" for i in range(traj.n)])
        for t, row in zip(traj.times, traj.states):
            w.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in row])


def write_table_csv(rows, header, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.17g}" for x in row])
