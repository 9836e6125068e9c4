"""Named verification programs with pass/fail verdicts and CSV evidence.

Each program returns a :class:`TestReport`; ``report.line()`` is the
machine-readable verdict ``PASS|FAIL <name> <metric>=<value>`` naming the
metric closest to (or furthest beyond) its window.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evolution_oracle as eo
from . import fwi
from .io import write_table
from .rheology import (
    IsotropicMap,
    ParameterPoint,
    apply_Cinv_derivative,
    apply_Cinv_second,
    moduli_from_params,
)
from .scenario import BOX, default_relaxation, make_scenario, smooth_direction
from .wave2d import (
    AdjointData,
    DenseForcing,
    build_operators,
    make_wavelet,
    wavelet_value,
    run_adjoint,
    run_forward,
    source_pairing,
    step_weights,
)


@dataclass
class TestReport:
    """Outcome of one verification program."""

    __test__ = False  # not a pytest class

    name: str
    params: dict
    metrics: dict
    windows: dict
    rows: list = field(default_factory=list)
    header: list = field(default_factory=list)
    seconds: float = 0.0

    def _margin(self, key):
        lo, hi = self.windows[key]
        v = self.metrics[key]
        if not np.isfinite(v):
            return -np.inf
        # relative distance to each finite, nonzero edge; a zero floor only flags negatives
        lo_m = (v - lo) / abs(lo) if lo != 0 and np.isfinite(lo) else (np.inf if v >= lo else -np.inf)
        hi_m = (hi - v) / abs(hi) if hi != 0 and np.isfinite(hi) else (np.inf if v <= hi else -np.inf)
        return min(lo_m, hi_m)

    @property
    def passed(self) -> bool:
        return all(self._margin(k) >= 0 for k in self.windows)

    def worst(self) -> tuple[str, float]:
        if not self.windows:
            return "none", float("nan")
        k = min(self.windows, key=self._margin)
        return k, float(self.metrics[k])

    def line(self) -> str:
        k, v = self.worst()
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {k}={v:.3e}"

    def write_csv(self, path) -> None:
        if self.rows:
            write_table(path, self.header, self.rows)


def _report(name, params, metrics, windows, rows=(), header=(), t0=None):
    return TestReport(name, params, metrics, windows, list(rows), list(header),
                      0.0 if t0 is None else time.perf_counter() - t0)


def _order(hs, gaps) -> float:
    """Least-squares slope of ``log gap`` against ``log h``."""
    return float(np.polyfit(np.log(hs), np.log(gaps), 1)[0])


# ---------------------------------------------------------------------------
# material maps

def rheology_identities(seed: int = 1, points: int = 100) -> TestReport:
    """Inverse round trip and finite-difference checks of the compliance derivatives.

    ``points`` random admissible parameter points per dimension, drawn from
    the default box; each contributes the relaxed moduli ``(mu0, pi0)`` and
    the scaled pair ``(tauS mu0, tauP pi0)``.  Unit directions, central
    differences with ``h = 1e-4`` (first) and ``1e-3`` (second derivative).
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    alpha = default_relaxation().alpha
    lo, hi = np.array(BOX.lower()), np.array(BOX.upper())
    rows = []

    def unit():
        e = rng.standard_normal(2)
        return tuple(e / np.linalg.norm(e))

    for dim in (2, 3):
        for _ in range(points):
            pt = ParameterPoint(*rng.uniform(lo, hi))
            md = moduli_from_params(pt, alpha)
            for m, p in ((md.mu0, md.pi0), (pt.tauS * md.mu0, pt.tauP * md.pi0)):
                m, p = float(m), float(p)
                X = rng.standard_normal((dim, dim))
                M = X + X.T
                c = IsotropicMap(m, p, dim)
                inv = np.linalg.norm(c.inverse()(c(M)) - M) / np.linalg.norm(M)
                e1, e2 = unit(), unit()
                h = 1e-4
                fd = (IsotropicMap(m + h * e1[0], p + h * e1[1], dim).inverse()(M)
                      - IsotropicMap(m - h * e1[0], p - h * e1[1], dim).inverse()(M)) / (2 * h)
                ex = apply_Cinv_derivative(m, p, *e1, M, dim)
                d1 = np.linalg.norm(fd - ex) / np.linalg.norm(ex)
                h = 1e-3
                fd = (apply_Cinv_derivative(m + h * e2[0], p + h * e2[1], *e1, M, dim)
                      - apply_Cinv_derivative(m - h * e2[0], p - h * e2[1], *e1, M, dim)) / (2 * h)
                ex = apply_Cinv_second(m, p, e1, e2, M, dim)
                d2 = np.linalg.norm(fd - ex) / np.linalg.norm(ex)
                rows.append((dim, m, p, inv, d1, d2))
    r = np.array(rows)
    metrics = {"inverse_rel": float(r[:, 3].max()), "first_fd_rel": float(r[:, 4].max()),
               "second_fd_rel": float(r[:, 5].max()), "second_fd_rel_median": float(np.median(r[:, 5]))}
    windows = {"inverse_rel": (0, 1e-13), "first_fd_rel": (0, 1e-6), "second_fd_rel": (0, 1e-5)}
    return _report("rheology-identities", {"seed": seed, "points": points}, metrics, windows, rows,
                   ["dim", "m", "p", "inverse_rel", "first_fd_rel", "second_fd_rel"], t0)


def source_regularity(f0: float = 5.0, dt: float = 1e-3, nt: int = 1000) -> TestReport:
    """The wavelet and its first two derivatives vanish at ``t = 0``.

    With ``f(0)`` exact, ``f'(0) ~ f(s)/s`` and ``f''(0) ~ 2 f(s)/s^2`` at
    ``s = 1e-6 t0``; a linear or quadratic onset would make these order one.
    """
    t0 = time.perf_counter()
    w = make_wavelet(f0, dt, nt)
    scale = np.max(np.abs(w))
    tau = 1.0 / f0
    e = 1e-6 * tau
    fe = abs(float(wavelet_value(e, f0)))
    d0 = abs(float(wavelet_value(0.0, f0)))
    d1, d2 = fe / e * tau, 2.0 * fe / e ** 2 * tau ** 2
    metrics = {"f0_rel": d0 / scale, "df_rel": d1 / scale, "d2f_rel": d2 / scale}
    windows = {k: (0, 1e-10) for k in metrics}
    return _report("source-regularity", {"f0": f0, "dt": dt, "nt": nt}, metrics, windows, t0=t0)


# ---------------------------------------------------------------------------
# abstract evolution oracle

def _rand_dir(rng, n):
    X = rng.standard_normal((n, n))
    X = X + X.T
    return X / np.linalg.norm(X, 2)


def _sampled(g, times):
    return np.array([g(t) for t in times])


def _oracle_dot(order, trials, seed, n):
    sys = eo.random_system(n, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    base = eo.solve_forward(sys)
    src = eo.rate_plus_Q(sys, base.times, base.states)
    rows = []
    for k in range(trials):
        H1, H2 = _rand_dir(rng, n), _rand_dir(rng, n)
        g = eo.smooth_data(rng, n)
        if order == 1:
            lhs = eo.pairing(base.times, eo.solve_first_derivative(sys, H1).states, _sampled(g, base.times))
            rhs = eo.pairing(base.times, src @ H1.T, eo.solve_adjoint(sys, g).states)
        else:
            lhs = eo.pairing(base.times, eo.solve_second_derivative(sys, H1, H2).states, _sampled(g, base.times))
            rhs = float(np.sum(eo.second_adjoint_gradient(sys, H1, g) * H2))
        rows.append((k, lhs, rhs, abs(lhs - rhs) / abs(lhs)))
    return rows


def _pde_discrete_dot(trials, seed, n, nt):
    sc = make_scenario(n, nt, T=0.5, seed=seed)
    ops, dt = sc.ops, sc.dt
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(trials):
        f = DenseForcing(rng.standard_normal((2 * nt + 1, ops.layout.nv)), dt)
        g = AdjointData(nt, rng.standard_normal((nt + 1, ops.layout.size)))
        lhs = run_forward(ops, f, dt, nt).pairing(g)
        rhs = source_pairing(ops, f, run_adjoint(ops, g, dt, nt, mode="discrete"))
        rows.append((k, lhs, rhs, abs(lhs - rhs) / abs(lhs)))
    return rows


def _norm_traces(sc, g):
    c = step_weights(sc.nt, sc.dt)
    return float(np.sqrt(np.sum(c[:, None] * g.traces ** 2)))


def _pde_continuous(order, trials, seed, levels, T):
    """Duality gaps at each resolution: rows ``(n, nt, trial, lhs, rhs, normalised, relative)``."""
    rows = []
    for n, nt in levels:
        sc = make_scenario(n, nt, T=T, seed=1)
        base = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
        rng = np.random.default_rng(seed)
        for k in range(trials):
            p = smooth_direction(sc.grid, rng)
            q = smooth_direction(sc.grid, rng) if order == 2 else None
            g = sc.smooth_traces(rng)
            if order == 1:
                out = fwi.phi_prime(sc.ops, p, base)
                rhs = fwi.phi_prime_adjoint(sc.ops, g, base).dot(p, sc.grid.h)
            else:
                out = fwi.phi_second(sc.ops, p, q, base)
                rhs = fwi.phi_second_adjoint(sc.ops, p, g, base).dot(q, sc.grid.h)
            lhs = out.pairing(g)
            gap = abs(lhs - rhs)
            rows.append((n, nt, k, lhs, rhs, gap / (out.l2_norm() * _norm_traces(sc, g)), gap / abs(lhs)))
    return rows


def dot_test(target: str = "oracle", order: int = 1, trials: int | None = None, seed: int = 1,
             levels=None, T: float | None = None, n: int | None = None, nt: int | None = None) -> TestReport:
    """Pairing identities ``<L x, y> = <x, L* y>``.

    ``target``: ``"oracle"`` (dense evolution system), ``"pde-discrete"``
    (grid transpose of the solver) or ``"pde-continuous"`` (gradient
    formulas against the continuous adjoint, as a refinement study over
    ``levels = [(n, nt), ...]``).
    """
    t0 = time.perf_counter()
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if target == "oracle":
        trials = 20 if trials is None else trials
        n = 12 if n is None else n
        rows = _oracle_dot(order, trials, seed, n)
        worst = max(r[3] for r in rows)
        return _report(f"dot-oracle-{order}", {"seed": seed, "trials": trials, "n": n},
                       {"max_rel_gap": worst}, {"max_rel_gap": (0, 1e-8)},
                       rows, ["trial", "lhs", "rhs", "rel_gap"], t0)
    if target == "pde-discrete":
        if order != 1:
            raise ValueError("the discrete transpose test covers the first-order map only")
        trials = 3 if trials is None else trials
        n, nt = (32 if n is None else n), (200 if nt is None else nt)
        rows = _pde_discrete_dot(trials, seed, n, nt)
        worst = max(r[3] for r in rows)
        return _report("dot-pde-discrete", {"seed": seed, "trials": trials, "n": n, "nt": nt},
                       {"max_rel_gap": worst}, {"max_rel_gap": (0, 1e-12)},
                       rows, ["trial", "lhs", "rhs", "rel_gap"], t0)
    if target == "pde-continuous":
        trials = 5 if trials is None else trials
        if levels is None:
            levels = [(16, 150), (32, 300), (64, 600)] if order == 1 else [(24, 200), (36, 300), (48, 400)]
        T = (1.0 if order == 1 else 0.9) if T is None else T
        rows = _pde_continuous(order, trials, seed, levels, T)
        ns = [lv[0] for lv in levels]
        norm = [max(r[5] for r in rows if r[0] == m) for m in ns]
        rel = [max(r[6] for r in rows if r[0] == m) for m in ns]
        order_obs = _order([1.0 / m for m in ns], norm)
        limit = 3e-3 if order == 1 else 1e-2
        metrics = {"finest_rel_gap": rel[-1], "finest_normalised_gap": norm[-1],
                   "observed_order": order_obs, "shrink_factor": norm[0] / norm[-1]}
        windows = {"finest_rel_gap": (0, limit), "observed_order": (1.0, np.inf),
                   "shrink_factor": (1.0, np.inf)}
        return _report(f"dot-pde-continuous-{order}", {"seed": seed, "trials": trials, "levels": levels, "T": T},
                       metrics, windows, rows,
                       ["n", "nt", "trial", "lhs", "rhs", "normalised_gap", "rel_gap"], t0)
    raise ValueError(f"unknown dot-test target {target!r}")


# ---------------------------------------------------------------------------
# Taylor and symmetry

def _ratios(rem):
    rem = np.asarray(rem)
    return rem[:-1] / rem[1:]


def taylor_test(target: str = "oracle", order: int = 1, ladder=(0.1, 0.05, 0.025, 0.0125), seed: int = 1,
                n: int = 24, nt: int = 150) -> TestReport:
    """Remainder ratios under halving of the step: 4 (first order) or 8 (second order)."""
    t0 = time.perf_counter()
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if target == "oracle":
        sys = eo.random_system(12, seed=seed + 3)
        H = _rand_dir(np.random.default_rng(seed), 12)
        F0 = eo.solve_forward(sys, tol=1e-12).states
        dF = eo.solve_first_derivative(sys, H, tol=1e-12).states
        d2F = eo.solve_second_derivative(sys, H, H, tol=1e-12).states if order == 2 else 0.0
        if not np.any(H):
            rem = [0.0] * len(ladder)
        else:
            rem = [eo.sup_norm(eo.solve_forward(sys.with_B(sys.B + h * H), tol=1e-12).states - F0 - h * dF
                               - 0.5 * h * h * d2F) for h in ladder]
        tol = 0.3 if order == 1 else 0.8
    elif target == "pde":
        sc = make_scenario(n, nt, T=0.6, seed=seed)
        base = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
        p = smooth_direction(sc.grid, np.random.default_rng(seed))
        lin = fwi.phi_prime(sc.ops, p, base)
        sec = fwi.phi_second(sc.ops, p, p, base, lin, lin) if order == 2 else None
        rem = []
        for h in ladder:
            ops = build_operators(sc.grid, sc.field.axpy(h, p), sc.relax)
            r = run_forward(ops, sc.source, sc.dt, sc.nt).states - base.states - h * lin.states
            if sec is not None:
                r = r - 0.5 * h * h * sec.states
            rem.append(float(np.sqrt(sum(c * sc.ops.inner(x, x) for c, x in
                                         zip(step_weights(sc.nt, sc.dt), r)))))
        tol = 0.5 if order == 1 else 1.0
    else:
        raise ValueError(f"unknown Taylor target {target!r}")
    expected = 4.0 if order == 1 else 8.0
    rows = [(h, r) for h, r in zip(ladder, rem)]
    if max(rem) == 0.0:
        last = expected  # degenerate direction: remainders vanish identically
    else:
        last = float(_ratios(rem)[-1])
    return _report(f"taylor-{target}-{order}", {"seed": seed, "ladder": list(ladder)},
                   {"last_ratio": last}, {"last_ratio": (expected - tol, expected + tol)},
                   rows, ["h", "remainder"], t0)


def symmetry_test(target: str = "oracle", trials: int = 3, seed: int = 1, n: int = 24, nt: int = 150) -> TestReport:
    """Second derivative unchanged when the two directions are swapped."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rows = []
    if target == "oracle":
        sys = eo.random_system(12, seed=seed + 7)
        for k in range(trials):
            H1, H2 = _rand_dir(rng, 12), _rand_dir(rng, 12)
            a = eo.solve_second_derivative(sys, H1, H2).states
            b = eo.solve_second_derivative(sys, H2, H1).states
            rows.append((k, eo.sup_norm(a - b) / eo.sup_norm(a)))
        limit = 1e-10
    elif target == "pde":
        sc = make_scenario(n, nt, T=0.6, seed=seed)
        base = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
        for k in range(trials):
            p, q = smooth_direction(sc.grid, rng), smooth_direction(sc.grid, rng)
            lp, lq = fwi.phi_prime(sc.ops, p, base), fwi.phi_prime(sc.ops, q, base)
            a = fwi.phi_second(sc.ops, p, q, base, lp, lq)
            b = fwi.phi_second(sc.ops, q, p, base, lq, lp)
            rows.append((k, float(np.max(np.abs(a.states - b.states)) / np.max(np.abs(a.states)))))
        limit = 1e-11
    else:
        raise ValueError(f"unknown symmetry target {target!r}")
    worst = max(r[1] for r in rows)
    return _report(f"symmetry-{target}", {"seed": seed, "trials": trials}, {"max_rel_asym": worst},
                   {"max_rel_asym": (0, limit)}, rows, ["trial", "rel_asym"], t0)


def second_adjoint_identity(seed: int = 1, trials: int = 20, n: int = 12) -> TestReport:
    """Oracle pairing identity for the second-order adjoint."""
    t0 = time.perf_counter()
    sys = eo.random_system(n, seed=seed + 11)
    rng = np.random.default_rng(seed)
    times = eo.solve_forward(sys).times
    rows = []
    for k in range(trials):
        H1, H2 = _rand_dir(rng, n), _rand_dir(rng, n)
        g = eo.smooth_data(rng, n)
        direct = eo.pairing(times, eo.solve_second_derivative(sys, H1, H2).states, _sampled(g, times))
        via = eo.second_adjoint_pairing(sys, H1, g, H2)
        rows.append((k, direct, via, abs(direct - via) / abs(direct)))
    worst = max(r[3] for r in rows)
    return _report("second-adjoint-oracle", {"seed": seed, "trials": trials}, {"max_rel_gap": worst},
                   {"max_rel_gap": (0, 1e-8)}, rows, ["trial", "direct", "adjoint", "rel_gap"], t0)


def lipschitz_test(seed: int = 1, scales=(1e-2, 1e-3, 1e-4)) -> TestReport:
    """Lipschitz quotients of the second derivative stay bounded and stable."""
    t0 = time.perf_counter()
    sys = eo.random_system(12, seed=seed + 5)
    rng = np.random.default_rng(seed)
    H1, H2, dB = _rand_dir(rng, 12), _rand_dir(rng, 12), _rand_dir(rng, 12)
    scan = eo.lipschitz_scan(sys, H1, H2, dB, list(scales))
    r = np.array([x[1] for x in scan])
    spread = float(r.max() / r.min()) if np.all(r > 0) else np.inf
    return _report("lipschitz-oracle", {"seed": seed, "scales": list(scales)},
                   {"ratio_spread": spread, "max_ratio": float(r.max())},
                   {"ratio_spread": (1.0, 2.0), "max_ratio": (0, np.inf)}, scan, ["s", "ratio"], t0)


# ---------------------------------------------------------------------------
# PDE-level properties

def misfit_gradient_test(n: int = 64, nt: int = 600, directions: int = 5, seed: int = 1,
                         step: float = 1e-3) -> TestReport:
    """Adjoint directional derivatives of the misfit against central differences."""
    t0 = time.perf_counter()
    from .scenario import base_field
    sc = make_scenario(n, nt, T=1.0, seed=seed)
    true = base_field(sc.grid, seed=seed + 1)
    obs = run_forward(build_operators(sc.grid, true, sc.relax), sc.source, sc.dt, sc.nt)
    J = fwi.Misfit(sc.receivers, obs.sample(sc.receivers))
    base = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
    G = J.gradient(sc.ops, base)
    rng = np.random.default_rng(seed + 10)
    rows = []
    for k in range(directions):
        d = smooth_direction(sc.grid, rng, fraction=1.0)
        vals = [J.value(run_forward(build_operators(sc.grid, sc.field.axpy(s, d), sc.relax),
                                    sc.source, sc.dt, sc.nt)) for s in (step, -step)]
        fd = (vals[0] - vals[1]) / (2 * step)
        ad = G.dot(d, sc.grid.h)
        rows.append((k, fd, ad, abs(fd - ad) / abs(fd)))
    worst = max(r[3] for r in rows)
    return _report("misfit-gradient", {"n": n, "nt": nt, "seed": seed, "step": step},
                   {"max_rel_err": worst}, {"max_rel_err": (0, 1e-3)},
                   rows, ["direction", "finite_difference", "adjoint", "rel_err"], t0)


def illposed_demo(n: int = 32, nt: int = 300, r_fraction: float = 0.05, delta_cells: int = 8,
                  ladder=(1, 2, 4, 8, 16), centre=None, T: float = 1.0, seed: int = 1) -> TestReport:
    """Fixed-amplitude indicator perturbations on shrinking discs.

    Residuals ``||phi(p + r chi_k) - phi(p)||`` must decrease strictly with
    a total reduction of at least 4 while ``||p_k - p||_inf = r``.
    """
    t0 = time.perf_counter()
    sc = make_scenario(n, nt, T=T, seed=seed)
    base = run_forward(sc.ops, sc.source, sc.dt, sc.nt)
    h = sc.grid.h
    if centre is None:
        centre = ((n // 2 + 0.5) * h, (n // 2 + 0.5) * h)
    amp = r_fraction * np.asarray(BOX.widths())
    rows = []
    for k in ladder:
        pk = fwi.indicator_perturbation(sc.field, sc.grid, centre, delta_cells * h / k, amp)
        dist = float(np.max(np.abs(pk.values - sc.field.values) / np.where(amp > 0, amp, 1.0)[:, None, None]))
        ops = build_operators(sc.grid, pk, sc.relax)
        diff = run_forward(ops, sc.source, sc.dt, sc.nt).states - base.states
        res = float(np.sqrt(sum(c * sc.ops.inner(x, x) for c, x in zip(step_weights(sc.nt, sc.dt), diff))))
        rows.append((k, res, dist if np.any(amp) else 0.0))
    res = np.array([r[1] for r in rows])
    rising = int(np.count_nonzero(res[1:] >= res[:-1])) if np.any(res) else 0
    reduction = float(res[0] / res[-1]) if res[-1] > 0 else (np.inf if res[0] > 0 else 1.0)
    dist = [r[2] for r in rows]
    metrics = {"non_decreasing_steps": float(rising), "reduction": reduction,
               "sup_distance_spread": float(max(dist) - min(dist)), "max_residual": float(res.max())}
    windows = {"non_decreasing_steps": (0.0, 0.0), "reduction": (4.0, np.inf), "sup_distance_spread": (0.0, 1e-12)}
    return _report("illposed-demo", {"n": n, "nt": nt, "r_fraction": r_fraction, "delta_cells": delta_cells,
                                     "ladder": list(ladder), "centre": centre},
                   metrics, windows, rows, ["n", "residual", "sup_distance_over_r"], t0)


# ---------------------------------------------------------------------------
# suites

def suite(name: str):
    """Programs of a named suite (callables returning reports)."""
    rheology = [rheology_identities, source_regularity]
    oracle = [lambda: dot_test("oracle", 1), lambda: dot_test("oracle", 2),
              lambda: taylor_test("oracle", 1), lambda: taylor_test("oracle", 2),
              lambda: symmetry_test("oracle"), second_adjoint_identity, lipschitz_test]
    pde = [lambda: dot_test("pde-discrete", 1), lambda: dot_test("pde-continuous", 1),
           lambda: dot_test("pde-continuous", 2), lambda: taylor_test("pde", 1), lambda: taylor_test("pde", 2),
           lambda: symmetry_test("pde"), misfit_gradient_test, illposed_demo]
    table = {"rheology": rheology, "oracle": oracle, "pde": pde, "all": rheology + oracle + pde}
    if name not in table:
        raise KeyError(name)
    return table[name]


def run_suite(name: str, out_dir: str | Path | None = None, echo=print) -> list[TestReport]:
    reports = []
    for prog in suite(name):
        rep = prog()
        reports.append(rep)
        if echo is not None:
            echo(rep.line())
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            rep.write_csv(Path(out_dir) / f"{rep.name}.csv")
    return reports


__all__ = ["TestReport", "dot_test", "illposed_demo", "lipschitz_test", "misfit_gradient_test",
           "rheology_identities", "run_suite", "second_adjoint_identity", "source_regularity", "suite",
           "symmetry_test", "taylor_test"]
