"""Batch command line: ``simulate``, ``gradient``, ``hessian``, ``check``, ``illposed-demo``.

Every run is described by one JSON config file.  Exit codes: 0 success,
1 failed check, 2 bad config or input file, 3 inadmissible parameters,
4 unstable time step.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import fwi, verify
from .io import FormatError, read_field, read_seismogram, write_field, write_seismogram, write_vaf
from .rheology import PARAM_NAMES, InadmissibleError, ParameterBounds, ParameterPoint, RelaxationSpec, SingularMapError
from .scenario import BOX, F0, base_field, default_relaxation, smooth_direction
from .wave2d import (
    SIDES,
    AdjointData,
    CFLError,
    DiscreteOperators,
    Grid2D,
    GridError,
    ParameterField,
    RecordedWavefield,
    SmoothnessError,
    SourceSpec,
    build_operators,
    run_forward,
)

log = logging.getLogger("viscoadjoint")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ADMISSIBLE, EXIT_UNSTABLE = 0, 1, 2, 3, 4
GRADIENT_SELFCHECK_TOL = 3e-3
HESSIAN_SELFCHECK_TOL = 1e-2


class ConfigError(ValueError):
    """Unusable run configuration or input file."""


# ---------------------------------------------------------------------------
# config

def _get(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"config: missing '{where}.{key}'" if where else f"config: missing '{key}'")
    return d[key]


def _grid(g: dict) -> Grid2D:
    nx, nz, h = int(_get(g, "nx", "grid")), int(_get(g, "nz", "grid")), float(_get(g, "h", "grid"))
    if "boundary" in g:
        b = g["boundary"]
        if not isinstance(b, dict):
            raise ConfigError("config: grid.boundary must map sides to 'dirichlet' or 'free'")
        return Grid2D(nx, nz, h, tuple((s, b.get(s, "dirichlet")) for s in SIDES))
    return Grid2D.box(nx, nz, h, free_surface=bool(g.get("free_surface", False)))


def _relaxation(r: dict) -> RelaxationSpec:
    if "tau_sigma" in r:
        return RelaxationSpec(tuple(np.atleast_1d(r["tau_sigma"])), float(_get(r, "omega0", "relaxation")))
    return default_relaxation(float(r.get("f0", F0)), int(r.get("L", 1)))


def _bounds(b: dict | None) -> ParameterBounds:
    if b is None:
        return BOX
    return ParameterBounds(**{k: tuple(float(x) for x in _get(b, k, "bounds")) for k in PARAM_NAMES})


@dataclass(frozen=True)
class RunConfig:
    """Parsed run description; paths are resolved against ``base_dir``."""

    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(raw, path.resolve().parent)

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 1))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def grid(self) -> Grid2D:
        return _grid(_get(self.raw, "grid", ""))

    def relaxation(self) -> RelaxationSpec:
        return _relaxation(self.raw.get("relaxation", {}))

    def bounds(self) -> ParameterBounds:
        return _bounds(self.raw.get("bounds"))

    def field(self, grid: Grid2D) -> ParameterField:
        spec = self.raw.get("field", {"preset": "smooth"})
        bounds = self.bounds()
        if "file" in spec:
            path = self.resolve(spec["file"])
            if not path.is_file():
                raise ConfigError(f"parameter field file not found: {path}")
            return ParameterField(read_field(path, grid.cell_shape, grid.h), bounds)
        if "constant" in spec:
            c = spec["constant"]
            pt = ParameterPoint(*(float(_get(c, k, "field.constant")) for k in PARAM_NAMES))
            return ParameterField.homogeneous(grid, pt, bounds)
        preset = spec.get("preset", "smooth")
        if preset == "midpoint":
            return ParameterField.homogeneous(grid, bounds.midpoint(), bounds)
        if preset == "smooth":
            return base_field(grid, int(spec.get("seed", self.seed)), bounds, float(spec.get("variation", 0.15)))
        raise ConfigError(f"config: unknown field preset {preset!r}")

    def source(self) -> SourceSpec:
        s = _get(self.raw, "source", "")
        loc = tuple(int(x) for x in _get(s, "location", "source"))
        return SourceSpec(loc, s.get("component", "vz"), float(s.get("f0", F0)), float(s.get("amplitude", 1.0)))

    def receivers(self) -> tuple:
        rec = _get(self.raw, "receivers", "")
        return tuple((int(i), int(j), int(c)) for i, j, c in rec)

    def time_grid(self, ops: DiscreteOperators) -> tuple[float, int]:
        """``(dt, nt)``; ``dt = "auto"`` picks the smallest stable ``nt``."""
        t = _get(self.raw, "time", "")
        T = float(_get(t, "T", "time"))
        if "nt" in t:
            nt = int(t["nt"])
        elif t.get("dt", "auto") == "auto":
            nt = int(math.ceil(T / ops.dt_max))
        else:
            nt = int(round(T / float(t["dt"])))
            if abs(nt * float(t["dt"]) - T) > 1e-9 * T:
                raise ConfigError("config: time.T must be a whole number of steps dt")
        if nt < 1:
            raise ConfigError("config: need at least one time step")
        return T / nt, nt


@dataclass(frozen=True, eq=False)
class Setup:
    grid: Grid2D
    field: ParameterField
    relax: RelaxationSpec
    ops: DiscreteOperators
    source: SourceSpec
    receivers: tuple
    dt: float
    nt: int
    seed: int = 1


def build_setup(cfg: RunConfig, interior: bool = False) -> Setup:
    """Parse and pre-check everything (admissibility before any solve)."""
    try:
        grid = cfg.grid()
        relax = cfg.relaxation()
        field = cfg.field(grid)
        src = cfg.source()
        receivers = cfg.receivers()
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, (ConfigError, InadmissibleError)):
            raise
        raise ConfigError(f"config: {exc}") from None
    src.pattern(grid)
    fwi.check_receivers(grid, receivers)
    ops = fwi.interior_operators(grid, field, relax) if interior else build_operators(grid, field, relax)
    dt, nt = cfg.time_grid(ops)
    if dt > ops.dt_max * (1.0 + 1e-12):
        raise CFLError(f"dt = {dt:.4g} exceeds the stable step {ops.dt_max:.4g}")
    return Setup(grid, field, relax, ops, src, receivers, dt, nt, cfg.seed)


def load_traces(path, setup: Setup) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file not found: {path}")
    times, traces = read_seismogram(path)
    want = (setup.nt + 1, len(setup.receivers))
    if traces.shape != want:
        raise ConfigError(f"{path}: data shape {traces.shape} does not match the receiver geometry {want}")
    if np.max(np.abs(times - np.arange(setup.nt + 1) * setup.dt)) > 1e-9 * max(setup.dt * setup.nt, 1.0):
        raise ConfigError(f"{path}: sample times differ from the run's time grid")
    return traces


def load_direction(path, setup: Setup) -> ParameterField:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"direction file not found: {path}")
    return ParameterField(read_field(path, setup.grid.cell_shape, setup.grid.h))


# ---------------------------------------------------------------------------
# commands (library level; the argparse layer only adds files and exit codes)

def simulate(setup: Setup) -> RecordedWavefield:
    return run_forward(setup.ops, setup.source, setup.dt, setup.nt)


def gradient(setup: Setup, traces: np.ndarray, base: RecordedWavefield | None = None):
    """Misfit gradient density and the forward run it used."""
    base = simulate(setup) if base is None else base
    return fwi.Misfit(setup.receivers, traces).gradient(setup.ops, base), base


def _rel_gap(a: float, b: float) -> float:
    s = max(abs(a), abs(b))
    return abs(a - b) / s if s > 0 else 0.0


def gradient_selfcheck(setup: Setup, traces, base, grad) -> float:
    """Relative gap between ``<phi'(p) q, r>`` and ``<grad, q>`` for a seeded smooth ``q``."""
    q = smooth_direction(setup.grid, np.random.default_rng(setup.seed))
    g = fwi.Misfit(setup.receivers, traces).adjoint_data(base)
    return _rel_gap(fwi.phi_prime(setup.ops, q, base).pairing(g), grad.dot(q, setup.grid.h))


def hessian_traces(setup: Setup, p1: ParameterField, p2: ParameterField, base=None) -> np.ndarray:
    base = simulate(setup) if base is None else base
    return fwi.phi_second(setup.ops, p1, p2, base).sample(setup.receivers)


def hessian_adjoint(setup: Setup, phat: ParameterField, traces: np.ndarray, base=None):
    base = simulate(setup) if base is None else base
    g = AdjointData.from_receivers(setup.receivers, traces)
    return fwi.phi_second_adjoint(setup.ops, phat, g, base), base


def hessian_selfcheck(setup: Setup, phat, traces, base, field) -> float:
    q = smooth_direction(setup.grid, np.random.default_rng(setup.seed))
    g = AdjointData.from_receivers(setup.receivers, traces)
    return _rel_gap(fwi.phi_second(setup.ops, phat, q, base).pairing(g), field.dot(q, setup.grid.h))


# ---------------------------------------------------------------------------
# argparse layer

def _setup(args, interior=False) -> Setup:
    return build_setup(RunConfig.load(args.config), interior)


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_simulate(args) -> int:
    s = _setup(args)
    if args.stride < 1:
        raise ConfigError("--stride must be at least 1")
    rec = simulate(s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snaps = rec.velocity(slice(None, None, args.stride))
    write_vaf(out / "wavefield.vaf", snaps, s.grid.h, s.dt * args.stride)
    write_seismogram(out / "receivers.csv", rec.times, rec.sample(s.receivers))
    log.info("wrote %d snapshots and %d traces to %s", len(snaps), len(s.receivers), out)
    return EXIT_OK


def cmd_gradient(args) -> int:
    s = _setup(args, interior=True)
    traces = load_traces(args.data, s)
    grad, base = gradient(s, traces)
    write_field(_out(args.out), grad.values, s.grid.h)
    if args.selfcheck:
        gap = gradient_selfcheck(s, traces, base, grad)
        ok = gap <= GRADIENT_SELFCHECK_TOL
        print(f"{'PASS' if ok else 'FAIL'} gradient-selfcheck rel_gap={gap:.3e}")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def cmd_hessian(args) -> int:
    s = _setup(args, interior=True)
    p1 = load_direction(args.direction, s)
    base = simulate(s)
    if not args.adjoint:
        p2 = load_direction(args.direction2, s) if args.direction2 else p1
        tr = hessian_traces(s, p1, p2, base)
        write_seismogram(_out(args.out), base.times, tr)
        return EXIT_OK
    if args.data is None:
        raise ConfigError("hessian --adjoint needs a data file")
    traces = load_traces(args.data, s)
    field, _ = hessian_adjoint(s, p1, traces, base)
    write_field(_out(args.out), field.values, s.grid.h)
    if args.selfcheck:
        gap = hessian_selfcheck(s, p1, traces, base, field)
        ok = gap <= HESSIAN_SELFCHECK_TOL
        print(f"{'PASS' if ok else 'FAIL'} hessian-selfcheck rel_gap={gap:.3e}")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        verify.suite(args.suite)
    except KeyError:
        print(f"unknown suite {args.suite!r} (choose all, oracle, pde or rheology)", file=sys.stderr)
        return EXIT_CONFIG
    reports = verify.run_suite(args.suite, args.out, echo=lambda line: print(line, flush=True))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def cmd_illposed(args) -> int:
    rep = verify.illposed_demo(n=args.n, nt=args.nt, r_fraction=args.r_fraction)
    print(rep.line())
    if args.out:
        rep.write_csv(_out(args.out))
    return EXIT_OK if rep.passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="viscoadjoint", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="thread cap for numerical libraries (fallback: VISCOADJOINT_THREADS)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="forward run: VAF1 velocity snapshots and receiver CSV")
    p.add_argument("config")
    p.add_argument("--out", default="run")
    p.add_argument("--stride", type=int, default=1, help="keep every k-th snapshot")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradient", help="misfit gradient as a 5-component VAF1 field")
    p.add_argument("config")
    p.add_argument("data", help="observed receiver CSV")
    p.add_argument("--out", default="gradient.vaf")
    p.add_argument("--selfcheck", action="store_true")
    p.set_defaults(func=cmd_gradient)

    p = sub.add_parser("hessian", help="second derivative at the receivers, or its adjoint with --adjoint")
    p.add_argument("config")
    p.add_argument("direction", help="5-component VAF1 direction")
    p.add_argument("data", nargs="?", help="receiver CSV paired against (needed with --adjoint)")
    p.add_argument("--direction2", help="second direction (default: the first)")
    p.add_argument("--adjoint", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--selfcheck", action="store_true")
    p.set_defaults(func=cmd_hessian)

    p = sub.add_parser("check", help="run a verification suite")
    p.add_argument("suite", help="all | oracle | pde | rheology")
    p.add_argument("--out", default=None, help="directory for per-test CSV evidence")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("illposed-demo", help="residuals of shrinking fixed-amplitude perturbations")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--nt", type=int, default=300)
    p.add_argument("--r-fraction", type=float, default=0.05)
    p.add_argument("--out", default=None, help="CSV of the residual ladder")
    p.set_defaults(func=cmd_illposed)
    return ap


def _threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("VISCOADJOINT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VISCOADJOINT_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "hessian" and args.out is None:
        args.out = "hessian.vaf" if args.adjoint else "hessian.csv"
    try:
        n = _threads(args.threads)
        if n is not None and n < 1:
            raise ConfigError("--threads must be positive")
        with threadpool_limits(limits=n):
            return args.func(args)
    except (ConfigError, FormatError, GridError, SmoothnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InadmissibleError, SingularMapError) as exc:
        print(f"inadmissible parameters: {exc}", file=sys.stderr)
        return EXIT_ADMISSIBLE
    except CFLError as exc:
        print(f"unstable: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
