"""Convergence studies, the pulsed-boundary benchmark with the locking
comparison, and the permeability-exponent sweep.

Runs can be dispatched to worker processes.  Cases hold closures and do not
pickle, so parallel studies take a :class:`CaseSpec` that each worker turns
back into a case; results are merged in the declared row order.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ThermoporoError
from .mesh import build_structured
from .model import PhysicalParams, build_case, pulse
from .solver import ClassicalSolver, MafeaSolver, SolverSettings, element_pair, undershoot
from .spaces import FeSpace, FieldFunction, FieldVector, compute_error, field_norm, write_csv

log = logging.getLogger(__name__)

SOLVERS = {"mafea": MafeaSolver, "classical": ClassicalSolver}
FIELDS = ("u", "p", "T")
ERROR_COLUMNS = tuple(f"{f}_{nm}" for f in FIELDS for nm in ("L2", "H1"))


# case descriptions ------------------------------------------------------------


def _zero(x, y, t=None):
    return np.zeros_like(np.asarray(x, dtype=float))


def apply_boundary_overrides(case, overrides):
    """Replace Dirichlet data per (field, tag).

    ``overrides`` holds (field, tag, kind) with field in u1, u2, p, T and kind
    'zero' (homogeneous value), 'pulse' (sin t on the middle of the side) or
    'free' (drop the condition; the natural condition takes over).
    """
    if not overrides:
        return case
    dirichlet = {k: dict(v) for k, v in case.bcs.dirichlet.items()}
    for name, tag, kind in overrides:
        if name not in ("u1", "u2", "p", "T"):
            raise ConfigurationError(f"boundary override names unknown field {name!r}")
        if tag not in (1, 2, 3, 4):
            raise ConfigurationError(f"boundary override names unknown segment {tag!r}")
        entry = dirichlet.setdefault(name, {})
        if kind == "zero":
            entry[tag] = _zero
        elif kind == "pulse":
            entry[tag] = pulse(tag)
        elif kind == "free":
            entry.pop(tag, None)
        else:
            raise ConfigurationError(f"boundary override kind must be zero, pulse or free, got {kind!r}")
    bcs = replace(case.bcs, dirichlet=dirichlet)
    return replace(case, bcs=bcs)


@dataclass(frozen=True)
class CaseSpec:
    """Picklable description of a case: name, parameters, build options and
    boundary overrides."""

    name: str
    params: Optional[PhysicalParams] = None
    options: tuple = ()
    boundary: tuple = ()

    def with_params(self, **changes):
        base = self.params if self.params is not None else build_case(self.name, **dict(self.options)).params
        return replace(self, params=base.replace(**changes))

    def build(self):
        case = build_case(self.name, self.params, **dict(self.options))
        return apply_boundary_overrides(case, self.boundary)


def _build(case):
    return case.build() if isinstance(case, CaseSpec) else case


def _map(fn, tasks, jobs=1):
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    if not all(isinstance(t[0], CaseSpec) for t in tasks):
        log.info("cases given as objects cannot be sent to workers; running serially")
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*tasks)))


# single runs ---------------------------------------------------------------


@dataclass
class RunResult:
    state: object
    records: list
    snapshots: list
    solver: object


def solve(case, n, pair="2-1", settings=SolverSettings(), solver="mafea", log_path=None, snapshot_every=0):
    """Run one case on the n x n structured mesh of the unit square."""
    if solver not in SOLVERS:
        raise ConfigurationError(f"solver must be one of {sorted(SOLVERS)}, got {solver!r}")
    stepper = SOLVERS[solver](_build(case), build_structured(n, n), pair, settings)
    state, recs, snaps = stepper.run(log_path=log_path, snapshot_every=snapshot_every)
    return RunResult(state, recs, snaps, stepper)


def field_errors(state, case, t, relative=None):
    """L2 and H1 errors of u, p, T against the exact solution, in
    ERROR_COLUMNS order."""
    if case.exact is None:
        raise ConfigurationError(f"case {case.name!r} has no exact solution")
    relative = case.relative_errors if relative is None else relative
    out = []
    for f in FIELDS:
        exact = case.exact.field(f)
        for nm in ("L2", "H1"):
            out.append(compute_error(getattr(state, f), exact, nm, t, relative))
    return out


def _coefficients(state):
    return {f: getattr(state, f).coefficients for f in FIELDS}


def _error_task(case, n, pair, settings, solver, relative):
    c = _build(case)
    res = solve(c, n, pair, settings, solver)
    return field_errors(res.state, c, res.state.t, relative)


def _coefficient_task(case, n, pair, settings, solver):
    res = solve(case, n, pair, settings, solver)
    return _coefficients(res.state)


def _fields_on(n, pair, coeffs):
    ku, ks = element_pair(pair)
    mesh = build_structured(n, n)
    U, S = FeSpace(mesh, ku, 2), FeSpace(mesh, ks, 1)
    return {f: FieldVector(U if f == "u" else S, coeffs[f]) for f in FIELDS}


# tables ------------------------------------------------------------------------


def convergence_rates(errors):
    """log2(e_coarse / e_fine) between consecutive rows."""
    e = np.asarray(errors, dtype=float)
    return np.log2(e[:-1] / e[1:])


@dataclass
class ConvergenceTable:
    """Errors per row (mesh size or time step) and the rates between
    consecutive rows; the rate of row i compares it with row i - 1."""

    parameter: str
    values: np.ndarray
    columns: tuple
    errors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.errors = np.atleast_2d(np.asarray(self.errors, dtype=float))
        if self.errors.shape != (len(self.values), len(self.columns)):
            raise ConfigurationError(
                f"error table shape {self.errors.shape} does not match "
                f"{len(self.values)} rows x {len(self.columns)} columns"
            )

    @property
    def rates(self):
        return convergence_rates(self.errors)

    def column(self, name):
        return self.errors[:, self.columns.index(name)]

    def rate(self, name, row=-1):
        """Rate into ``row`` (default: the finest pair)."""
        return float(self.rates[row, self.columns.index(name)])

    def header(self):
        cols = [self.parameter]
        for c in self.columns:
            cols += [f"e_{c}", f"CR_{c}"]
        return cols

    def rows(self):
        rates = self.rates
        out = []
        for i, v in enumerate(self.values):
            row = [f"{v:.17g}"]
            for j in range(len(self.columns)):
                row.append(f"{self.errors[i, j]:.17g}")
                row.append("" if i == 0 else f"{rates[i - 1, j]:.17g}")
            out.append(row)
        return out

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.header()) + "\n")
            for row in self.rows():
                fh.write(",".join(row) + "\n")

    def format(self):
        lines = ["  ".join(f"{c:>11s}" for c in self.header())]
        rates = self.rates
        for i, v in enumerate(self.values):
            cells = [f"{v:11.4e}"]
            for j in range(len(self.columns)):
                cells.append(f"{self.errors[i, j]:11.4e}")
                cells.append(f"{'':>11s}" if i == 0 else f"{rates[i - 1, j]:11.4f}")
            lines.append("  ".join(cells))
        return "\n".join(lines)


def _check_halving(values, what):
    values = list(values)
    if len(values) < 2:
        raise ConfigurationError(f"a {what} study needs at least two entries, got {values}")
    for a, b in zip(values[:-1], values[1:]):
        if not math.isclose(b, 2 * a, rel_tol=1e-12):
            raise ConfigurationError(f"{what} sequence must refine by exactly 2 per row, got {values}")


# studies -----------------------------------------------------------------------


def spatial_convergence(case, pair="2-1", n_list=(4, 8, 16, 32), settings=SolverSettings(),
                        solver="mafea", jobs=1, relative=None):
    """Errors against the exact solution at the final time on a sequence of
    meshes with n cells per side (h = 1/n), time step from ``settings``."""
    _check_halving(n_list, "mesh")
    tasks = [(case, n, pair, settings, solver, relative) for n in n_list]
    errors = _map(_error_task, tasks, jobs)
    c = _build(case)
    rel = c.relative_errors if relative is None else relative
    return ConvergenceTable(
        "h", [1.0 / n for n in n_list], ERROR_COLUMNS, errors,
        meta={"case": c.name, "pair": pair, "solver": solver, "relative": rel, "theta": settings.theta},
    )


def temporal_convergence(case, pair="2-1", n=8, dt_list=(0.1, 0.05, 0.025, 0.0125, 0.00625),
                         settings=SolverSettings(theta=1), solver="mafea", jobs=1):
    """Differences ||v^dt - v^(dt/2)||_L2 at the final time on a fixed mesh.

    Row i holds the difference between the runs with dt_list[i] and
    dt_list[i + 1]."""
    inv = [1.0 / dt for dt in dt_list]
    _check_halving(inv, "time step")
    tasks = [(case, n, pair, replace(settings, dt=dt), solver) for dt in dt_list]
    coeffs = _map(_coefficient_task, tasks, jobs)
    sols = [_fields_on(n, pair, c) for c in coeffs]
    diffs = []
    for a, b in zip(sols[:-1], sols[1:]):
        diffs.append([field_norm(FieldVector(a[f].space, a[f].coefficients - b[f].coefficients)) for f in FIELDS])
    return ConvergenceTable(
        "dt", list(dt_list[:-1]), tuple(f"{f}_L2" for f in FIELDS), diffs,
        meta={"pair": pair, "n": n, "solver": solver, "theta": settings.theta},
    )


def self_convergence(case, pair="2-1", n_list=(4, 8, 16), n_ref=90, settings=SolverSettings(),
                     solver="mafea", jobs=1):
    """Absolute errors against a fine-mesh run on the same time grid.

    The coarse solution is evaluated at the quadrature points of the fine
    mesh, so the reference mesh need not be a refinement of the coarse one.
    """
    _check_halving(n_list, "mesh")
    if n_ref <= max(n_list):
        raise ConfigurationError(f"reference mesh {n_ref} must be finer than every mesh in {list(n_list)}")
    all_n = list(n_list) + [n_ref]
    coeffs = _map(_coefficient_task, [(case, n, pair, settings, solver) for n in all_n], jobs)
    ref = _fields_on(n_ref, pair, coeffs[-1])
    rows = []
    for n, c in zip(n_list, coeffs[:-1]):
        coarse = _fields_on(n, pair, c)
        rows.append([compute_error(ref[f], FieldFunction(coarse[f]), nm) for f in FIELDS for nm in ("L2", "H1")])
    return ConvergenceTable(
        "h", [1.0 / n for n in n_list], ERROR_COLUMNS, rows,
        meta={"pair": pair, "reference_n": n_ref, "solver": solver, "relative": False},
    )


# pulsed-boundary benchmark ---------------------------------------------------------


@dataclass
class BenchmarkResult:
    variant: str
    solver: str
    state: object
    records: list
    undershoot: float
    min_p: float
    snapshots: list = field(default_factory=list)

    def summary(self):
        return {
            "variant": self.variant,
            "solver": self.solver,
            "undershoot": self.undershoot,
            "min_p": self.min_p,
            "max_p": float(self.state.p.coefficients.max()),
            "max_T": float(self.state.T.coefficients.max()),
        }


def benchmark_spec(variant="pressure", amplitude=1.0, params=None):
    if variant not in ("pressure", "temperature"):
        raise ConfigurationError(f"variant must be 'pressure' or 'temperature', got {variant!r}")
    return CaseSpec("barry_mercer", params, (("amplitude", amplitude), ("variant", variant)))


def barry_mercer(variant="pressure", solver="mafea", n=16, settings=SolverSettings(), pair="2-1",
                 amplitude=1.0, params=None, log_path=None, snapshot_every=0):
    """One run of the pulsed-boundary benchmark.

    The undershoot metric is the largest over all steps of the integral of
    the negative part of p; ``min_p`` is the smallest nodal p seen."""
    res = solve(benchmark_spec(variant, amplitude, params), n, pair, settings, solver,
                log_path=log_path, snapshot_every=snapshot_every)
    recs = res.records
    us = max(r["undershoot"] for r in recs)
    mn = min(r["min_p"] for r in recs)
    return BenchmarkResult(variant, solver, res.state, recs, us, mn, res.snapshots)


@dataclass
class LockingReport:
    classical: BenchmarkResult
    mafea: BenchmarkResult

    @property
    def ratio(self):
        """Classical undershoot over the reformulated one (inf when the
        latter vanishes and the former does not)."""
        c, m = self.classical.undershoot, self.mafea.undershoot
        if m == 0.0:
            return math.inf if c > 0 else float("nan")
        return c / m


def locking_comparison(variant="pressure", n=16, settings=SolverSettings(), pair="2-1"):
    """Run the classical three-field scheme and the reformulated scheme on
    the same mesh and time grid."""
    return LockingReport(
        barry_mercer(variant, "classical", n, settings, pair),
        barry_mercer(variant, "mafea", n, settings, pair),
    )


# permeability-exponent sweep ---------------------------------------------------------

SWEEP_COLUMNS = ("b", "status", "max_p", "max_T", "mean_p", "mean_T", "l2_p", "l2_T",
                 "undershoot", "min_p", "max_picard")


@dataclass
class SweepRecord:
    b: float
    status: str
    p: Optional[np.ndarray] = None
    T: Optional[np.ndarray] = None
    summary: dict = field(default_factory=dict)


@dataclass
class SweepReport:
    records: list
    n: int
    pair: str

    @property
    def b_values(self):
        return [r.b for r in self.records]

    def scalar(self, name):
        return np.array([r.summary.get(name, np.nan) for r in self.records])

    def monotone(self, name):
        """'increasing', 'decreasing' or '' for the scalar over ascending b."""
        ok = [r for r in self.records if r.status == "ok"]
        ok.sort(key=lambda r: r.b)
        v = np.array([r.summary[name] for r in ok])
        if len(v) < 2:
            return ""
        d = np.diff(v)
        if np.all(d > 0):
            return "increasing"
        if np.all(d < 0):
            return "decreasing"
        return ""

    def notes(self):
        out = []
        for name in ("max_p", "mean_p", "l2_p", "undershoot", "mean_T", "l2_T"):
            trend = self.monotone(name)
            if trend:
                out.append(f"{name} {trend} in b")
        return out

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(SWEEP_COLUMNS) + "\n")
            for r in self.records:
                row = [f"{r.b:.17g}", r.status]
                for c in SWEEP_COLUMNS[2:]:
                    v = r.summary.get(c)
                    row.append("" if v is None else (str(v) if isinstance(v, int) else f"{v:.17g}"))
                fh.write(",".join(row) + "\n")


def _sweep_task(spec, b, n, settings, pair):
    c = replace(spec, params=spec.params.replace(b=b)).build()
    try:
        res = solve(c, n, pair, settings, "mafea")
    except ThermoporoError as exc:
        return SweepRecord(b, f"failed: {exc}")
    st = res.state
    rule = res.solver.rule
    _, _, dx, _ = st.p.space.tabulate(rule)
    pq, _ = st.p.at_quadrature(rule)
    Tq, _ = st.T.at_quadrature(rule)
    us, mn = undershoot(st.p, rule)
    summary = {
        "max_p": float(st.p.coefficients.max()),
        "max_T": float(st.T.coefficients.max()),
        "mean_p": float(np.sum(pq * dx)),
        "mean_T": float(np.sum(Tq * dx)),
        "l2_p": field_norm(st.p),
        "l2_T": field_norm(st.T),
        "undershoot": us,
        "min_p": mn,
        "max_picard": int(max(r["picard_iterations"] for r in res.records)),
    }
    return SweepRecord(b, "ok", st.p.coefficients, st.T.coefficients, summary)


def sweep_b(b_values=(0.0, 1e-2, 1.0, 1e2), n=16, settings=SolverSettings(), pair="2-1",
            params=None, jobs=1):
    """Run the top-side pulse problem for each permeability exponent b.

    A failing value is recorded with its error and the sweep continues."""
    spec = CaseSpec("b_sweep", params)
    if spec.params is None:
        spec = replace(spec, params=spec.build().params)
    recs = _map(_sweep_task, [(spec, float(b), n, settings, pair) for b in b_values], jobs)
    return SweepReport(recs, n, pair)


# output helpers ---------------------------------------------------------------------


def write_snapshots(directory, prefix, state):
    """One CSV per field (u, p, T and the reformulated fields when present)."""
    paths = []
    for name in ("u", "p", "T", "tau", "varpi", "varsigma"):
        fv = getattr(state, name, None)
        if fv is None:
            continue
        path = f"{directory}/{prefix}_{name}_n{state.n:05d}.csv"
        write_csv(path, {name: fv})
        paths.append(path)
    return paths


# fast property suite -------------------------------------------------------------------


def quick_checks():
    """Cheap consistency checks on tiny meshes; returns (name, ok, detail)."""
    from .assembly import assemble_divergence, assemble_mass, assemble_weighted_stiffness
    from .mesh import quadrature
    from .model import PARAMETER_SETS, TEST1_PARAMS, derive_coefficients
    from .solver import mean_conservation_defect
    from .spaces import interpolate

    out = []

    def record(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))

    def change_of_variables():
        # residual scaled by |A| |A^-1|, the size of the rounding in the product
        worst = 0.0
        for p in PARAMETER_SETS.values():
            c = derive_coefficients(p)
            A, B = c.change_matrix, c.inverse_matrix
            worst = max(worst, (np.abs(A @ B - np.eye(3)) / (np.abs(A) @ np.abs(B))).max())
            if not c.gamma6 > 0:
                return False, "gamma6 not positive"
        return worst <= 1e-12, f"max |A A^-1 - I| / (|A| |A^-1|) = {worst:.2e}"

    def quadrature_exactness():
        r = quadrature(4)
        v = float(np.sum(r.weights * r.xy[:, 0] ** 2 * r.xy[:, 1] ** 2))
        return abs(v - 1 / 180) < 1e-15, f"int x^2 y^2 = {v:.17g}"

    def element_matrices():
        mesh = build_structured(1, 1)
        S = FeSpace(mesh, 1)
        Me = assemble_mass(FeSpace(type(mesh)(mesh.vertices, mesh.triangles[:1], mesh.boundary_edges[:0],
                                             mesh.boundary_tags[:0], mesh.h, mesh.domain, mesh.grid), 1))
        M = assemble_mass(S).toarray()
        K = assemble_weighted_stiffness(S).toarray()
        ok = abs(M.sum() - 1.0) < 1e-13 and np.abs(K @ np.ones(4)).max() < 1e-13 and Me.shape[0] == 4
        return ok, f"mass total {M.sum():.15f}, |K 1| = {np.abs(K @ np.ones(4)).max():.1e}"

    def patch_test():
        mesh = build_structured(3, 3)
        U, S = FeSpace(mesh, 2, 2), FeSpace(mesh, 1)
        u = interpolate(U, lambda x, y: np.stack([x, 0 * y]))
        B = assemble_divergence(U, S)
        flux = float(np.ones(S.dof_count) @ (B @ u.coefficients))
        fq = interpolate(S, lambda x, y: 2 * x - y + 1)
        e = compute_error(fq, type("L", (), {"value": staticmethod(lambda x, y, t: 2 * x - y + 1),
                                              "grad": staticmethod(lambda x, y, t: np.stack([2 + 0 * x, -1 + 0 * y]))}),
                          "H1")
        return abs(flux - 1.0) < 1e-12 and e < 1e-12, f"(div u, 1) = {flux:.15f}, linear H1 error {e:.1e}"

    def mean_conservation():
        spec = CaseSpec("test2", TEST1_PARAMS.replace(b=1e-3), (("neumann", True),))
        res = solve(spec, 4, "2-1", SolverSettings(theta=1, dt=0.25))
        w, s = mean_conservation_defect(res.records)
        return max(w, s) <= 1e-8, f"defects {w:.1e}, {s:.1e}"

    def zero_data():
        res = solve(benchmark_spec(amplitude=0.0), 2, "2-1", SolverSettings(theta=1, dt=0.5))
        m = max(np.abs(getattr(res.state, f).coefficients).max() for f in FIELDS)
        return m == 0.0, f"max |field| = {m:.1e}"

    record("change of variables round trip", change_of_variables)
    record("quadrature exactness", quadrature_exactness)
    record("element matrices", element_matrices)
    record("divergence and linear patch test", patch_test)
    record("mean conservation (pure Neumann)", mean_conservation)
    record("zero data gives zero solution", zero_data)
    return out
