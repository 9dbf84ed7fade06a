"""Command-line entry point.

Usage: thermoporo COMMAND [--config FILE] [--out DIR] [--jobs N]
                          [--reference-run] [--snapshot-every K]

Commands: run, converge-space, converge-time, barry, sweep-b, check.
The configuration is an INI file; every key is validated and unknown keys
are rejected.  Each output directory receives the configuration that
produced it and a provenance log.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .errors import ConfigurationError, ThermoporoError
from .experiments import (
    CaseSpec,
    ERROR_COLUMNS,
    benchmark_spec,
    field_errors,
    locking_comparison,
    quick_checks,
    self_convergence,
    solve,
    spatial_convergence,
    sweep_b,
    temporal_convergence,
    write_snapshots,
)
from .mesh import build_structured
from .model import PhysicalParams, build_case, derive_coefficients
from .solver import SolverSettings, element_pair
from .spaces import FeSpace, FieldVector, write_csv

log = logging.getLogger("thermoporo")

COMMANDS = ("run", "converge-space", "converge-time", "barry", "sweep-b", "check")
CASES = ("test1", "test2", "barry_mercer", "b_sweep")
PARAM_KEYS = ("a0", "b0", "c0", "alpha", "beta", "a", "b", "k0", "Theta", "E", "nu")

# section -> key -> parser name
SCHEMA = {
    "run": {"command": "str", "case": "str", "pair": "str", "solver": "str", "variant": "str",
            "neumann": "bool", "amplitude": "float"},
    "mesh": {"n": "int", "n_list": "ints", "reference_n": "int"},
    "time": {"theta": "int", "dt": "float", "dt_coefficient": "float", "t_f": "float", "dt_list": "floats",
             "linear_tol": "float", "picard_tol": "float", "picard_max": "int", "init": "str", "init_q": "str",
             "permeability": "str"},
    "params": {**{k: "float" for k in PARAM_KEYS if k not in ("k0", "Theta")},
               "k0": "tensor", "Theta": "tensor", "allow_assumption_violation": "bool"},
    "boundary": {},
    "sweep": {"b_values": "floats"},
    "output": {"directory": "str", "snapshot_every": "int", "jobs": "int"},
}


@dataclass
class RunConfig:
    command: str = "run"
    case: str = "test1"
    pair: str = "2-1"
    solver: str = "mafea"
    variant: str = "pressure"
    neumann: bool = False
    amplitude: float = 1.0
    n: int = 8
    n_list: tuple = (4, 8, 16, 32)
    reference_n: int = 90
    dt_list: tuple = (0.1, 0.05, 0.025, 0.0125, 0.00625)
    settings: SolverSettings = field(default_factory=SolverSettings)
    params: Optional[PhysicalParams] = None
    param_overrides: dict = field(default_factory=dict)
    boundary: tuple = ()
    b_values: tuple = (0.0, 1e-2, 1.0, 1e2)
    directory: str = "output"
    snapshot_every: int = 0
    jobs: int = 1
    reference_run: bool = False
    source_text: str = ""
    # command named in the file, if any
    file_command: Optional[str] = None

    def case_spec(self):
        opts = []
        if self.case in ("test1", "test2"):
            opts.append(("neumann", self.neumann))
        if self.case == "barry_mercer":
            opts += [("amplitude", self.amplitude), ("variant", self.variant)]
        if self.case == "b_sweep":
            opts.append(("amplitude", self.amplitude))
        return CaseSpec(self.case, self.params, tuple(opts), self.boundary)

    def echo(self):
        """Normalized key = value listing of the effective configuration."""
        s = self.settings
        lines = [
            f"command = {self.command}", f"case = {self.case}", f"pair = {self.pair}", f"solver = {self.solver}",
            f"variant = {self.variant}", f"neumann = {self.neumann}", f"amplitude = {self.amplitude!r}",
            f"n = {self.n}", f"n_list = {', '.join(map(str, self.n_list))}", f"reference_n = {self.reference_n}",
            f"dt_list = {', '.join(repr(v) for v in self.dt_list)}",
            f"theta = {s.theta}", f"dt = {s.dt!r}", f"dt_coefficient = {s.dt_coefficient!r}", f"t_f = {s.t_f!r}",
            f"linear_tol = {s.linear_tol!r}", f"picard_tol = {s.picard_tol!r}", f"picard_max = {s.picard_max}",
            f"init = {s.init}", f"init_q = {s.init_q}", f"permeability = {s.permeability}",
            f"b_values = {', '.join(repr(v) for v in self.b_values)}",
            f"boundary = {', '.join(f'{a}.{b}={c}' for a, b, c in self.boundary) or '(case defaults)'}",
            f"snapshot_every = {self.snapshot_every}", f"jobs = {self.jobs}", f"reference_run = {self.reference_run}",
        ]
        p = self.params if self.params is not None else build_case(self.case).params
        for k in PARAM_KEYS:
            lines.append(f"param {k} = {np.asarray(getattr(p, k)).tolist()!r}")
        return "\n".join(lines)


# parsing ---------------------------------------------------------------------


def _parse_value(kind, raw):
    raw = raw.strip()
    if kind == "str":
        return raw
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "ints":
        return tuple(int(v) for v in raw.split(","))
    if kind == "floats":
        return tuple(float(v) for v in raw.split(","))
    if kind == "tensor":
        vals = [float(v) for v in raw.split(",")]
        if len(vals) == 1:
            return vals[0]
        if len(vals) == 4:
            return np.array(vals).reshape(2, 2)
        raise ValueError(f"tensor needs 1 or 4 numbers, got {len(vals)}")
    raise AssertionError(kind)


def parse_config_text(text, errors=None):
    """Parse configuration text; collects every problem before raising."""
    errors = [] if errors is None else errors
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse configuration: {exc}") from exc
    values = {}
    boundary = []
    for section in cp.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            if section == "boundary":
                try:
                    name, tag = key.split(".")
                    kind = raw.strip()
                    if name not in ("u1", "u2", "p", "T"):
                        raise ValueError(f"unknown field {name!r}")
                    if kind not in ("zero", "pulse", "free"):
                        raise ValueError(f"kind must be zero, pulse or free, got {kind!r}")
                    boundary.append((name, int(tag), kind))
                except ValueError as exc:
                    errors.append(f"[boundary] {key}: {exc} (keys look like 'p.4 = zero')")
                continue
            kind = SCHEMA[section].get(key)
            if kind is None:
                errors.append(f"unknown key '{key}' in [{section}]")
                continue
            if raw.strip() == "" and key == "dt":
                continue
            try:
                values[(section, key)] = _parse_value(kind, raw)
            except ValueError as exc:
                errors.append(f"[{section}] {key}: {exc}")
    return _build_config(values, tuple(sorted(boundary)), errors, text)


def _build_config(values, boundary, errors, text):
    cfg = RunConfig(source_text=text, boundary=boundary)

    def get(section, key, default):
        return values.get((section, key), default)

    cfg.file_command = values.get(("run", "command"))
    cfg.command = get("run", "command", cfg.command)
    cfg.case = get("run", "case", cfg.case)
    cfg.pair = get("run", "pair", cfg.pair)
    cfg.solver = get("run", "solver", cfg.solver)
    cfg.variant = get("run", "variant", cfg.variant)
    cfg.neumann = get("run", "neumann", cfg.neumann)
    cfg.amplitude = get("run", "amplitude", cfg.amplitude)
    cfg.n = get("mesh", "n", cfg.n)
    cfg.n_list = get("mesh", "n_list", cfg.n_list)
    cfg.reference_n = get("mesh", "reference_n", cfg.reference_n)
    cfg.dt_list = get("time", "dt_list", cfg.dt_list)
    cfg.b_values = get("sweep", "b_values", cfg.b_values)
    cfg.directory = get("output", "directory", cfg.directory)
    cfg.snapshot_every = get("output", "snapshot_every", cfg.snapshot_every)
    cfg.jobs = get("output", "jobs", cfg.jobs)

    if cfg.command not in COMMANDS:
        errors.append(f"command must be one of {', '.join(COMMANDS)}, got {cfg.command!r}")
    if cfg.case not in CASES:
        errors.append(f"case must be one of {', '.join(CASES)}, got {cfg.case!r}")
    try:
        element_pair(cfg.pair)
    except ConfigurationError as exc:
        errors.append(str(exc))
    if cfg.solver not in ("mafea", "classical"):
        errors.append(f"solver must be 'mafea' or 'classical', got {cfg.solver!r}")
    if cfg.variant not in ("pressure", "temperature"):
        errors.append(f"variant must be 'pressure' or 'temperature', got {cfg.variant!r}")
    for name in ("n", "reference_n", "jobs"):
        if getattr(cfg, name) < 1:
            errors.append(f"{name} must be a positive integer, got {getattr(cfg, name)}")
    if any(v < 1 for v in cfg.n_list):
        errors.append(f"n_list entries must be positive, got {cfg.n_list}")
    if any(not v > 0 for v in cfg.dt_list):
        errors.append(f"dt_list entries must be positive, got {cfg.dt_list}")
    if cfg.snapshot_every < 0:
        errors.append(f"snapshot_every must be non-negative, got {cfg.snapshot_every}")

    skw = {k: values[("time", k)] for k in SCHEMA["time"] if ("time", k) in values and k != "dt_list"}
    try:
        cfg.settings = SolverSettings(**skw).validate()
    except ConfigurationError as exc:
        errors.extend(str(exc).split("; "))
    except TypeError as exc:  # pragma: no cover - schema and dataclass agree
        errors.append(str(exc))

    overrides = {k: values[("params", k)] for k in SCHEMA["params"] if ("params", k) in values}
    cfg.param_overrides = overrides
    if overrides and cfg.case in CASES:
        base = build_case(cfg.case, variant=cfg.variant).params if cfg.case == "barry_mercer" else build_case(cfg.case).params
        params = base.replace(**overrides)
        viol = params.violations()
        hard = [e for e in viol if not e.startswith("need ") and "non-negative" not in e]
        if hard or (viol and not params.allow_assumption_violation):
            errors.extend(viol)
        cfg.params = params
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    if cfg.settings.theta == 0 and cfg.command in ("run", "converge-space"):
        # surfaces the dt <= h^2 warning before any solve
        for n in ([cfg.n] if cfg.command == "run" else cfg.n_list):
            cfg.settings.time_grid(1.0 / n)
    return cfg


def parse_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration file {path}: {exc.strerror}") from exc
    return parse_config_text(text)


# outputs -----------------------------------------------------------------------


class _Output:
    def __init__(self, directory):
        self.dir = directory
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as exc:
            raise ThermoporoError(f"cannot create output directory {directory}: {exc.strerror}") from exc
        self.lines = []

    def path(self, name):
        return os.path.join(self.dir, name)

    def note(self, text):
        self.lines.append(text)

    def write(self, name, text):
        p = self.path(name)
        try:
            with open(p, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise ThermoporoError(f"cannot write {p}: {exc.strerror}") from exc
        return p

    def finish(self, cfg):
        head = [f"thermoporo {__version__} (numpy {np.__version__}, scipy {scipy.__version__})", "",
                "[configuration]", cfg.echo(), ""]
        if cfg.command != "check":
            params = cfg.params if cfg.params is not None else cfg.case_spec().build().params
            head += ["[derived coefficients]", derive_coefficients(params).report(), ""]
        self.write("provenance.log", "\n".join(head + ["[results]"] + self.lines) + "\n")
        self.write("config.ini", cfg.source_text or _default_ini(cfg))


def _default_ini(cfg):
    return f"[run]\ncommand = {cfg.command}\n"


# commands -----------------------------------------------------------------------


def _cmd_run(cfg, out):
    spec = cfg.case_spec()
    res = solve(spec, cfg.n, cfg.pair, cfg.settings, cfg.solver,
                log_path=out.path("steps.csv"), snapshot_every=cfg.snapshot_every)
    out.note(f"steps = {res.state.n}, t = {res.state.t!r}, h = {1.0 / cfg.n!r}, dt = {res.solver.dt!r}")
    out.note(f"max Picard iterations = {max(r['picard_iterations'] for r in res.records)}")
    for snap in res.snapshots or [res.state]:
        write_snapshots(out.dir, "snapshot", snap)
    if res.snapshots and res.snapshots[-1].n != res.state.n:
        write_snapshots(out.dir, "snapshot", res.state)
    case = spec.build()
    if case.exact is not None:
        errs = field_errors(res.state, case, res.state.t)
        out.write("errors.csv", ",".join(ERROR_COLUMNS) + "\n" + ",".join(f"{e:.17g}" for e in errs) + "\n")
        for c, e in zip(ERROR_COLUMNS, errs):
            out.note(f"error {c} = {e:.6e}")
            print(f"{c:8s} {e:.6e}")
    return 0


def _cmd_converge_space(cfg, out):
    table = spatial_convergence(cfg.case_spec(), cfg.pair, cfg.n_list, cfg.settings, cfg.solver, cfg.jobs)
    table.to_csv(out.path("convergence_space.csv"))
    text = table.format()
    out.note(text)
    print(text)
    return 0


def _cmd_converge_time(cfg, out):
    table = temporal_convergence(cfg.case_spec(), cfg.pair, cfg.n, cfg.dt_list, cfg.settings, cfg.solver, cfg.jobs)
    table.to_csv(out.path("convergence_time.csv"))
    text = table.format()
    out.note(text)
    print(text)
    return 0


def _cmd_barry(cfg, out):
    rep = locking_comparison(cfg.variant, cfg.n, cfg.settings, cfg.pair)
    lines = ["solver,undershoot,min_p,max_p,max_T"]
    for r in (rep.classical, rep.mafea):
        s = r.summary()
        lines.append(f"{r.solver},{s['undershoot']:.17g},{s['min_p']:.17g},{s['max_p']:.17g},{s['max_T']:.17g}")
        write_snapshots(out.dir, r.solver, r.state)
    out.write("locking.csv", "\n".join(lines) + "\n")
    msg = (f"undershoot classical = {rep.classical.undershoot:.6e}, reformulated = {rep.mafea.undershoot:.6e}, "
           f"ratio = {rep.ratio:.4g}")
    out.note(msg)
    print(msg)
    if cfg.reference_run:
        table = self_convergence(benchmark_spec(cfg.variant, cfg.amplitude, cfg.params), cfg.pair,
                                 cfg.n_list, cfg.reference_n, cfg.settings, "mafea", cfg.jobs)
        table.to_csv(out.path("self_convergence.csv"))
        text = table.format()
        out.note(f"self-convergence against n = {cfg.reference_n}\n{text}")
        print(text)
    return 0


def _cmd_sweep(cfg, out):
    params = cfg.params
    rep = sweep_b(cfg.b_values, cfg.n, cfg.settings, cfg.pair, params, cfg.jobs)
    rep.to_csv(out.path("sweep_b.csv"))
    _, ks = element_pair(cfg.pair)
    S = FeSpace(build_structured(cfg.n, cfg.n), ks)
    status = 0
    for r in rep.records:
        out.note(f"b = {r.b!r}: {r.status} {r.summary}")
        print(f"b = {r.b:g}: {r.status}")
        if r.status == "ok":
            write_csv(out.path(f"sweep_b{r.b:g}_p.csv"), {"p": FieldVector(S, r.p)})
            write_csv(out.path(f"sweep_b{r.b:g}_T.csv"), {"T": FieldVector(S, r.T)})
        else:
            status = 1
    for note in rep.notes():
        out.note(note)
    return status


def _cmd_check(cfg, out):
    results = quick_checks()
    failed = 0
    for name, ok, detail in results:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        out.note(line)
        print(line)
        failed += not ok
    return 1 if failed else 0


HANDLERS = {
    "run": _cmd_run,
    "converge-space": _cmd_converge_space,
    "converge-time": _cmd_converge_time,
    "barry": _cmd_barry,
    "sweep-b": _cmd_sweep,
    "check": _cmd_check,
}


def dispatch(cfg):
    """Run the configured command; returns the exit status."""
    out = _Output(cfg.directory)
    status = HANDLERS[cfg.command](cfg, out)
    out.finish(cfg)
    return status


# entry point -------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="thermoporo", description="Thermo-poroelastic finite element runs and studies.")
    ap.add_argument("command", choices=COMMANDS, help="what to run")
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--out", help="output directory (overrides [output] directory)")
    ap.add_argument("--jobs", type=int, help="worker processes for independent runs")
    ap.add_argument("--reference-run", action="store_true", help="also run the fine-mesh reference study (slow)")
    ap.add_argument("--snapshot-every", type=int, help="write field snapshots every K steps")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        if args.config:
            cfg = parse_config(args.config)
            if cfg.file_command is not None and cfg.file_command != args.command:
                raise ConfigurationError(
                    f"command line asks for {args.command!r} but the configuration names {cfg.command!r}"
                )
        else:
            cfg = parse_config_text("")
        cfg.command = args.command
        if args.out:
            cfg.directory = args.out
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigurationError(f"--jobs must be positive, got {args.jobs}")
            cfg.jobs = args.jobs
        if args.snapshot_every is not None:
            if args.snapshot_every < 0:
                raise ConfigurationError(f"--snapshot-every must be non-negative, got {args.snapshot_every}")
            cfg.snapshot_every = args.snapshot_every
        cfg.reference_run = args.reference_run
        return dispatch(cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ThermoporoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
