import csv
import math
import pickle

import numpy as np
import pytest

from thermoporo.errors import ConfigurationError
from thermoporo.experiments import (
    ERROR_COLUMNS,
    CaseSpec,
    ConvergenceTable,
    apply_boundary_overrides,
    barry_mercer,
    convergence_rates,
    quick_checks,
    self_convergence,
    solve,
    spatial_convergence,
    sweep_b,
    temporal_convergence,
    write_snapshots,
)
from thermoporo.model import TEST1_PARAMS, build_case
from thermoporo.solver import SolverSettings


def test_rates_of_power_law():
    h = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32])
    np.testing.assert_allclose(convergence_rates(3.7 * h**2.5), 2.5, rtol=1e-13)


def test_table_csv_schema(tmp_path):
    h = np.array([0.25, 0.125, 0.0625])
    errs = np.column_stack([h**k for k in range(1, 7)])
    t = ConvergenceTable("h", h, ERROR_COLUMNS, errs)
    path = tmp_path / "t.csv"
    t.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:3] == ["h", "e_u_L2", "CR_u_L2"]
    assert len(rows[0]) == 13
    assert rows[1][2] == ""
    assert float(rows[2][4]) == pytest.approx(2.0)
    assert t.rate("T_H1") == pytest.approx(6.0)
    assert "e_p_L2" in t.format()


def test_table_shape_checked():
    with pytest.raises(ConfigurationError):
        ConvergenceTable("h", [0.5, 0.25], ERROR_COLUMNS, np.ones((2, 3)))


def test_case_spec_pickles_and_builds():
    spec = CaseSpec("test1", None, (("neumann", True),)).with_params(b=0.5)
    back = pickle.loads(pickle.dumps(spec))
    assert back == spec
    case = back.build()
    assert case.params.b == 0.5
    assert "p" not in case.bcs.dirichlet


def test_boundary_overrides():
    case = apply_boundary_overrides(build_case("barry_mercer"), (("p", 4, "free"), ("u1", 2, "zero")))
    assert 4 not in case.bcs.dirichlet["p"]
    assert 2 in case.bcs.dirichlet["u1"]
    with pytest.raises(ConfigurationError):
        apply_boundary_overrides(build_case("test1"), (("q", 1, "zero"),))


def test_unknown_solver():
    with pytest.raises(ConfigurationError):
        solve(build_case("test1"), 2, settings=SolverSettings(theta=1, dt=0.5), solver="nope")


def test_halving_enforced():
    with pytest.raises(ConfigurationError):
        spatial_convergence(build_case("test1"), n_list=(4, 6))
    with pytest.raises(ConfigurationError):
        self_convergence(build_case("test1"), n_list=(2, 4), n_ref=4)


def test_spatial_study_small():
    t = spatial_convergence(CaseSpec("test1"), "1-1", (2, 4), SolverSettings(theta=1, dt=0.25))
    assert t.errors.shape == (2, 6)
    assert np.all(t.rates > 0)


def test_temporal_study_rows():
    spec = CaseSpec("test1", TEST1_PARAMS.replace(b=0.0))
    t = temporal_convergence(spec, "1-1", 2, (0.5, 0.25, 0.125), SolverSettings(theta=1))
    assert list(t.values) == [0.5, 0.25]
    assert t.columns == ("u_L2", "p_L2", "T_L2")


def test_self_convergence_small():
    t = self_convergence(CaseSpec("test1"), "1-1", (2, 4), 6, SolverSettings(theta=1, dt=0.5))
    assert t.errors.shape == (2, 6)
    assert np.all(t.errors > 0)
    assert t.meta["relative"] is False


def test_zero_amplitude_benchmark():
    res = barry_mercer(n=2, settings=SolverSettings(theta=1, dt=0.25), pair="1-1", amplitude=0.0)
    assert res.undershoot == 0.0
    assert res.min_p == 0.0
    assert res.summary()["max_p"] == 0.0


def test_sweep_reports_each_value(tmp_path):
    rep = sweep_b((0.0, 1.0), n=2, settings=SolverSettings(theta=1, dt=0.25), pair="1-1")
    assert rep.b_values == [0.0, 1.0]
    assert all(r.status == "ok" for r in rep.records)
    rep.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("b,status,max_p")
    assert len(lines) == 3


def test_snapshot_files(tmp_path):
    res = solve(build_case("test1"), 2, "1-1", SolverSettings(theta=1, dt=0.5))
    paths = write_snapshots(tmp_path, "s", res.state)
    assert {p.split("/")[-1] for p in paths} == {f"s_{f}_n00002.csv" for f in ("u", "p", "T", "tau", "varpi", "varsigma")}


def test_quick_checks_pass():
    results = quick_checks()
    assert len(results) >= 6
    for name, ok, detail in results:
        assert ok, f"{name}: {detail}"


def test_locking_ratio_conventions():
    from thermoporo.experiments import BenchmarkResult, LockingReport

    def br(u):
        return BenchmarkResult("pressure", "x", None, [], u, 0.0)

    assert LockingReport(br(1.0), br(0.5)).ratio == 2.0
    assert LockingReport(br(1.0), br(0.0)).ratio == math.inf
    assert math.isnan(LockingReport(br(0.0), br(0.0)).ratio)
