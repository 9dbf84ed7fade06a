import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from thermoporo.assembly import SparseSystem
from thermoporo.errors import ConfigurationError, SolverError
from thermoporo.mesh import build_structured
from thermoporo.model import TEST1_PARAMS, build_case
from thermoporo.solver import (
    ClassicalSolver,
    ConstrainedOperator,
    MafeaSolver,
    SolverSettings,
    diagnostics_energy,
    element_pair,
    mean_conservation_defect,
    run,
    solve_linear,
    undershoot,
)
from thermoporo.spaces import FieldVector


def test_identity_solve():
    b = np.arange(5.0)
    np.testing.assert_array_equal(solve_linear((sp.identity(5), b)), b)


def test_small_solve():
    x = solve_linear(SparseSystem(np.array([[2.0, 1.0], [1.0, 3.0]]), np.array([3.0, 5.0])))
    np.testing.assert_allclose(x, [0.8, 1.4], rtol=1e-14)


def test_random_spd():
    rng = np.random.default_rng(3)
    R = rng.normal(size=(50, 50))
    A = R @ R.T + 50 * np.eye(50)
    x_true = rng.normal(size=50)
    x = solve_linear((A, A @ x_true))
    np.testing.assert_allclose(x, x_true, rtol=1e-10)


def test_singular_matrix_fails():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        solve_linear((A, np.array([1.0, 0.0])))


def test_non_square():
    with pytest.raises(SolverError):
        solve_linear((sp.csr_matrix(np.ones((2, 3))), np.ones(2)))


def test_constrained_operator():
    A = np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]])
    x_true = np.array([0.5, -1.0, 2.0])
    op = ConstrainedOperator(A, [2])
    np.testing.assert_allclose(op.solve(A @ x_true, [2.0]), x_true, rtol=1e-13)


def test_settings_validation():
    with pytest.raises(ConfigurationError, match="theta"):
        SolverSettings(theta=2).validate()
    with pytest.raises(ConfigurationError, match="multiple"):
        SolverSettings(theta=1, dt=0.3).time_grid(0.5)
    with pytest.raises(ConfigurationError):
        SolverSettings(permeability="linear").validate()


def test_time_grid_default_and_warning():
    assert SolverSettings(theta=1).time_grid(0.25) == (0.0625, 16)
    with pytest.warns(RuntimeWarning):
        SolverSettings(theta=0, dt=0.25).time_grid(0.25)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        SolverSettings(theta=1, dt=0.25).time_grid(0.25)


def test_element_pair():
    assert element_pair("2-1") == (2, 1)
    assert element_pair((1, 1)) == (1, 1)
    with pytest.raises(ConfigurationError):
        element_pair("3-1")
    with pytest.raises(ConfigurationError):
        element_pair("p2p1")


@pytest.mark.parametrize("theta", [0, 1])
def test_zero_data_gives_zero_state(theta):
    case = build_case("barry_mercer", amplitude=0.0)
    s = MafeaSolver(case, build_structured(4, 4), "2-1", SolverSettings(theta=theta, dt=0.0625))
    state, recs, _ = s.run()
    for f in (state.u, state.p, state.T, state.tau, state.varpi, state.varsigma):
        assert np.abs(f.coefficients).max() == 0.0
    assert recs[-1]["undershoot"] == 0.0


def test_initial_state_relations():
    case = build_case("test1")
    s = MafeaSolver(case, build_structured(4, 4), "2-1", SolverSettings(theta=1, dt=0.25))
    st = s.init()
    p, T, q = s.recover(st.tau, st.varpi, st.varsigma)
    np.testing.assert_allclose(p.coefficients, st.p.coefficients, atol=1e-10)
    np.testing.assert_allclose(T.coefficients, st.T.coefficients, atol=1e-10)
    np.testing.assert_allclose(q.coefficients, st.q.coefficients, atol=1e-10 * np.abs(st.q.coefficients).max())


def test_picard_linear_problem_converges_at_once():
    case = build_case("test1", TEST1_PARAMS.replace(b=0.0))
    s = MafeaSolver(case, build_structured(4, 4), "2-1", SolverSettings(theta=1, dt=0.25))
    state, recs, _ = s.run()
    assert all(r["picard_iterations"] <= 2 for r in recs[1:])


def test_constant_permeability_equals_b_zero():
    mesh = build_structured(4, 4)
    settings = SolverSettings(theta=1, dt=0.25)
    a, _, _ = MafeaSolver(build_case("test1", TEST1_PARAMS.replace(b=0.0)), mesh, "2-1", settings).run(records=False)
    c, _, _ = MafeaSolver(build_case("test1", TEST1_PARAMS.replace(b=0.0)), mesh, "2-1",
                          SolverSettings(theta=1, dt=0.25, permeability="constant")).run(records=False)
    assert np.array_equal(a.p.coefficients, c.p.coefficients)


def test_mafea_and_classical_agree_for_linear_law():
    mesh = build_structured(8, 8)
    case = build_case("test1", TEST1_PARAMS.replace(b=0.0))
    settings = SolverSettings(theta=1, dt=0.125)
    m, _, _ = MafeaSolver(case, mesh, "2-1", settings).run(records=False)
    c, _, _ = ClassicalSolver(case, mesh, "2-1", settings).run(records=False)
    scale = np.abs(m.p.coefficients).max()
    assert np.abs(m.p.coefficients - c.p.coefficients).max() < 0.05 * scale


def test_energy_parts_sum():
    case = build_case("test1")
    s = MafeaSolver(case, build_structured(4, 4), "2-1", SolverSettings(theta=1, dt=0.25))
    st = s.init()
    parts = diagnostics_energy(st, s)
    assert parts["elastic"] > 0 and parts["tau"] > 0
    total = sum(v for k, v in parts.items() if k != "J")
    assert parts["J"] == pytest.approx(0.5 * total)


def test_mean_conservation_pure_neumann():
    case = build_case("test2", TEST1_PARAMS.replace(b=1e-3), neumann=True)
    s = MafeaSolver(case, build_structured(4, 4), "2-1", SolverSettings(theta=1, dt=0.25))
    _, recs, _ = s.run()
    dw, ds = mean_conservation_defect(recs)
    assert dw < 1e-12 and ds < 1e-12


def test_run_is_deterministic(tmp_path):
    case = build_case("test1")
    mesh = build_structured(4, 4)
    settings = SolverSettings(theta=1, dt=0.25)
    run(MafeaSolver(case, mesh, "2-1", settings), log_path=tmp_path / "a.csv")
    run(MafeaSolver(case, mesh, "2-1", settings), log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 6


def test_snapshots():
    case = build_case("barry_mercer")
    s = MafeaSolver(case, build_structured(2, 2), "1-1", SolverSettings(theta=1, dt=0.25))
    _, _, snaps = s.run(snapshot_every=2)
    assert [st.n for st in snaps] == [0, 2, 4]


def test_undershoot_metric():
    from thermoporo.spaces import FeSpace

    space = FeSpace(build_structured(2, 2), 1)
    p = FieldVector(space, -np.ones(space.dof_count))
    u, m = undershoot(p)
    assert u == pytest.approx(1.0)
    assert m == -1.0


def test_mismatched_pt_segments_rejected():
    case = build_case("test1")
    case.bcs.dirichlet["T"] = {1: case.bcs.dirichlet["T"][1]}
    with pytest.raises(ConfigurationError):
        MafeaSolver(case, build_structured(2, 2))
