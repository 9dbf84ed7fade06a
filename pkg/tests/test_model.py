import math

import numpy as np
import pytest
import sympy as sy

from thermoporo.errors import ConfigurationError, ModelError
from thermoporo.model import (
    PARAMETER_SETS,
    TEST1_PARAMS,
    TEST2_PARAMS,
    TEST3_PRESSURE_PARAMS,
    Test1Solution,
    Test2Solution,
    build_case,
    derive_coefficients,
    permeability,
    permeability_original,
    pulse,
    strong_form,
)


def test_lame_constants():
    assert TEST1_PARAMS.lam == pytest.approx(28571.428571428572, rel=1e-14)
    assert TEST1_PARAMS.mu == pytest.approx(7142.857142857143, rel=1e-14)


@pytest.mark.parametrize("name", sorted(PARAMETER_SETS))
def test_gammas_match_closed_form(name):
    c = derive_coefficients(PARAMETER_SETS[name])
    for i, g in enumerate(c.gammas, start=1):
        assert g == pytest.approx(c.closed_form[f"gamma{i}"], rel=1e-12)


@pytest.mark.parametrize("name", sorted(PARAMETER_SETS))
def test_inverse_change_of_variables(name):
    c = derive_coefficients(PARAMETER_SETS[name])
    rng = np.random.default_rng(1)
    p, T, q = rng.normal(size=(3, 20))
    varpi, tau, varsigma = c.to_reformulated(p, T, q)
    p2, T2, q2 = c.to_original(tau, varpi, varsigma)
    scale = np.abs(c.change_matrix).max() * np.abs(c.inverse_matrix).max()
    for a, b in ((p, p2), (T, T2), (q, q2)):
        np.testing.assert_allclose(b, a, atol=1e-12 * scale)
    assert c.gamma6 > 0


def test_gamma2_from_symbolic_inverse():
    P = TEST1_PARAMS
    L = sy.Rational(P.E) * sy.Rational(2, 5) / (sy.Rational(7, 5) * sy.Rational(1, 5)) + sy.Rational(P.E) / sy.Rational(14, 5)
    A = sy.Matrix([[sy.Rational(1, 5), -sy.Rational(1, 10), sy.Rational(1, 100)],
                   [sy.Rational(1, 100), sy.Rational(1, 100), -L],
                   [-sy.Rational(1, 10), sy.Rational(1, 5), sy.Rational(1, 100)]])
    inv = A.inv()
    c = derive_coefficients(P)
    assert c.gamma2 == pytest.approx(float(inv[0, 2]), rel=1e-12)
    assert c.gamma6 == pytest.approx(float(-inv[2, 1]), rel=1e-12)


def test_singular_change_matrix():
    with pytest.raises(ModelError):
        derive_coefficients(TEST1_PARAMS.replace(a0=0.1, c0=0.1, alpha=0.0, beta=0.0))


def test_permeability_dual_formulas():
    P = TEST1_PARAMS.replace(b=1e-4)
    c = derive_coefficients(P)
    rng = np.random.default_rng(2)
    p, T, q = rng.normal(size=(3, 30))
    _, tau, _ = c.to_reformulated(p, T, q)
    np.testing.assert_allclose(permeability(tau, P), permeability_original(q, p, T, P), rtol=1e-12)


def test_permeability_clamped():
    k = permeability(np.array([-1e6, 1e6]), TEST1_PARAMS)
    np.testing.assert_allclose(k, [1e-14 * 1e-5, 1e14 * 1e-5], rtol=1e-12)


def test_tensor_permeability():
    P = TEST1_PARAMS.replace(k0=[[2.0, 0.5], [0.5, 1.0]], b=0.0)
    k = permeability(np.zeros(3), P)
    assert k.shape == (3, 2, 2)
    np.testing.assert_allclose(k[1], [[2.0, 0.5], [0.5, 1.0]])


def test_exact_values():
    e1 = Test1Solution().evaluate(0.5, 0.0, 1.0)
    assert e1.p == pytest.approx(math.e)
    assert e1.T == pytest.approx(math.e)
    e2 = Test2Solution().evaluate(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 0.7)
    np.testing.assert_allclose(e2.u, 0.0)


def _symbolic_sources(kind, P):
    x, y, t = sy.symbols("x y t")
    pi = sy.pi
    if kind == "test1":
        u1 = pi * sy.exp(t) * sy.cos(pi * x) * sy.cos(pi * y / 2)
        u2 = pi * sy.exp(t) * sy.sin(pi * x) * sy.sin(pi * y / 2) / 2
        p = sy.exp(t) * sy.sin(pi * x) * sy.cos(pi * y / 2)
    else:
        Pp = x * (1 - x) * y * (1 - y)
        u1 = u2 = t * Pp
        p = t * Pp
    T = p
    lam = sy.nsimplify(P.lam, rational=True)
    mu = sy.nsimplify(P.mu, rational=True)
    r = {k: sy.nsimplify(getattr(P, k), rational=True) for k in ("a0", "b0", "c0", "alpha", "beta", "a", "b", "k0", "Theta")}
    q = sy.diff(u1, x) + sy.diff(u2, y)
    f = [-mu * (sy.diff(u, x, 2) + sy.diff(u, y, 2)) - (lam + mu) * sy.diff(q, v) + r["alpha"] * sy.diff(p, v) + r["beta"] * sy.diff(T, v)
         for u, v in ((u1, x), (u2, y))]
    tau = r["alpha"] * p - (lam + mu) * q + r["beta"] * T
    k = r["a"] * r["k0"] * sy.exp(r["b"] * tau)
    g = sy.diff(r["c0"] * p - r["b0"] * T + r["alpha"] * q, t) - sy.diff(k * sy.diff(p, x), x) - sy.diff(k * sy.diff(p, y), y)
    phi = sy.diff(r["a0"] * T - r["b0"] * p + r["beta"] * q, t) - r["Theta"] * (sy.diff(T, x, 2) + sy.diff(T, y, 2))
    return [sy.lambdify((x, y, t), e, "numpy") for e in (f[0], f[1], g, phi)]


@pytest.mark.parametrize("kind, params, sol", [
    ("test1", TEST1_PARAMS.replace(b=1e-6), Test1Solution()),
    ("test2", TEST2_PARAMS.replace(b=1e-9), Test2Solution()),
])
def test_strong_form_against_symbolic(kind, params, sol):
    fns = _symbolic_sources(kind, params)
    x = np.array([0.13, 0.5, 0.77])
    y = np.array([0.21, 0.66, 0.9])
    t = 0.4
    s = strong_form(sol, params, derive_coefficients(params), x, y, t)
    ref = [np.broadcast_to(fn(x, y, t), x.shape) for fn in fns]
    for got, want in ((s.f[0], ref[0]), (s.f[1], ref[1]), (s.g, ref[2]), (s.phi, ref[3])):
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9 * np.abs(want).max())


def test_test3_parameters_accepted():
    assert TEST3_PRESSURE_PARAMS.validate() is TEST3_PRESSURE_PARAMS
    assert derive_coefficients(TEST3_PRESSURE_PARAMS).gamma6 > 0


def test_validation_collects_errors():
    bad = TEST1_PARAMS.replace(nu=0.6, E=-1.0)
    errs = bad.violations()
    assert len(errs) == 2
    with pytest.raises(ConfigurationError):
        bad.validate()


def test_soft_violation_override(caplog):
    p = TEST1_PARAMS.replace(b0=0.3)
    with pytest.raises(ConfigurationError):
        p.validate()
    p.replace(allow_assumption_violation=True).validate()
    assert "assumption override" in caplog.text


def test_pulse_support():
    data = pulse(4)
    v = data(np.zeros(4), np.array([0.1, 0.2, 0.5, 0.8]), math.pi / 2)
    np.testing.assert_allclose(v, [0.0, 1.0, 1.0, 0.0])


def test_build_case_names():
    for name in ("test1", "test2", "barry_mercer", "b_sweep"):
        assert build_case(name).name == name
    with pytest.raises(ConfigurationError):
        build_case("nope")
    assert build_case("barry_mercer", variant="temperature").params.a0 == 1e-10
