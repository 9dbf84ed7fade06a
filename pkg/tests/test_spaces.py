import numpy as np
import pytest

from thermoporo.errors import ConfigurationError, DataError
from thermoporo.mesh import build_structured
from thermoporo.spaces import (
    FeSpace,
    FieldFunction,
    FieldVector,
    compute_error,
    eval_basis,
    field_norm,
    interpolate,
    l2_project,
)


class _Func:
    def __init__(self, f, g=None):
        self.f, self.g = f, g

    def value(self, x, y, t):
        return self.f(x, y)

    def grad(self, x, y, t):
        return self.g(x, y)


@pytest.fixture(scope="module")
def mesh():
    return build_structured(4, 4)


@pytest.mark.parametrize("degree", [1, 2])
def test_lagrange_property(mesh, degree):
    space = FeSpace(mesh, degree)
    bary = {1: [(1, 0, 0), (0, 1, 0), (0, 0, 1)],
            2: [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.5, 0.5, 0), (0, 0.5, 0.5), (0.5, 0, 0.5)]}[degree]
    for i, b in enumerate(bary):
        vals, _ = eval_basis(space, 0, np.array(b, dtype=float))
        np.testing.assert_allclose(vals, np.eye(len(bary))[i], atol=1e-15)


def test_centroid_values(mesh):
    c = np.full(3, 1 / 3)
    v1, _ = eval_basis(FeSpace(mesh, 1), 3, c)
    np.testing.assert_allclose(v1, 1 / 3)
    v2, _ = eval_basis(FeSpace(mesh, 2), 3, c)
    np.testing.assert_allclose(v2[:3], -1 / 9)
    np.testing.assert_allclose(v2[3:], 4 / 9)


@pytest.mark.parametrize("degree", [1, 2])
def test_partition_of_unity_gradients(mesh, degree):
    vals, grads = eval_basis(FeSpace(mesh, degree), 5, np.array([0.2, 0.3, 0.5]))
    assert vals.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(grads.sum(axis=0), 0.0, atol=1e-12)


def test_eval_basis_rejects_outside(mesh):
    with pytest.raises(ValueError):
        eval_basis(FeSpace(mesh, 1), 0, np.array([1.2, -0.1, -0.1]))
    with pytest.raises(ValueError):
        eval_basis(FeSpace(mesh, 1), mesh.n_triangles, np.full(3, 1 / 3))


def test_dof_counts(mesh):
    assert FeSpace(mesh, 1).dof_count == 25
    assert FeSpace(mesh, 2).dof_count == 81
    assert FeSpace(mesh, 2, 2).dof_count == 162


def test_bad_degree(mesh):
    with pytest.raises(ConfigurationError):
        FeSpace(mesh, 3)


def test_field_vector_length_checked(mesh):
    with pytest.raises(DataError):
        FieldVector(FeSpace(mesh, 1), np.zeros(3))


@pytest.mark.parametrize("degree", [1, 2])
def test_interpolation_reproduces_linears(mesh, degree):
    space = FeSpace(mesh, degree)
    f = _Func(lambda x, y: 2 + 3 * x - y, lambda x, y: np.stack([3 + 0 * x, -1 + 0 * x]))
    fh = interpolate(space, lambda x, y: f.value(x, y, 0))
    assert compute_error(fh, f, "H1") < 1e-13
    const = interpolate(space, lambda x, y: 7.0)
    np.testing.assert_allclose(const.coefficients, 7.0)


def test_vector_interpolation_layout(mesh):
    space = FeSpace(mesh, 1, 2)
    fh = interpolate(space, lambda x, y: np.stack([x, 10 * y]))
    nodal = fh.nodal()
    np.testing.assert_allclose(nodal[:, 0], space.node_coordinates[:, 0])
    np.testing.assert_allclose(nodal[:, 1], 10 * space.node_coordinates[:, 1])


def test_p2_interpolation_rate():
    f = _Func(lambda x, y: np.sin(np.pi * x) * np.cos(y))
    errs = [compute_error(interpolate(FeSpace(build_structured(n, n), 2), lambda x, y: f.value(x, y, 0)), f)
            for n in (8, 16)]
    assert errs[0] / errs[1] == pytest.approx(8.0, rel=0.1)


def test_p1_projection_rate():
    f = _Func(lambda x, y: x**2)
    errs = [compute_error(l2_project(FeSpace(build_structured(n, n), 1), lambda x, y: x**2), f)
            for n in (8, 16)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("degree", [1, 2])
def test_projection_idempotent_and_mean(mesh, degree):
    space = FeSpace(mesh, degree)
    fh = l2_project(space, lambda x, y: np.exp(x) * y)
    rule = space.default_rule()
    vals, _ = fh.at_quadrature(rule)
    again = l2_project(space, vals, rule)
    np.testing.assert_allclose(again.coefficients, fh.coefficients, atol=1e-12)
    _, _, dx, _ = space.tabulate(rule)
    assert np.sum(vals * dx) == pytest.approx((np.e - 1) / 2, rel=1e-6)


def test_compute_error_constant():
    space = FeSpace(build_structured(2, 2), 1)
    zero = FieldVector(space, np.zeros(space.dof_count))
    one = _Func(lambda x, y: np.ones_like(x), lambda x, y: np.zeros((2,) + x.shape))
    assert compute_error(zero, one) == pytest.approx(1.0)
    assert compute_error(zero, one, "H1") == pytest.approx(1.0)
    assert compute_error(zero, one, relative=True) == pytest.approx(1.0)


def test_relative_error_of_zero_field():
    space = FeSpace(build_structured(2, 2), 1)
    zero_fn = _Func(lambda x, y: np.zeros_like(x))
    fh = FieldVector(space, np.ones(space.dof_count))
    with pytest.raises(ZeroDivisionError):
        compute_error(fh, zero_fn, relative=True)


def test_unknown_norm():
    space = FeSpace(build_structured(1, 1), 1)
    with pytest.raises(ConfigurationError):
        compute_error(FieldVector(space, np.zeros(4)), _Func(lambda x, y: x), "Linf")


def test_field_norm_vector():
    space = FeSpace(build_structured(3, 3), 2, 2)
    fh = interpolate(space, lambda x, y: np.stack([np.ones_like(x), 2 * np.ones_like(x)]))
    assert field_norm(fh) == pytest.approx(np.sqrt(5))
    assert field_norm(fh, "H1SEMI") == pytest.approx(0.0, abs=1e-12)


def test_field_function_across_meshes():
    def f(x, y):
        return x**2 - 3 * x * y + y**2

    coarse = interpolate(FeSpace(build_structured(5, 5), 2), f)
    fine = interpolate(FeSpace(build_structured(7, 7), 2), f)
    assert compute_error(fine, FieldFunction(coarse), "H1") < 1e-12


def test_gradient_matches_finite_differences():
    space = FeSpace(build_structured(4, 4), 2, 2)
    fh = interpolate(space, lambda x, y: np.stack([np.sin(x + 2 * y), x * y**2]))
    x, y = np.array([0.31, 0.62]), np.array([0.47, 0.13])
    g = fh.gradient(x, y)
    d = 1e-6
    gx = (fh.evaluate(x + d, y) - fh.evaluate(x - d, y)) / (2 * d)
    gy = (fh.evaluate(x, y + d) - fh.evaluate(x, y - d)) / (2 * d)
    np.testing.assert_allclose(g[:, 0], gx, atol=1e-7)
    np.testing.assert_allclose(g[:, 1], gy, atol=1e-7)
