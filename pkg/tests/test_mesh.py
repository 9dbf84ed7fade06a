import math

import numpy as np
import pytest

from thermoporo.errors import ConfigurationError
from thermoporo.mesh import Rectangle, build_structured, edge_quadrature, quadrature, refine_uniform


def test_smallest_mesh():
    m = build_structured(1, 1)
    assert m.n_vertices == 4
    assert m.n_triangles == 2
    assert len(m.boundary_edges) == 4


def test_counts_4x4():
    m = build_structured(4, 4)
    assert m.n_vertices == 25
    assert m.n_triangles == 32
    assert len(m.boundary_edges) == 16


def test_area_partition_2x3():
    m = build_structured(2, 3)
    assert m.signed_areas().sum() == pytest.approx(1.0, rel=1e-12)


def test_triangles_counterclockwise_and_h():
    d = Rectangle(0.0, 2.0, -1.0, 0.5)
    m = build_structured(4, 3, d)
    assert np.all(m.signed_areas() > 0)
    assert m.h == pytest.approx(math.hypot(0.5, 0.5))
    assert m.signed_areas().sum() == pytest.approx(d.area, rel=1e-12)


@pytest.mark.parametrize("nx, ny", [(0, 1), (1, -2), (1.5, 2)])
def test_bad_subdivision(nx, ny):
    with pytest.raises(ConfigurationError):
        build_structured(nx, ny)


def test_degenerate_domain():
    with pytest.raises(ConfigurationError):
        build_structured(2, 2, Rectangle(0.0, 0.0, 0.0, 1.0))


def test_boundary_tags_match_sides():
    m = build_structured(3, 5)
    p = m.vertices[m.boundary_edges]
    mid = p.mean(axis=1)
    expect = {1: mid[:, 1] == 0.0, 2: mid[:, 0] == 1.0, 3: mid[:, 1] == 1.0, 4: mid[:, 0] == 0.0}
    for tag, sel in expect.items():
        assert np.array_equal(m.boundary_tags == tag, sel)


def test_each_boundary_edge_in_one_triangle():
    m = build_structured(3, 2)
    tri_edges = [frozenset(e) for t in m.triangles for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))]
    for a, b in m.boundary_edges:
        assert tri_edges.count(frozenset((a, b))) == 1


def test_boundary_lengths_per_tag():
    m = build_structured(3, 7, Rectangle(0.0, 3.0, 0.0, 2.0))
    lengths = m.boundary_edge_lengths()
    for tag in (1, 2, 3, 4):
        assert lengths[m.boundary_tags == tag].sum() == pytest.approx(m.domain.side_length(tag), rel=1e-12)


def test_outward_normals_point_out():
    m = build_structured(2, 2)
    mid = m.vertices[m.boundary_edges].mean(axis=1)
    probe = mid + 1e-3 * m.outward_normals()
    outside = (probe[:, 0] < 0) | (probe[:, 0] > 1) | (probe[:, 1] < 0) | (probe[:, 1] > 1)
    assert outside.all()


def test_corner_vertex_takes_lower_tag():
    m = build_structured(2, 2)
    tags = m.vertex_tags()
    corner = {(0.0, 0.0): 1, (1.0, 0.0): 1, (1.0, 1.0): 2, (0.0, 1.0): 3}
    for (x, y), tag in corner.items():
        k = np.flatnonzero((m.vertices[:, 0] == x) & (m.vertices[:, 1] == y))[0]
        assert tags[k] == tag


def test_refine_counts():
    r = refine_uniform(build_structured(1, 1))
    assert r.n_triangles == 8
    assert r.n_vertices == 9


def test_refine_halves_h_and_keeps_tags():
    m = build_structured(2, 3)
    r = refine_uniform(m)
    assert r.h == m.h / 2
    assert np.all(r.signed_areas() > 0)
    lengths = r.boundary_edge_lengths()
    for tag in (1, 2, 3, 4):
        assert lengths[r.boundary_tags == tag].sum() == pytest.approx(1.0, rel=1e-12)


def test_refine_twice_matches_structured_vertices():
    r = refine_uniform(refine_uniform(build_structured(2, 3)))
    s = build_structured(8, 12)
    a = {tuple(np.round(v, 12)) for v in r.vertices}
    b = {tuple(np.round(v, 12)) for v in s.vertices}
    assert a == b


def test_refine_keeps_boundary_vertices():
    m = build_structured(2, 2)
    r = refine_uniform(m)
    old = {tuple(v) for v in m.vertices[np.unique(m.boundary_edges)]}
    new = {tuple(v) for v in r.vertices[np.unique(r.boundary_edges)]}
    assert old <= new


def test_quadrature_area():
    assert quadrature(1).weights.sum() == pytest.approx(0.5, abs=1e-15)


def test_quadrature_degree4_monomial():
    r = quadrature(4)
    x, y = r.xy[:, 0], r.xy[:, 1]
    assert np.sum(r.weights * x**2 * y**2) == pytest.approx(1 / 180, rel=1e-13)


def test_quadrature_degree2_xy():
    r = quadrature(2)
    x, y = r.xy[:, 0], r.xy[:, 1]
    assert np.sum(r.weights * x * y) == pytest.approx(1 / 24, rel=1e-13)


@pytest.mark.parametrize("degree", [0, 9, 2.5])
def test_quadrature_bad_degree(degree):
    with pytest.raises(ConfigurationError):
        quadrature(degree)


def test_edge_quadrature():
    s, w = edge_quadrature(3)
    assert w.sum() == pytest.approx(1.0)
    assert np.sum(w * s**5) == pytest.approx(1 / 6)


def test_locate_recovers_points():
    m = build_structured(3, 4)
    rng = np.random.default_rng(0)
    pts = rng.random((50, 2))
    tri, bary = m.locate(pts[:, 0], pts[:, 1])
    assert np.all(bary > -1e-12)
    back = np.einsum("ni,nic->nc", bary, m.vertices[m.triangles[tri]])
    np.testing.assert_allclose(back, pts, atol=1e-14)


def test_dump(tmp_path):
    m = build_structured(1, 1)
    p = tmp_path / "mesh.txt"
    m.dump(p)
    lines = p.read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == 4
    assert sum(line.startswith("t ") for line in lines) == 2
    assert sum(line.startswith("e ") for line in lines) == 4
