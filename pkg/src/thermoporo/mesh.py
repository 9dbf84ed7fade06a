"""Structured triangulations of rectangles, uniform refinement and quadrature.

Boundary segments of the rectangle ``[x0, x1] x [y0, y1]`` are tagged

    1 -- bottom (y = y0)      2 -- right (x = x1)
    3 -- top    (y = y1)      4 -- left  (x = x0)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .errors import ConfigurationError, DataError

SEGMENTS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Rectangle:
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    def side_length(self, tag):
        return self.width if tag in (1, 3) else self.height


UNIT_SQUARE = Rectangle()


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with tagged boundary edges.

    ``grid`` records the (nx, ny) cell counts of the underlying structured
    grid; it is what makes point location O(1).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    h: float
    domain: Rectangle
    grid: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self):
        """Unique edges as sorted vertex pairs (lexicographic order) and the
        triangle -> edge map for local edges (0,1), (1,2), (2,0)."""
        if "edges" not in self._cache:
            t = self.triangles
            local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
            pairs = np.sort(local.reshape(-1, 2), axis=1)
            uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
            self._cache["edges"] = (uniq, inverse.reshape(-1, 3))
        return self._cache["edges"]

    def vertex_tags(self):
        """Boundary tag per vertex (0 for interior); corners take the
        lower-numbered adjacent segment."""
        if "vertex_tags" not in self._cache:
            tags = np.zeros(self.n_vertices, dtype=int)
            for tag in sorted(SEGMENTS, reverse=True):
                sel = self.boundary_edges[self.boundary_tags == tag]
                tags[sel.ravel()] = tag
            self._cache["vertex_tags"] = tags
        return self._cache["vertex_tags"]

    def edges_with_tags(self, tags):
        mask = np.isin(self.boundary_tags, list(tags))
        return self.boundary_edges[mask], self.boundary_tags[mask]

    def boundary_edge_lengths(self):
        p = self.vertices[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def outward_normals(self):
        """Unit outward normal per boundary edge, from its tag."""
        table = {1: (0.0, -1.0), 2: (1.0, 0.0), 3: (0.0, 1.0), 4: (-1.0, 0.0)}
        return np.array([table[int(t)] for t in self.boundary_tags]).reshape(-1, 2)

    def _cell_table(self):
        if "cells" not in self._cache:
            nx, ny = self.grid
            d = self.domain
            c = self.vertices[self.triangles].mean(axis=1)
            s = (c[:, 0] - d.x0) / d.width * nx
            r = (c[:, 1] - d.y0) / d.height * ny
            i = np.floor(s).astype(int)
            j = np.floor(r).astype(int)
            lower = (s - i) > (r - j)
            table = -np.ones((nx, ny, 2), dtype=int)
            table[i, j, np.where(lower, 0, 1)] = np.arange(self.n_triangles)
            if (table < 0).any():
                raise DataError("mesh is not a structured triangulation")
            self._cache["cells"] = table
        return self._cache["cells"]

    def locate(self, x, y):
        """Return (triangle index, barycentric coordinates) for points."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        nx, ny = self.grid
        d = self.domain
        s = (x - d.x0) / d.width * nx
        r = (y - d.y0) / d.height * ny
        i = np.clip(np.floor(s).astype(int), 0, nx - 1)
        j = np.clip(np.floor(r).astype(int), 0, ny - 1)
        lower = (s - i) >= (r - j)
        tri = self._cell_table()[i, j, np.where(lower, 0, 1)]
        p = self.vertices[self.triangles[tri]]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        dx = x - p[:, 0, 0]
        dy = y - p[:, 0, 1]
        l1 = (dx * e2[:, 1] - dy * e2[:, 0]) / det
        l2 = (e1[:, 0] * dy - e1[:, 1] * dx) / det
        bary = np.column_stack([1.0 - l1 - l2, l1, l2])
        return tri, bary

    def dump(self, path):
        """Write a plain-text listing: one vertex or triangle record per line."""
        with open(path, "w") as fh:
            fh.write(f"# vertices {self.n_vertices}\n")
            for k, (x, y) in enumerate(self.vertices):
                fh.write(f"v {k} {x:.17g} {y:.17g}\n")
            fh.write(f"# triangles {self.n_triangles}\n")
            for k, (a, b, c) in enumerate(self.triangles):
                fh.write(f"t {k} {a} {b} {c}\n")
            fh.write(f"# boundary_edges {len(self.boundary_edges)}\n")
            for (a, b), tag in zip(self.boundary_edges, self.boundary_tags):
                fh.write(f"e {a} {b} {tag}\n")


def build_structured(nx, ny, domain=UNIT_SQUARE):
    """Uniform nx-by-ny grid, each cell split along its lower-left to
    upper-right diagonal."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ConfigurationError(f"subdivision counts must be positive integers, got nx={nx}, ny={ny}")
    if not (domain.width > 0 and domain.height > 0):
        raise ConfigurationError("domain must have positive width and height")
    nx, ny = int(nx), int(ny)
    xs = domain.x0 + domain.width * (np.arange(nx + 1) / nx)
    ys = domain.y0 + domain.height * (np.arange(ny + 1) / ny)
    xs[-1], ys[-1] = domain.x1, domain.y1
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    v00, v10, v01, v11 = vid(I, J), vid(I + 1, J), vid(I, J + 1), vid(I + 1, J + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=int)
    triangles[0::2] = lower
    triangles[1::2] = upper

    i = np.arange(nx)
    j = np.arange(ny)
    edges = [
        (np.column_stack([vid(i, 0), vid(i + 1, 0)]), 1),
        (np.column_stack([vid(nx, j), vid(nx, j + 1)]), 2),
        (np.column_stack([vid(i + 1, ny), vid(i, ny)])[::-1], 3),
        (np.column_stack([vid(0, j + 1), vid(0, j)])[::-1], 4),
    ]
    boundary_edges = np.vstack([e for e, _ in edges])
    boundary_tags = np.concatenate([np.full(len(e), tag) for e, tag in edges])
    h = math.hypot(domain.width / nx, domain.height / ny)
    return Mesh(vertices, triangles, boundary_edges, boundary_tags, h, domain, (nx, ny))


def refine_uniform(mesh):
    """Split every triangle into four by joining edge midpoints."""
    edges, tri_edges = mesh.edges()
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    t = mesh.triangles
    m01, m12, m20 = (nv + tri_edges[:, k] for k in range(3))
    children = np.stack(
        [
            np.column_stack([t[:, 0], m01, m20]),
            np.column_stack([m01, t[:, 1], m12]),
            np.column_stack([m20, m12, t[:, 2]]),
            np.column_stack([m01, m12, m20]),
        ],
        axis=1,
    ).reshape(-1, 3)

    lookup = {tuple(e): k for k, e in enumerate(edges)}
    new_edges, new_tags = [], []
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        m = nv + lookup[(min(a, b), max(a, b))]
        new_edges += [(a, m), (m, b)]
        new_tags += [tag, tag]
    nx, ny = mesh.grid
    return Mesh(
        vertices,
        children,
        np.array(new_edges, dtype=int),
        np.array(new_tags, dtype=int),
        mesh.h / 2,
        mesh.domain,
        (2 * nx, 2 * ny),
    )


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray  # (n, 3) barycentric
    weights: np.ndarray  # (n,), sum = 1/2
    degree: int

    @property
    def xy(self):
        """Reference-triangle Cartesian coordinates of the points."""
        return self.points[:, 1:]


MAX_DEGREE = 8


@lru_cache(maxsize=None)
def quadrature(degree):
    """Collapsed Gauss rule on the reference triangle, exact to ``degree``.

    Uses Gauss-Legendre in the collapsed direction and Gauss-Jacobi(1, 0)
    in the other (Duffy transform); n points per direction integrate
    degree 2n - 1 exactly.
    """
    if int(degree) != degree or not 1 <= degree <= MAX_DEGREE:
        raise ConfigurationError(f"quadrature degree must be in [1, {MAX_DEGREE}], got {degree}")
    n = (int(degree) + 2) // 2
    zs, ws = leggauss(n)
    zv, wv = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (1.0 + zs)
    v = 0.5 * (1.0 + zv)
    S, V = np.meshgrid(s, v, indexing="ij")
    W = np.outer(0.5 * ws, 0.25 * wv)
    x = (S * (1.0 - V)).ravel()
    y = V.ravel()
    points = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(points, W.ravel(), int(degree))


@lru_cache(maxsize=None)
def edge_quadrature(n_points):
    """Gauss-Legendre rule on [0, 1]; returns (parameters, weights)."""
    z, w = leggauss(int(n_points))
    return 0.5 * (1.0 + z), 0.5 * w
