"""Continuous Lagrange spaces P1/P2 on triangles, scalar or 2-vector valued.

DOF numbering: vertex nodes first (mesh order), then edge-midpoint nodes
(edges sorted by vertex pair).  Vector spaces interleave components per
node, so node ``n`` owns DOFs ``2n`` and ``2n + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, DataError
from .mesh import quadrature


def _reference_basis(degree, bary):
    """Values (n, nloc) and reference gradients (n, nloc, 2) at barycentric points."""
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    # d(lambda_i)/d(x, y) on the reference triangle
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if degree == 1:
        vals = bary.copy()
        grads = np.broadcast_to(dl, (len(bary), 3, 2)).copy()
        return vals, grads
    lam = [l0, l1, l2]
    vals = np.empty((len(bary), 6))
    grads = np.empty((len(bary), 6, 2))
    for i in range(3):
        vals[:, i] = lam[i] * (2 * lam[i] - 1)
        grads[:, i] = (4 * lam[i] - 1)[:, None] * dl[i]
    for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        vals[:, 3 + k] = 4 * lam[i] * lam[j]
        grads[:, 3 + k] = 4 * (lam[i][:, None] * dl[j] + lam[j][:, None] * dl[i])
    return vals, grads


@dataclass(frozen=True, eq=False)
class FeSpace:
    mesh: object
    degree: int
    value_dim: int = 1
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ConfigurationError(f"element degree must be 1 or 2, got {self.degree}")
        if self.value_dim not in (1, 2):
            raise ConfigurationError(f"value_dim must be 1 or 2, got {self.value_dim}")
        mesh = self.mesh
        if self.degree == 1:
            nodes = mesh.triangles.copy()
            coords = mesh.vertices.copy()
        else:
            edges, tri_edges = mesh.edges()
            nodes = np.hstack([mesh.triangles, mesh.n_vertices + tri_edges])
            mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
            coords = np.vstack([mesh.vertices, mids])
        object.__setattr__(self, "element_nodes", nodes)
        object.__setattr__(self, "node_coordinates", coords)

    @property
    def n_nodes(self):
        return len(self.node_coordinates)

    @property
    def dof_count(self):
        return self.n_nodes * self.value_dim

    @property
    def n_local(self):
        return 3 if self.degree == 1 else 6

    @property
    def element_dof_map(self):
        if self.value_dim == 1:
            return self.element_nodes
        if "edm" not in self._cache:
            n = self.element_nodes
            edm = np.empty((n.shape[0], 2 * n.shape[1]), dtype=int)
            edm[:, 0::2] = 2 * n
            edm[:, 1::2] = 2 * n + 1
            self._cache["edm"] = edm
        return self._cache["edm"]

    @property
    def dof_coordinates(self):
        if self.value_dim == 1:
            return self.node_coordinates
        return np.repeat(self.node_coordinates, 2, axis=0)

    def same_layout(self, other):
        return self.mesh is other.mesh and self.degree == other.degree

    def boundary_nodes(self, tags):
        """Sorted node indices lying on closed boundary segments ``tags``."""
        mesh = self.mesh
        sel = np.isin(mesh.boundary_tags, list(tags))
        verts = mesh.boundary_edges[sel].ravel()
        nodes = [verts]
        if self.degree == 2:
            edges, _ = mesh.edges()
            be = np.sort(mesh.boundary_edges[sel], axis=1)
            lookup = {tuple(e): k for k, e in enumerate(edges)}
            nodes.append(np.array([mesh.n_vertices + lookup[tuple(e)] for e in be], dtype=int))
        return np.unique(np.concatenate(nodes)) if len(verts) else np.zeros(0, dtype=int)

    def boundary_edge_nodes(self):
        """Nodes of each boundary edge: (nb, 2) for P1, (nb, 3) for P2 with
        the midpoint last."""
        mesh = self.mesh
        be = mesh.boundary_edges
        if self.degree == 1:
            return be
        edges, _ = mesh.edges()
        lookup = {tuple(e): k for k, e in enumerate(edges)}
        mid = np.array([mesh.n_vertices + lookup[(min(a, b), max(a, b))] for a, b in be], dtype=int)
        return np.column_stack([be, mid])

    # geometry and tabulation ------------------------------------------------

    def geometry(self):
        """Per-element Jacobian determinant and inverse-transpose."""
        if "geom" not in self._cache:
            p = self.mesh.vertices[self.mesh.triangles]
            J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            invJ = np.empty_like(J)
            invJ[:, 0, 0] = J[:, 1, 1] / det
            invJ[:, 1, 1] = J[:, 0, 0] / det
            invJ[:, 0, 1] = -J[:, 0, 1] / det
            invJ[:, 1, 0] = -J[:, 1, 0] / det
            self._cache["geom"] = (det, invJ, p[:, 0], J)
        return self._cache["geom"]

    def tabulate(self, rule):
        """Scalar basis data at quadrature points.

        Returns (phi, dphi, dx, xq) with phi (nq, nloc), dphi (ne, nq, nloc, 2)
        physical gradients, dx (ne, nq) weights times |det J|, and xq
        (ne, nq, 2) physical quadrature points.
        """
        key = ("tab", id(rule))
        if key not in self._cache:
            det, invJ, origin, J = self.geometry()
            phi, dref = _reference_basis(self.degree, rule.points)
            dphi = np.einsum("qia,eab->eqib", dref, invJ)
            dx = np.abs(det)[:, None] * rule.weights[None, :]
            xq = origin[:, None, :] + np.einsum("eab,qb->eqa", J, rule.xy)
            self._cache[key] = (phi, dphi, dx, xq)
        return self._cache[key]

    def default_rule(self):
        return quadrature(2 * self.degree + 2)


def eval_basis(space, element, bary):
    """Local basis values and physical gradients at one barycentric point.

    For vector spaces the scalar basis is returned; component ``c`` of local
    node ``a`` is local DOF ``2a + c``.
    """
    bary = np.asarray(bary, dtype=float)
    if bary.shape != (3,) or abs(bary.sum() - 1.0) > 1e-12 or (bary < -1e-12).any() or (bary > 1 + 1e-12).any():
        raise ValueError(f"point {bary} is not inside the reference element")
    if not 0 <= element < space.mesh.n_triangles:
        raise ValueError(f"element {element} out of range")
    vals, dref = _reference_basis(space.degree, bary[None, :])
    _, invJ, _, _ = space.geometry()
    grads = dref[0] @ invJ[element]
    return vals[0], grads


@dataclass(eq=False)
class FieldVector:
    space: FeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.dof_count,):
            raise DataError(
                f"coefficient length {self.coefficients.shape} does not match dof count {self.space.dof_count}"
            )

    def copy(self):
        return FieldVector(self.space, self.coefficients.copy())

    def nodal(self):
        """Coefficients shaped (n_nodes,) or (n_nodes, 2)."""
        if self.space.value_dim == 1:
            return self.coefficients
        return self.coefficients.reshape(-1, 2)

    def at_quadrature(self, rule=None):
        """Values and gradients at the quadrature points of every element.

        Scalar: (ne, nq), (ne, nq, 2).  Vector: (ne, nq, 2), (ne, nq, 2, 2)
        with gradient index [component, derivative].
        """
        rule = rule or self.space.default_rule()
        phi, dphi, _, _ = self.space.tabulate(rule)
        nodal = self.nodal()[self.space.element_nodes]
        if self.space.value_dim == 1:
            vals = nodal @ phi.T
            grads = np.einsum("eqia,ei->eqa", dphi, nodal)
        else:
            vals = np.einsum("qi,eic->eqc", phi, nodal)
            grads = np.einsum("eqia,eic->eqca", dphi, nodal)
        return vals, grads

    def divergence_at_quadrature(self, rule=None):
        _, g = self.at_quadrature(rule)
        return g[..., 0, 0] + g[..., 1, 1]

    def evaluate(self, x, y):
        """Point values at arbitrary physical points (structured meshes)."""
        tri, bary = self.space.mesh.locate(x, y)
        vals, _ = _reference_basis(self.space.degree, bary)
        nodal = self.nodal()[self.space.element_nodes[tri]]
        if self.space.value_dim == 1:
            return np.einsum("ni,ni->n", vals, nodal)
        return np.einsum("ni,nic->cn", vals, nodal)

    def gradient(self, x, y):
        """Gradients at arbitrary points: (2, n) scalar, (2, 2, n) vector
        with index [component, derivative]."""
        tri, bary = self.space.mesh.locate(x, y)
        _, dref = _reference_basis(self.space.degree, bary)
        _, invJ, _, _ = self.space.geometry()
        dphi = np.einsum("nia,nab->nib", dref, invJ[tri])
        nodal = self.nodal()[self.space.element_nodes[tri]]
        if self.space.value_dim == 1:
            return np.einsum("nib,ni->bn", dphi, nodal)
        return np.einsum("nib,nic->cbn", dphi, nodal)


class FieldFunction:
    """A discrete field seen as a function of (x, y, t), for measuring one
    solution against another computed on a different mesh."""

    def __init__(self, fv):
        self.fv = fv

    def value(self, x, y, t=None):
        x = np.asarray(x, dtype=float)
        v = self.fv.evaluate(x.ravel(), np.asarray(y, dtype=float).ravel())
        return v.reshape(v.shape[:-1] + x.shape)

    def grad(self, x, y, t=None):
        x = np.asarray(x, dtype=float)
        g = self.fv.gradient(x.ravel(), np.asarray(y, dtype=float).ravel())
        return g.reshape(g.shape[:-1] + x.shape)


def _as_array(values, shape):
    arr = np.asarray(values, dtype=float)
    if arr.shape != shape:
        arr = np.broadcast_to(arr, shape).copy()
    return arr


def interpolate(space, f):
    """Nodal interpolant; ``f(x, y)`` returns shape (n,) or (2, n)."""
    x, y = space.node_coordinates.T
    vals = f(x, y)
    if space.value_dim == 1:
        vals = _as_array(vals, x.shape)
    else:
        vals = _as_array(vals, (2,) + x.shape).T.ravel()
    if not np.all(np.isfinite(vals)):
        raise DataError("interpolated function produced non-finite values")
    return FieldVector(space, vals)


def mass_matrix(space, rule=None):
    from .assembly import assemble_mass

    return assemble_mass(space, rule)


def l2_project(space, f, rule=None):
    """L2 projection of ``f`` onto a scalar space.

    ``f`` is either a callable f(x, y) or an array of values at the
    quadrature points of ``rule`` with shape (ne, nq).
    """
    if space.value_dim != 1:
        raise ConfigurationError("l2_project supports scalar spaces")
    rule = rule or space.default_rule()
    phi, _, dx, xq = space.tabulate(rule)
    if callable(f):
        vals = _as_array(f(xq[..., 0], xq[..., 1]), dx.shape)
    else:
        vals = _as_array(f, dx.shape)
    if not np.all(np.isfinite(vals)):
        raise DataError("projected function produced non-finite values")
    local = np.einsum("eq,qi->ei", vals * dx, phi)
    rhs = np.bincount(space.element_nodes.ravel(), local.ravel(), minlength=space.dof_count)
    M = mass_matrix(space, rule)
    coeffs = spla.spsolve(M.tocsc(), rhs)
    return FieldVector(space, coeffs)


def compute_error(fh, exact, norm="L2", t=0.0, relative=False, rule=None):
    """Quadrature approximation of ||fh - exact|| in L2 or full H1 norm.

    ``exact`` provides ``value(x, y, t)`` and, for H1, ``grad(x, y, t)``;
    vector fields stack components along the leading axis.
    """
    norm = norm.upper()
    if norm not in ("L2", "H1", "H1SEMI"):
        raise ConfigurationError(f"unknown norm {norm!r}")
    space = fh.space
    rule = rule or quadrature(min(2 * space.degree + 4, 8))
    _, _, dx, xq = space.tabulate(rule)
    vh, gh = fh.at_quadrature(rule)
    x, y = xq[..., 0], xq[..., 1]
    ve = np.asarray(exact.value(x, y, t), dtype=float)
    if space.value_dim == 2:
        ve = np.moveaxis(ve, 0, -1)
    err = 0.0
    ref = 0.0
    if norm in ("L2", "H1"):
        d = (vh - ve) ** 2
        err += np.sum(d.reshape(dx.shape + (-1,)).sum(-1) * dx)
        ref += np.sum((ve**2).reshape(dx.shape + (-1,)).sum(-1) * dx)
    if norm in ("H1", "H1SEMI"):
        ge = np.asarray(exact.grad(x, y, t), dtype=float)
        ge = np.moveaxis(ge, (0, 1), (-2, -1)) if space.value_dim == 2 else np.moveaxis(ge, 0, -1)
        d = (gh - ge) ** 2
        err += np.sum(d.reshape(dx.shape + (-1,)).sum(-1) * dx)
        ref += np.sum((ge**2).reshape(dx.shape + (-1,)).sum(-1) * dx)
    err = np.sqrt(err)
    if relative:
        if ref == 0.0:
            raise ZeroDivisionError("relative error requested but the exact field has zero norm")
        return err / np.sqrt(ref)
    return err


def field_norm(fh, norm="L2", rule=None):
    """Norm of a discrete field."""

    class _Zero:
        @staticmethod
        def value(x, y, t):
            return np.zeros((fh.space.value_dim,) + x.shape) if fh.space.value_dim == 2 else np.zeros_like(x)

        @staticmethod
        def grad(x, y, t):
            shape = (2, 2) if fh.space.value_dim == 2 else (2,)
            return np.zeros(shape + x.shape)

    return compute_error(fh, _Zero, norm=norm, rule=rule)


# export ---------------------------------------------------------------------


def write_csv(path, fields):
    """Per-vertex CSV: x, y, then one column per scalar component."""
    if not fields:
        raise DataError("no fields to export")
    mesh = next(iter(fields.values())).space.mesh
    nv = mesh.n_vertices
    cols, names = [mesh.vertices[:, 0], mesh.vertices[:, 1]], ["x", "y"]
    for name, fv in fields.items():
        nodal = fv.nodal()[:nv]
        if fv.space.value_dim == 1:
            cols.append(nodal)
            names.append(name)
        else:
            cols += [nodal[:, 0], nodal[:, 1]]
            names += [f"{name}_1", f"{name}_2"]
    data = np.column_stack(cols)
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def write_vtk(path, fields, title="thermoporo"):
    """Legacy ASCII VTK unstructured grid with vertex point data."""
    mesh = next(iter(fields.values())).space.mesh
    nv, nt = mesh.n_vertices, mesh.n_triangles
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n" + "5\n" * nt)
        fh.write(f"POINT_DATA {nv}\n")
        for name, fv in fields.items():
            nodal = fv.nodal()[:nv]
            if fv.space.value_dim == 1:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.writelines(f"{v:.17g}\n" for v in nodal)
            else:
                fh.write(f"VECTORS {name} double\n")
                fh.writelines(f"{a:.17g} {b:.17g} 0\n" for a, b in nodal)
