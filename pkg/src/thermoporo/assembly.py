"""Sparse assembly of the bilinear and linear forms, and essential-condition
handling.

All element loops are vectorized over elements; the COO -> CSR conversion
sums duplicates in a fixed order, so matrices are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DataError, ModelError
from .mesh import edge_quadrature


def _scatter(edm_rows, edm_cols, local, shape):
    ne, nr = edm_rows.shape
    nc = edm_cols.shape[1]
    rows = np.broadcast_to(edm_rows[:, :, None], (ne, nr, nc)).ravel()
    cols = np.broadcast_to(edm_cols[:, None, :], (ne, nr, nc)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=shape)


def _interleave(K_scalar):
    """Scalar operator -> the same operator acting on each component of an
    interleaved vector field."""
    return sp.kron(K_scalar, sp.identity(2), format="csr")


def assemble_mass(space, rule=None, coefficient=None):
    """Gram matrix (c phi_j, phi_i); ``coefficient`` is None, a constant or
    an (ne, nq) array."""
    rule = rule or space.default_rule()
    phi, _, dx, _ = space.tabulate(rule)
    w = dx if coefficient is None else dx * np.broadcast_to(coefficient, dx.shape)
    local = np.einsum("eq,qi,qj->eij", w, phi, phi)
    n = space.n_nodes
    M = _scatter(space.element_nodes, space.element_nodes, local, (n, n))
    return _interleave(M) if space.value_dim == 2 else M


def _check_coefficient(c, shape):
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ModelError("non-finite diffusion coefficient")
    if c.ndim >= 2 and c.shape[-2:] == (2, 2) and c.shape != shape:
        c = np.broadcast_to(c, shape + (2, 2))
        sym = 0.5 * (c + np.swapaxes(c, -1, -2))
        tr = sym[..., 0, 0] + sym[..., 1, 1]
        det = sym[..., 0, 0] * sym[..., 1, 1] - sym[..., 0, 1] ** 2
        if np.any(tr <= 0) or np.any(det <= 0):
            raise ModelError("diffusion tensor is not positive definite at some quadrature point")
        return c, True
    c = np.broadcast_to(c, shape)
    if np.any(c <= 0):
        raise ModelError("diffusion coefficient is not positive at some quadrature point")
    return c, False


def assemble_weighted_stiffness(space, coefficient=1.0, rule=None):
    """Matrix (C grad phi_j, grad phi_i).

    ``coefficient`` is a positive constant, a 2x2 SPD tensor, or values at
    the quadrature points of ``rule`` with shape (ne, nq) or (ne, nq, 2, 2).
    On a vector space the scalar operator acts on each component.
    """
    rule = rule or space.default_rule()
    _, dphi, dx, _ = space.tabulate(rule)
    c, tensor = _check_coefficient(coefficient, dx.shape)
    if tensor:
        local = np.einsum("eq,eqia,eqab,eqjb->eij", dx, dphi, c, dphi)
    else:
        local = np.einsum("eq,eqia,eqja->eij", dx * c, dphi, dphi)
    n = space.n_nodes
    K = _scatter(space.element_nodes, space.element_nodes, local, (n, n))
    return _interleave(K) if space.value_dim == 2 else K


def assemble_divergence(u_space, s_space, rule=None):
    """Matrix B with B[i, j] = (div phi_j, psi_i): rows scalar test functions,
    columns vector trial DOFs."""
    if u_space.mesh is not s_space.mesh:
        raise ConfigurationError("displacement and scalar spaces must share a mesh")
    if u_space.value_dim != 2 or s_space.value_dim != 1:
        raise ConfigurationError("divergence needs a vector trial space and a scalar test space")
    rule = rule or _joint_rule(u_space, s_space)
    _, dphi, dx, _ = u_space.tabulate(rule)
    psi, _, _, _ = s_space.tabulate(rule)
    # local DOF 2a + c of the vector space has divergence d(phi_a)/dx_c
    div = dphi.reshape(dphi.shape[0], dphi.shape[1], -1)
    local = np.einsum("eq,qi,eqj->eij", dx, psi, div)
    return _scatter(s_space.element_dof_map, u_space.element_dof_map, local,
                    (s_space.dof_count, u_space.dof_count))


def assemble_graddiv(u_space, rule=None):
    """Matrix (div phi_j, div phi_i) on a vector space."""
    rule = rule or u_space.default_rule()
    _, dphi, dx, _ = u_space.tabulate(rule)
    div = dphi.reshape(dphi.shape[0], dphi.shape[1], -1)
    local = np.einsum("eq,eqi,eqj->eij", dx, div, div)
    edm = u_space.element_dof_map
    return _scatter(edm, edm, local, (u_space.dof_count, u_space.dof_count))


def assemble_source(space, values, rule=None):
    """Load vector (s, phi_i) from values at quadrature points: (ne, nq)
    for scalar spaces, (ne, nq, 2) or (2, ne, nq) for vector spaces."""
    rule = rule or space.default_rule()
    phi, _, dx, _ = space.tabulate(rule)
    values = np.asarray(values, dtype=float)
    if space.value_dim == 1:
        local = np.einsum("eq,qi->ei", np.broadcast_to(values, dx.shape) * dx, phi)
        return np.bincount(space.element_nodes.ravel(), local.ravel(), minlength=space.dof_count)
    if values.shape[0] == 2 and values.shape[1:] == dx.shape:
        values = np.moveaxis(values, 0, -1)
    local = np.einsum("eqc,eq,qi->eic", values, dx, phi).reshape(len(dx), -1)
    return np.bincount(space.element_dof_map.ravel(), local.ravel(), minlength=space.dof_count)


def assemble_function_load(space, f, t, rule=None):
    """Load vector (f(., t), phi_i) for a callable f(x, y, t)."""
    rule = rule or space.default_rule()
    _, _, dx, xq = space.tabulate(rule)
    vals = np.asarray(f(xq[..., 0], xq[..., 1], t), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DataError("source term produced non-finite values")
    return assemble_source(space, vals, rule)


def _joint_rule(a, b):
    from .mesh import quadrature

    return quadrature(2 * max(a.degree, b.degree) + 2)


@dataclass
class StokesBlock:
    """Generalized Stokes operator [[mu K, -B^T], [B, gamma6 M]]."""

    stiffness: sp.csr_matrix
    divergence: sp.csr_matrix
    mass: sp.csr_matrix
    mu: float
    gamma6: float

    @property
    def matrix(self):
        return sp.bmat(
            [[self.mu * self.stiffness, -self.divergence.T], [self.divergence, self.gamma6 * self.mass]],
            format="csr",
        )

    @property
    def offsets(self):
        n_u = self.stiffness.shape[0]
        return {"u": slice(0, n_u), "tau": slice(n_u, n_u + self.mass.shape[0])}


def assemble_stokes_block(u_space, tau_space, coeffs, rule=None):
    if u_space.mesh is not tau_space.mesh:
        raise ConfigurationError("displacement and tau spaces must share a mesh")
    if not coeffs.gamma6 > 0:
        raise ConfigurationError(
            f"gamma6 = {coeffs.gamma6:g} is not positive; check a0 - b0 > 0, c0 - b0 > 0 and non-negative storage coefficients"
        )
    rule = rule or _joint_rule(u_space, tau_space)
    K = assemble_weighted_stiffness(u_space, 1.0, rule)
    B = assemble_divergence(u_space, tau_space, rule)
    M = assemble_mass(tau_space, rule)
    return StokesBlock(K, B, M, coeffs.mu, coeffs.gamma6)


# boundary loads --------------------------------------------------------------


def _edge_basis(degree, s):
    if degree == 1:
        return np.column_stack([1 - s, s])
    return np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)])


def edge_trace(field_vector, tags=None, n_points=4):
    """Values of a scalar field at edge quadrature points of tagged edges,
    shape (n_edges, n_points)."""
    space = field_vector.space
    sel = _edge_selection(space.mesh, tags)
    s, _ = edge_quadrature(n_points)
    nodes = space.boundary_edge_nodes()[sel]
    return field_vector.nodal()[nodes] @ _edge_basis(space.degree, s).T


def _edge_selection(mesh, tags):
    if tags is None:
        return np.ones(len(mesh.boundary_tags), dtype=bool)
    unknown = set(tags) - set(int(t) for t in np.unique(mesh.boundary_tags))
    if unknown:
        raise ConfigurationError(f"segment tags {sorted(unknown)} do not exist in the mesh")
    return np.isin(mesh.boundary_tags, list(tags))


def assemble_boundary_load(space, tags, data, t=0.0, state=None, needs=(), n_points=4):
    """Edge-quadrature load <data, phi_i> over boundary edges carrying ``tags``.

    ``data(x, y, t, normal, **trace)`` returns (n,) values for scalar spaces
    or (2, n) for vector spaces; ``normal`` has shape (2, n).  Fields named
    in ``needs`` are read from ``state`` (a mapping of scalar FieldVectors)
    and passed as traces.
    """
    mesh = space.mesh
    out = np.zeros(space.dof_count)
    if data is None:
        return out
    sel = _edge_selection(mesh, tags)
    if not sel.any():
        return out
    missing = [n for n in needs if state is None or n not in state]
    if missing:
        raise DataError(f"boundary data needs the trace of {', '.join(missing)}, which was not supplied")
    s, w = edge_quadrature(n_points)
    be = mesh.boundary_edges[sel]
    p0 = mesh.vertices[be[:, 0]]
    p1 = mesh.vertices[be[:, 1]]
    length = np.linalg.norm(p1 - p0, axis=1)
    x = p0[:, None, 0] + s[None, :] * (p1 - p0)[:, None, 0]
    y = p0[:, None, 1] + s[None, :] * (p1 - p0)[:, None, 1]
    normal = np.broadcast_to(mesh.outward_normals()[sel].T[:, :, None], (2,) + x.shape)
    trace = {n: edge_trace(state[n], tags, n_points) for n in needs}
    vals = np.asarray(data(x.ravel(), y.ravel(), t, normal.reshape(2, -1),
                           **{k: v.ravel() for k, v in trace.items()}), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DataError("boundary data produced non-finite values")
    basis = _edge_basis(space.degree, s)
    nodes = space.boundary_edge_nodes()[sel]
    wl = w[None, :] * length[:, None]
    if space.value_dim == 1:
        vals = np.broadcast_to(vals, (x.size,)).reshape(x.shape)
        local = np.einsum("eq,eq,qi->ei", vals, wl, basis)
        np.add.at(out, nodes.ravel(), local.ravel())
    else:
        vals = np.broadcast_to(vals, (2, x.size)).reshape((2,) + x.shape)
        local = np.einsum("ceq,eq,qi->eic", vals, wl, basis)
        np.add.at(out, (2 * nodes[:, :, None] + np.arange(2)).ravel(), local.ravel())
    return out


# essential conditions -----------------------------------------------------------


@dataclass
class DirichletSet:
    dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        dofs = np.asarray(self.dofs, dtype=int).ravel()
        values = np.broadcast_to(np.asarray(self.values, dtype=float), dofs.shape).copy()
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite Dirichlet value")
        order = np.argsort(dofs, kind="stable")
        dofs, values = dofs[order], values[order]
        uniq, first = np.unique(dofs, return_index=True)
        if len(uniq) != len(dofs):
            counts = np.diff(np.append(first, len(dofs)))
            for k in np.nonzero(counts > 1)[0]:
                seg = values[first[k]:first[k] + counts[k]]
                if np.any(seg != seg[0]):
                    raise ConfigurationError(f"conflicting Dirichlet values {seg.tolist()} for DOF {uniq[k]}")
            values = values[first]
        self.dofs, self.values = uniq, values

    def __len__(self):
        return len(self.dofs)

    def shifted(self, offset):
        return DirichletSet(self.dofs + offset, self.values)

    @staticmethod
    def union(*sets):
        return DirichletSet(
            np.concatenate([s.dofs for s in sets]) if sets else np.zeros(0, dtype=int),
            np.concatenate([s.values for s in sets]) if sets else np.zeros(0),
        )


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=float)
        n, m = self.matrix.shape
        if n != m or len(self.rhs) != n:
            raise DataError(f"system shape mismatch: matrix {self.matrix.shape}, rhs {self.rhs.shape}")


def apply_dirichlet(system, constraints):
    """Symmetric elimination: known values move to the right-hand side,
    constrained rows and columns become identity."""
    if len(constraints) == 0:
        return SparseSystem(system.matrix.copy(), system.rhs.copy(), dict(system.offsets))
    n = system.matrix.shape[0]
    d, v = constraints.dofs, constraints.values
    if d.min() < 0 or d.max() >= n:
        raise ConfigurationError("Dirichlet DOF out of range")
    A = system.matrix
    rhs = system.rhs - A[:, d] @ v
    rhs[d] = v
    free = np.ones(n)
    free[d] = 0.0
    P = sp.diags(free)
    A = (P @ A @ P + sp.diags(1.0 - free)).tocsr()
    A.eliminate_zeros()
    return SparseSystem(A, rhs, dict(system.offsets))


def translate_pt_dirichlet(tau_values, p_data, T_data, coeffs):
    """Nodal (varpi, varsigma) values matching prescribed p and T.

    Solves g5 varpi + g2 varsigma = p - g4 tau and
    g2 varpi + g3 varsigma = T - g1 tau at every node.
    """
    g1, g2, g3, g4, g5, _ = coeffs.gammas
    det = g5 * g3 - g2 * g2
    scale = max(abs(g5 * g3), g2 * g2)
    if scale == 0 or abs(det) < 1e-14 * scale:
        raise ConfigurationError(f"boundary translation is singular: g5*g3 - g2^2 = {det:g}")
    tau = np.asarray(tau_values, dtype=float)
    rp = np.asarray(p_data, dtype=float) - g4 * tau
    rt = np.asarray(T_data, dtype=float) - g1 * tau
    varpi = (g3 * rp - g2 * rt) / det
    varsigma = (g5 * rt - g2 * rp) / det
    return varpi, varsigma


def boundary_values(space, bc_map, t, component=None):
    """DirichletSet for segment data ``bc_map`` = {tag: f(x, y, t)}.

    Tags are visited in increasing order and the first value set on a node
    wins, so shared corners take the lower-numbered segment's data.
    ``component`` selects a component of a vector space.
    """
    nodes, values = [], []
    seen = np.zeros(space.n_nodes, dtype=bool)
    for tag in sorted(bc_map):
        nd = space.boundary_nodes([tag])
        nd = nd[~seen[nd]]
        seen[nd] = True
        x, y = space.node_coordinates[nd].T
        nodes.append(nd)
        values.append(np.broadcast_to(np.asarray(bc_map[tag](x, y, t), dtype=float), nd.shape))
    if not nodes:
        return DirichletSet()
    nodes = np.concatenate(nodes)
    values = np.concatenate(values)
    dofs = nodes if component is None else space.value_dim * nodes + component
    return DirichletSet(dofs, values)


def dump_coo(path, matrix):
    """Write (row, col, value) triplets, one per line."""
    A = sp.coo_matrix(matrix)
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write(f"# {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")
