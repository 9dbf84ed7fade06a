"""Linear solves, the reformulated time stepper (decoupled and Picard
variants), the classical three-field stepper and run diagnostics.

The reformulated stepper advances (u, tau, varpi, varsigma).  With
``theta = 0`` a generalized Stokes problem for (u, tau) is solved with the
previous varpi, varsigma, then the coupled (varpi, varsigma) diffusion
system with the permeability evaluated at the new tau.  With ``theta = 1``
the four fields are solved together, the permeability being frozen at the
latest tau iterate (Picard iteration).
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    DirichletSet,
    SparseSystem,
    assemble_boundary_load,
    assemble_divergence,
    assemble_function_load,
    assemble_graddiv,
    assemble_mass,
    assemble_stokes_block,
    assemble_weighted_stiffness,
    boundary_values,
    translate_pt_dirichlet,
)
from .errors import ConfigurationError, DataError, SolverError
from .mesh import quadrature
from .model import permeability_factor
from .spaces import FeSpace, FieldVector, interpolate, l2_project

log = logging.getLogger(__name__)


# linear algebra -------------------------------------------------------------------


def _condition_estimate(A, lu):
    try:
        n = A.shape[0]
        inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda b: lu.solve(b, trans="T"))
        return spla.onenormest(A) * spla.onenormest(inv)
    except Exception:  # pragma: no cover - diagnostic only
        return float("nan")


class _Factorization:
    """LU of a row- and column-equilibrated matrix.

    Residuals are measured on the equilibrated system, which keeps the
    check meaningful when blocks differ in scale by many orders.
    """

    def __init__(self, A):
        A = sp.csr_matrix(A)
        r = abs(A).max(axis=1).toarray().ravel()
        if np.any(r == 0) or not np.all(np.isfinite(r)):
            raise SolverError("matrix has an empty or non-finite row")
        Dr = sp.diags(1.0 / r)
        c = abs(Dr @ A).max(axis=0).toarray().ravel()
        if np.any(c == 0):
            raise SolverError("matrix has an empty column")
        self.row = 1.0 / r
        self.col = 1.0 / c
        self.scaled = (Dr @ A @ sp.diags(self.col)).tocsc()
        try:
            self.lu = spla.splu(self.scaled)
        except RuntimeError as exc:
            raise SolverError(f"matrix is singular ({exc})") from exc

    def solve(self, b, tol):
        bs = self.row * b
        bnorm = np.linalg.norm(bs)
        if bnorm == 0.0:
            return np.zeros_like(b)
        y = self.lu.solve(bs)
        for _ in range(3):
            res = bs - self.scaled @ y
            rel = np.linalg.norm(res) / bnorm
            if rel <= tol and np.all(np.isfinite(y)):
                return self.col * y
            y = y + self.lu.solve(res)
        rel = np.linalg.norm(bs - self.scaled @ y) / bnorm
        if rel <= tol and np.all(np.isfinite(y)):
            return self.col * y
        raise SolverError(
            f"linear solve residual {rel:.3e} exceeds tolerance {tol:.1e}; "
            f"estimated 1-norm condition number {_condition_estimate(self.scaled, self.lu):.3e}"
        )


def solve_linear(system, tol=1e-10):
    """Direct sparse solve with a relative-residual check."""
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs
    else:
        A, b = system
        A = sp.csr_matrix(A)
        b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise SolverError(f"matrix is not square: {A.shape}")
    return _Factorization(A).solve(b, tol)


class ConstrainedOperator:
    """A matrix with a fixed set of Dirichlet DOFs, factorized once.

    ``solve(rhs, values)`` applies symmetric elimination with the given
    boundary values and returns the full solution vector.
    """

    def __init__(self, A, dofs, tol=1e-10):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        self.dofs = np.asarray(dofs, dtype=int)
        self.tol = tol
        self.columns = sp.csc_matrix(A)[:, self.dofs]
        free = np.ones(n)
        free[self.dofs] = 0.0
        P = sp.diags(free)
        self.matrix = (P @ A @ P + sp.diags(1.0 - free)).tocsr()
        self.factorization = _Factorization(self.matrix)

    def solve(self, rhs, values=()):
        r = np.array(rhs, dtype=float)
        if len(self.dofs):
            r -= self.columns @ np.asarray(values, dtype=float)
            r[self.dofs] = values
        return self.factorization.solve(r, self.tol)


# settings and state ----------------------------------------------------------


@dataclass(frozen=True)
class SolverSettings:
    theta: int = 0
    dt: Optional[float] = None
    t_f: float = 1.0
    dt_coefficient: float = 1.0
    linear_tol: float = 1e-10
    picard_tol: float = 1e-10
    picard_max: int = 50
    init: str = "interpolate"
    init_q: str = "project"
    # "constant" freezes k at a * k0 (the b = 0 limit) without evaluating it
    permeability: str = "nonlinear"

    def validate(self):
        errs = []
        if self.theta not in (0, 1):
            errs.append(f"theta must be 0 or 1, got {self.theta}")
        for name in ("linear_tol", "picard_tol"):
            v = getattr(self, name)
            if not 0 < v < 1:
                errs.append(f"{name} must lie in (0, 1), got {v}")
        if self.dt is not None and not self.dt > 0:
            errs.append(f"time step must be positive, got {self.dt}")
        if not self.dt_coefficient > 0:
            errs.append(f"dt_coefficient must be positive, got {self.dt_coefficient}")
        if not self.t_f > 0:
            errs.append(f"final time must be positive, got {self.t_f}")
        if int(self.picard_max) != self.picard_max or self.picard_max < 1:
            errs.append(f"picard_max must be a positive integer, got {self.picard_max}")
        if self.init not in ("interpolate", "project"):
            errs.append(f"init must be 'interpolate' or 'project', got {self.init!r}")
        if self.init_q not in ("project", "exact"):
            errs.append(f"init_q must be 'project' or 'exact', got {self.init_q!r}")
        if self.permeability not in ("nonlinear", "constant"):
            errs.append(f"permeability must be 'nonlinear' or 'constant', got {self.permeability!r}")
        if errs:
            raise ConfigurationError("; ".join(errs))
        return self

    def time_grid(self, h):
        """(dt, number of steps) for nominal mesh size ``h``."""
        self.validate()
        dt = self.dt if self.dt is not None else self.dt_coefficient * h * h
        n = int(round(self.t_f / dt))
        if n < 1 or abs(n * dt - self.t_f) > 1e-9 * self.t_f:
            raise ConfigurationError(f"final time {self.t_f} is not a multiple of the time step {dt}")
        if self.theta == 0 and dt > self.dt_coefficient * h * h * (1 + 1e-12):
            warnings.warn(
                f"theta = 0 with dt = {dt:g} > h^2 = {h * h:g}; the decoupled scheme is only stable for dt = O(h^2)",
                RuntimeWarning,
                stacklevel=2,
            )
        return dt, n


@dataclass
class StepperState:
    n: int
    t: float
    u: FieldVector
    p: FieldVector
    T: FieldVector
    tau: Optional[FieldVector] = None
    varpi: Optional[FieldVector] = None
    varsigma: Optional[FieldVector] = None
    q: Optional[FieldVector] = None
    # varpi, varsigma at the lagged index used by the theta = 0 recovery
    varpi_lag: Optional[FieldVector] = None
    varsigma_lag: Optional[FieldVector] = None
    picard_iterations: int = 0
    picard_history: list = field(default_factory=list)
    source_integrals: tuple = (0.0, 0.0)
    diagnostics: dict = field(default_factory=dict)


def element_pair(pair):
    """Parse '2-1' style strings or (ku, ks) tuples."""
    if isinstance(pair, str):
        try:
            ku, ks = (int(s) for s in pair.split("-"))
        except ValueError as exc:
            raise ConfigurationError(f"element pair must look like '2-1', got {pair!r}") from exc
    else:
        ku, ks = pair
    if ku not in (1, 2) or ks not in (1, 2):
        raise ConfigurationError(f"element degrees must be 1 or 2, got {ku}-{ks}")
    return int(ku), int(ks)


def nominal_h(mesh):
    """Cell width of the structured grid (the h of the convergence tables)."""
    return mesh.domain.width / mesh.grid[0]


def _rel_change(new, old):
    d = np.linalg.norm(new - old)
    if d == 0.0:
        return 0.0
    return d / max(np.linalg.norm(new), np.finfo(float).tiny)


# common machinery -------------------------------------------------------------


class _Base:
    def __init__(self, case, mesh, pair, settings):
        self.case = case
        self.mesh = mesh
        self.settings = settings.validate()
        self.params = case.params.validate()
        self.coeffs = case.coeffs
        self.ku, self.ks = element_pair(pair)
        self.U = FeSpace(mesh, self.ku, 2)
        self.S = FeSpace(mesh, self.ks, 1)
        self.rule = quadrature(2 * max(self.ku, self.ks) + 2)
        self.h = nominal_h(mesh)
        self.dt, self.n_steps = settings.time_grid(self.h)
        bcs = case.bcs
        self.u_tags = (bcs.tags("u1"), bcs.tags("u2"))
        self.M = assemble_mass(self.S, self.rule)
        theta = self.params.Theta
        self.K_theta = assemble_weighted_stiffness(
            self.S, float(theta) if np.ndim(theta) == 0 else self.params.theta_tensor(), self.rule
        )
        self._k0_scalar = np.ndim(self.params.k0) == 0
        self._edge_normal_load = None

    # data ----------------------------------------------------------------

    def time(self, n):
        return n * self.dt

    def u_dirichlet(self, t):
        d = self.case.bcs.dirichlet
        return DirichletSet.union(
            boundary_values(self.U, d.get("u1", {}), t, component=0),
            boundary_values(self.U, d.get("u2", {}), t, component=1),
        )

    def scalar_dirichlet(self, name, t):
        return boundary_values(self.S, self.case.bcs.dirichlet.get(name, {}), t)

    def permeability_coefficient(self, tau_q):
        if self.settings.permeability == "constant":
            f = np.full(np.shape(tau_q), float(self.params.a))
        else:
            f = permeability_factor(tau_q, self.params)
        if self._k0_scalar:
            return f * float(self.params.k0)
        return f[..., None, None] * self.params.k0_tensor()

    def displacement_load(self, t, p=None, T=None):
        case = self.case
        F = assemble_function_load(self.U, case.f, t, self.rule)
        bcs = case.bcs
        if bcs.traction is not None:
            state = None
            if bcs.traction_needs:
                state = {"p": self._boundary_trace(p, "p", t), "T": self._boundary_trace(T, "T", t)}
            F = F + assemble_boundary_load(self.U, None, bcs.traction, t, state=state, needs=bcs.traction_needs)
        return F

    def _boundary_trace(self, fv, name, t):
        """Copy of ``fv`` with its Dirichlet nodes set to the data at t."""
        if fv is None:
            raise DataError(f"traction needs the boundary trace of {name}")
        out = fv.copy()
        ds = self.scalar_dirichlet(name, t)
        out.coefficients[ds.dofs] = ds.values
        return out

    def scalar_loads(self, t):
        """(g, y) + <g1, y> and (phi, z) + <phi1, z> load vectors."""
        case, bcs = self.case, self.case.bcs
        Fg = assemble_function_load(self.S, case.g, t, self.rule)
        Fphi = assemble_function_load(self.S, case.phi, t, self.rule)
        ntags_p, ntags_T = bcs.neumann_tags("p"), bcs.neumann_tags("T")
        if bcs.flux_p is not None and ntags_p:
            Fg = Fg + assemble_boundary_load(self.S, ntags_p, bcs.flux_p, t)
        if bcs.flux_T is not None and ntags_T:
            Fphi = Fphi + assemble_boundary_load(self.S, ntags_T, bcs.flux_T, t)
        return Fg, Fphi

    def normal_flux_load(self):
        if self._edge_normal_load is None:
            self._edge_normal_load = assemble_boundary_load(self.U, None, lambda x, y, t, n: n)
        return self._edge_normal_load

    def _initial_scalar(self, f):
        if self.settings.init == "project":
            return l2_project(self.S, f, self.rule)
        return interpolate(self.S, f)

    def _check_initial_data(self):
        case = self.case
        for name in ("u0", "p0", "T0"):
            if getattr(case, name, None) is None:
                raise DataError(f"case {case.name!r} has no initial data {name}")


# reformulated stepper -----------------------------------------------------------


class MafeaSolver(_Base):
    """Stepper for the four-field reformulation on a pair (P_ku)^2 - P_ks."""

    def __init__(self, case, mesh, pair=(2, 1), settings=SolverSettings()):
        super().__init__(case, mesh, pair, settings)
        bcs = case.bcs
        if bcs.tags("p") != bcs.tags("T"):
            raise ConfigurationError(
                "p and T Dirichlet segments must coincide for the reformulated solver "
                f"(p on {bcs.tags('p')}, T on {bcs.tags('T')})"
            )
        self.stokes = assemble_stokes_block(self.U, self.S, self.coeffs, self.rule)
        self.nU = self.U.dof_count
        self.nS = self.S.dof_count
        self.pt_nodes = self.S.boundary_nodes(bcs.tags("p")) if bcs.tags("p") else np.zeros(0, dtype=int)
        self._u_dofs = self.u_dirichlet(0.0).dofs
        self._stokes_op = None
        self._transport_cache = (None, None)
        self._mono_cache = (None, None)

    # initial state ------------------------------------------------------

    def init(self):
        self._check_initial_data()
        case, c = self.case, self.coeffs
        u0 = interpolate(self.U, case.u0)
        p0 = self._initial_scalar(case.p0)
        T0 = self._initial_scalar(case.T0)
        if self.settings.init_q == "exact":
            qf = case.q0()
            if qf is None:
                raise DataError("init_q = 'exact' needs a case with an exact solution")
            q0 = interpolate(self.S, qf)
        else:
            q0 = l2_project(self.S, u0.divergence_at_quadrature(self.rule), self.rule)
        varpi, tau, varsigma = c.to_reformulated(p0.coefficients, T0.coefficients, q0.coefficients)
        S = self.S
        state = StepperState(
            n=0, t=0.0, u=u0, p=p0, T=T0, q=q0,
            tau=FieldVector(S, tau), varpi=FieldVector(S, varpi), varsigma=FieldVector(S, varsigma),
        )
        state.varpi_lag, state.varsigma_lag = state.varpi, state.varsigma
        return state

    # helpers -------------------------------------------------------------

    def _stokes_operator(self):
        if self._stokes_op is None:
            self._stokes_op = ConstrainedOperator(self.stokes.matrix, self._u_dofs, self.settings.linear_tol)
        return self._stokes_op

    def _k_stiffness(self, tau):
        tau_q, _ = tau.at_quadrature(self.rule)
        kq = self.permeability_coefficient(tau_q)
        return kq, assemble_weighted_stiffness(self.S, kq, self.rule)

    def _pt_values(self, t):
        dp = self.scalar_dirichlet("p", t)
        dT = self.scalar_dirichlet("T", t)
        return dp.values, dT.values

    def recover(self, tau, varpi, varsigma):
        p, T, q = self.coeffs.to_original(tau.coefficients, varpi.coefficients, varsigma.coefficients)
        return FieldVector(self.S, p), FieldVector(self.S, T), FieldVector(self.S, q)

    # one step -----------------------------------------------------------

    def step(self, state):
        if self.settings.theta == 0:
            return self._step_decoupled(state)
        return self._step_picard(state)

    def _step_decoupled(self, state):
        c, dt, M = self.coeffs, self.dt, self.M
        n1 = state.n + 1
        t = self.time(n1)
        nU = self.nU
        # generalized Stokes problem with lagged varpi, varsigma
        rhs = np.concatenate(
            [
                self.displacement_load(t, state.p, state.T),
                M @ (c.gamma4 * state.varpi.coefficients + c.gamma1 * state.varsigma.coefficients),
            ]
        )
        x = self._stokes_operator().solve(rhs, self.u_dirichlet(t).values)
        u = FieldVector(self.U, x[:nU])
        tau = FieldVector(self.S, x[nU:])

        # coupled diffusion for (varpi, varsigma) with k(tau^{n+1})
        kq, Kk = self._k_stiffness(tau)
        key = kq.tobytes()
        op = self._transport_cache[1] if self._transport_cache[0] == key else None
        if op is None:
            A = sp.bmat(
                [
                    [M + dt * c.gamma5 * Kk, dt * c.gamma2 * Kk],
                    [dt * c.gamma2 * self.K_theta, M + dt * c.gamma3 * self.K_theta],
                ],
                format="csr",
            )
            dofs = np.concatenate([self.pt_nodes, self.nS + self.pt_nodes])
            op = ConstrainedOperator(A, dofs, self.settings.linear_tol)
            self._transport_cache = (key, op)
        Fg, Fphi = self.scalar_loads(t)
        tv = tau.coefficients
        rhs = np.concatenate(
            [
                M @ state.varpi.coefficients + dt * (Fg - c.gamma4 * (Kk @ tv)),
                M @ state.varsigma.coefficients + dt * (Fphi - c.gamma1 * (self.K_theta @ tv)),
            ]
        )
        pD, TD = self._pt_values(t)
        wD, sD = translate_pt_dirichlet(tv[self.pt_nodes], pD, TD, c)
        y = op.solve(rhs, np.concatenate([wD, sD]))
        varpi = FieldVector(self.S, y[: self.nS])
        varsigma = FieldVector(self.S, y[self.nS:])

        # recovery uses the lagged varpi, varsigma
        p, T, q = self.recover(tau, state.varpi, state.varsigma)
        return StepperState(
            n=n1, t=t, u=u, p=p, T=T, q=q, tau=tau, varpi=varpi, varsigma=varsigma,
            varpi_lag=state.varpi, varsigma_lag=state.varsigma,
            picard_iterations=1, source_integrals=(Fg.sum(), Fphi.sum()),
        )

    def _monolithic_operator(self, kq, Kk):
        key = kq.tobytes()
        if self._mono_cache[0] == key:
            return self._mono_cache[1]
        c, dt, M, Kt = self.coeffs, self.dt, self.M, self.K_theta
        st = self.stokes
        A = sp.bmat(
            [
                [st.mu * st.stiffness, -st.divergence.T, None, None],
                [st.divergence, c.gamma6 * M, -c.gamma4 * M, -c.gamma1 * M],
                [None, dt * c.gamma4 * Kk, M + dt * c.gamma5 * Kk, dt * c.gamma2 * Kk],
                [None, dt * c.gamma1 * Kt, dt * c.gamma2 * Kt, M + dt * c.gamma3 * Kt],
            ],
            format="csr",
        )
        # p and T conditions as exact linear constraints on (tau, varpi, varsigma)
        nU, nS = self.nU, self.nS
        nodes = self.pt_nodes
        rows_w = nU + nS + nodes
        rows_s = nU + 2 * nS + nodes
        keep = np.ones(A.shape[0])
        keep[rows_w] = 0.0
        keep[rows_s] = 0.0
        k = len(nodes)
        r = np.concatenate([np.repeat(rows_w, 3), np.repeat(rows_s, 3)])
        cols = np.stack([nU + nodes, nU + nS + nodes, nU + 2 * nS + nodes], axis=1).ravel()
        cols = np.concatenate([cols, cols])
        vals = np.concatenate(
            [np.tile([c.gamma4, c.gamma5, c.gamma2], k), np.tile([c.gamma1, c.gamma2, c.gamma3], k)]
        )
        C = sp.csr_matrix((vals, (r, cols)), shape=A.shape)
        A = sp.diags(keep) @ A + C
        op = ConstrainedOperator(A, self._u_dofs, self.settings.linear_tol)
        self._mono_cache = (key, op)
        return op

    def _step_picard(self, state):
        M, dt = self.M, self.dt
        n1 = state.n + 1
        t = self.time(n1)
        nU, nS = self.nU, self.nS
        Fg, Fphi = self.scalar_loads(t)
        pD, TD = self._pt_values(t)
        rows_w = nU + nS + self.pt_nodes
        rows_s = nU + 2 * nS + self.pt_nodes
        uD = self.u_dirichlet(t).values
        tail = np.concatenate(
            [np.zeros(nS), M @ state.varpi.coefficients + dt * Fg, M @ state.varsigma.coefficients + dt * Fphi]
        )
        tau, varpi, varsigma = state.tau, state.varpi, state.varsigma
        p, T = state.p, state.T
        history = []
        for it in range(1, self.settings.picard_max + 1):
            kq, Kk = self._k_stiffness(tau)
            op = self._monolithic_operator(kq, Kk)
            rhs = np.concatenate([self.displacement_load(t, p, T), tail])
            rhs[rows_w] = pD
            rhs[rows_s] = TD
            x = op.solve(rhs, uD)
            new = [x[nU:nU + nS], x[nU + nS:nU + 2 * nS], x[nU + 2 * nS:]]
            change = max(
                _rel_change(new[0], tau.coefficients),
                _rel_change(new[1], varpi.coefficients),
                _rel_change(new[2], varsigma.coefficients),
            )
            history.append(change)
            if not np.all(np.isfinite(x)):
                raise SolverError(f"Picard iterate became non-finite at step {n1}", history)
            tau, varpi, varsigma = (FieldVector(self.S, v) for v in new)
            u = FieldVector(self.U, x[:nU])
            p, T, q = self.recover(tau, varpi, varsigma)
            if change < self.settings.picard_tol:
                break
        else:
            raise SolverError(
                f"Picard iteration did not converge in {self.settings.picard_max} iterations at step {n1} "
                f"(last relative change {history[-1]:.3e})",
                history,
            )
        return StepperState(
            n=n1, t=t, u=u, p=p, T=T, q=q, tau=tau, varpi=varpi, varsigma=varsigma,
            varpi_lag=varpi, varsigma_lag=varsigma,
            picard_iterations=len(history), picard_history=history, source_integrals=(Fg.sum(), Fphi.sum()),
        )

    def run(self, **kwargs):
        return run(self, **kwargs)


# classical three-field stepper ---------------------------------------------------------


class ClassicalSolver(_Base):
    """Backward Euler for (u, p, T) in the original variables, with the
    permeability frozen at the previous step."""

    def __init__(self, case, mesh, pair=(2, 1), settings=SolverSettings()):
        super().__init__(case, mesh, pair, settings)
        U, S, rule = self.U, self.S, self.rule
        L = self.coeffs.lam + self.coeffs.mu
        self.B = assemble_divergence(U, S, rule)
        self.A_u = self.coeffs.mu * assemble_weighted_stiffness(U, 1.0, rule) + L * assemble_graddiv(U, rule)
        self.nU, self.nS = U.dof_count, S.dof_count
        self._cache = (None, None)

    def init(self):
        self._check_initial_data()
        case = self.case
        u0 = interpolate(self.U, case.u0)
        p0 = self._initial_scalar(case.p0)
        T0 = self._initial_scalar(case.T0)
        return self._complete(StepperState(n=0, t=0.0, u=u0, p=p0, T=T0))

    def _complete(self, state):
        q = l2_project(self.S, state.u.divergence_at_quadrature(self.rule), self.rule)
        varpi, tau, varsigma = self.coeffs.to_reformulated(state.p.coefficients, state.T.coefficients, q.coefficients)
        state.q = q
        state.tau = FieldVector(self.S, tau)
        state.varpi = FieldVector(self.S, varpi)
        state.varsigma = FieldVector(self.S, varsigma)
        state.varpi_lag, state.varsigma_lag = state.varpi, state.varsigma
        return state

    def _tau_at_quadrature(self, state):
        L = self.coeffs.lam + self.coeffs.mu
        pq, _ = state.p.at_quadrature(self.rule)
        Tq, _ = state.T.at_quadrature(self.rule)
        qq = state.u.divergence_at_quadrature(self.rule)
        return self.params.alpha * pq - L * qq + self.params.beta * Tq

    def step(self, state):
        prm, dt, M, B = self.params, self.dt, self.M, self.B
        al, be, a0, b0, c0 = prm.alpha, prm.beta, prm.a0, prm.b0, prm.c0
        n1 = state.n + 1
        t = self.time(n1)
        nU, nS = self.nU, self.nS
        kq = self.permeability_coefficient(self._tau_at_quadrature(state))
        key = kq.tobytes()
        dp = self.scalar_dirichlet("p", t)
        dT = self.scalar_dirichlet("T", t)
        du = self.u_dirichlet(t)
        dofs = np.concatenate([du.dofs, nU + dp.dofs, nU + nS + dT.dofs])
        if self._cache[0] == key:
            op = self._cache[1]
        else:
            Kk = assemble_weighted_stiffness(self.S, kq, self.rule)
            A = sp.bmat(
                [
                    [self.A_u, -al * B.T, -be * B.T],
                    [al * B, c0 * M + dt * Kk, -b0 * M],
                    [be * B, -b0 * M, a0 * M + dt * self.K_theta],
                ],
                format="csr",
            )
            op = ConstrainedOperator(A, dofs, self.settings.linear_tol)
            self._cache = (key, op)
        Fg, Fphi = self.scalar_loads(t)
        Bu = B @ state.u.coefficients
        pn, Tn = state.p.coefficients, state.T.coefficients
        rhs = np.concatenate(
            [
                self.displacement_load(t, state.p, state.T),
                al * Bu + M @ (c0 * pn - b0 * Tn) + dt * Fg,
                be * Bu + M @ (a0 * Tn - b0 * pn) + dt * Fphi,
            ]
        )
        x = op.solve(rhs, np.concatenate([du.values, dp.values, dT.values]))
        new = StepperState(
            n=n1, t=t,
            u=FieldVector(self.U, x[:nU]),
            p=FieldVector(self.S, x[nU:nU + nS]),
            T=FieldVector(self.S, x[nU + nS:]),
            picard_iterations=1, source_integrals=(Fg.sum(), Fphi.sum()),
        )
        return self._complete(new)

    def run(self, **kwargs):
        return run(self, **kwargs)


# diagnostics -----------------------------------------------------------------


def _integral(fv, rule):
    _, _, dx, _ = fv.space.tabulate(rule)
    v, _ = fv.at_quadrature(rule)
    return float(np.sum(v * dx))


def diagnostics_means(state, solver):
    """(varpi, 1), (varsigma, 1), (tau, 1) and <u . n, 1>."""
    rule = solver.rule
    if state.varpi is None:
        return {"mean_varpi": 0.0, "mean_varsigma": 0.0, "mean_tau": 0.0, "flux_u": 0.0}
    return {
        "mean_varpi": _integral(state.varpi, rule),
        "mean_varsigma": _integral(state.varsigma, rule),
        "mean_tau": _integral(state.tau, rule),
        "flux_u": float(solver.normal_flux_load() @ state.u.coefficients),
    }


def _sq_norm(fv, rule, grad=False):
    _, _, dx, _ = fv.space.tabulate(rule)
    v, g = fv.at_quadrature(rule)
    a = g if grad else v
    return float(np.sum(a.reshape(dx.shape + (-1,)) ** 2 * dx[..., None]))


def diagnostics_energy(state, solver):
    """Discrete energy functional and its components.

    J = (mu |grad u|^2 + g6 |tau|^2 + (g5 + g2) |varpi_lag|^2
         + (g3 + g2) |varsigma_lag|^2 - g2/2 |varsigma - varpi|^2
         - 2 (f, u) - 2 <f1, u>) / 2
    where the lagged fields are those used by the recovery.
    """
    c, rule = solver.coeffs, solver.rule
    if state.varpi is None:
        return {"J": 0.0}
    diff = FieldVector(solver.S, state.varsigma.coefficients - state.varpi.coefficients)
    wl = state.varpi_lag if state.varpi_lag is not None else state.varpi
    sl = state.varsigma_lag if state.varsigma_lag is not None else state.varsigma
    parts = {
        "elastic": c.mu * _sq_norm(state.u, rule, grad=True),
        "tau": c.gamma6 * _sq_norm(state.tau, rule),
        "varpi": (c.gamma5 + c.gamma2) * _sq_norm(wl, rule),
        "varsigma": (c.gamma3 + c.gamma2) * _sq_norm(sl, rule),
        "cross": -0.5 * c.gamma2 * _sq_norm(diff, rule),
    }
    parts["work"] = -2.0 * float(solver.displacement_load(state.t, state.p, state.T) @ state.u.coefficients)
    parts["J"] = 0.5 * sum(parts.values())
    return parts


def undershoot(p, rule=None):
    """Integral of the negative part of p, and the minimum nodal value."""
    rule = rule or p.space.default_rule()
    _, _, dx, _ = p.space.tabulate(rule)
    v, _ = p.at_quadrature(rule)
    return float(np.sum(np.maximum(0.0, -v) * dx)), float(p.coefficients.min())


LOG_COLUMNS = (
    "n", "t", "mean_varpi", "mean_varsigma", "mean_tau", "flux_u", "J",
    "picard_iterations", "undershoot", "min_p",
)


def step_record(state, solver):
    rec = {"n": state.n, "t": state.t}
    rec.update(diagnostics_means(state, solver))
    rec["J"] = diagnostics_energy(state, solver)["J"]
    rec["picard_iterations"] = state.picard_iterations
    rec["undershoot"], rec["min_p"] = undershoot(state.p, solver.rule)
    rec["source_g"], rec["source_phi"] = state.source_integrals
    return rec


def run(solver, log_path=None, snapshot_every=0, callback=None, records=True):
    """Advance from the initial state to the final time.

    Returns (final state, per-step records, snapshots); snapshots are kept
    every ``snapshot_every`` steps (0 keeps none).
    """
    state = solver.init()
    recs = [step_record(state, solver)] if records else []
    snaps = [state] if snapshot_every else []
    writer = None
    fh = None
    try:
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            writer.writerow([_fmt(recs[0][k]) for k in LOG_COLUMNS])
        for _ in range(solver.n_steps):
            state = solver.step(state)
            if records:
                rec = step_record(state, solver)
                recs.append(rec)
                if writer is not None:
                    writer.writerow([_fmt(rec[k]) for k in LOG_COLUMNS])
            if snapshot_every and state.n % snapshot_every == 0:
                snaps.append(state)
            if callback is not None:
                callback(state)
    finally:
        if fh is not None:
            fh.close()
    return state, recs, snaps


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def mean_conservation_defect(records):
    """Largest deviation of (varpi, 1) and (varsigma, 1) from the initial
    means plus the accumulated source integrals, relative to
    max(1, |initial mean|)."""
    w0 = records[0]["mean_varpi"]
    s0 = records[0]["mean_varsigma"]
    acc_g = acc_phi = 0.0
    worst_w = worst_s = 0.0
    for prev, rec in zip(records[:-1], records[1:]):
        dt = rec["t"] - prev["t"]
        acc_g += dt * rec["source_g"]
        acc_phi += dt * rec["source_phi"]
        worst_w = max(worst_w, abs(rec["mean_varpi"] - w0 - acc_g) / max(1.0, abs(w0)))
        worst_s = max(worst_s, abs(rec["mean_varsigma"] - s0 - acc_phi) / max(1.0, abs(s0)))
    return worst_w, worst_s
