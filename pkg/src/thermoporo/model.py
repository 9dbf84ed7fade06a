"""Physical parameters, the (p, T, q) <-> (varpi, tau, varsigma) change of
variables, the stress-dependent permeability law and the benchmark cases.

Variables::

    q        = div u
    varpi    = c0 p - b0 T + alpha q
    tau      = alpha p - (lambda + mu) q + beta T
    varsigma = a0 T - b0 p + beta q

and inversely ``p = g4 tau + g5 varpi + g2 varsigma``,
``T = g1 tau + g2 varpi + g3 varsigma``, ``q = -g6 tau + g4 varpi + g1 varsigma``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ModelError

log = logging.getLogger(__name__)

# permeability is confined to [K_MIN, K_MAX] * a * k0
K_MIN_FACTOR = 1e-14
K_MAX_FACTOR = 1e14
_LOG_MIN = math.log(K_MIN_FACTOR)
_LOG_MAX = math.log(K_MAX_FACTOR)


def _as_tensor(value):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(2)
    if arr.shape != (2, 2):
        raise ConfigurationError(f"tensor parameter must be scalar or 2x2, got shape {arr.shape}")
    return arr


def _is_scalar(value):
    return np.asarray(value).ndim == 0


@dataclass(frozen=True)
class PhysicalParams:
    a0: float
    b0: float
    c0: float
    alpha: float
    beta: float
    a: float
    b: float
    k0: object
    Theta: object
    E: float
    nu: float
    allow_assumption_violation: bool = False

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def lam(self):
        return self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))

    @property
    def mu(self):
        return self.E / (2 * (1 + self.nu))

    def k0_tensor(self):
        return _as_tensor(self.k0)

    def theta_tensor(self):
        return _as_tensor(self.Theta)

    def violations(self):
        """All violated admissibility conditions, as messages."""
        errs = []
        if not self.E > 0:
            errs.append(f"Young's modulus E must be positive (E={self.E})")
        if not 0 < self.nu < 0.5:
            errs.append(f"Poisson ratio nu must lie in (0, 0.5) (nu={self.nu})")
        neg = [n for n in ("a0", "b0", "c0", "alpha", "beta") if getattr(self, n) < 0]
        if neg:
            errs.append(f"storage/coupling coefficients must be non-negative: {', '.join(neg)}")
        if not self.c0 - self.b0 > 0:
            errs.append(f"need c0 - b0 > 0 (c0={self.c0}, b0={self.b0})")
        if not self.a0 - self.b0 > 0:
            errs.append(f"need a0 - b0 > 0 (a0={self.a0}, b0={self.b0})")
        for name in ("Theta", "k0"):
            try:
                m = _as_tensor(getattr(self, name))
            except ConfigurationError as exc:
                errs.append(str(exc))
                continue
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(0.5 * (m + m.T)).min() <= 0:
                errs.append(f"{name} must be symmetric positive definite")
        if not self.a > 0:
            errs.append(f"mutation coefficient a must be positive (a={self.a})")
        return errs

    def validate(self):
        errs = self.violations()
        hard = [e for e in errs if not e.startswith("need ") and "non-negative" not in e]
        soft = [e for e in errs if e not in hard]
        if hard or (soft and not self.allow_assumption_violation):
            raise ConfigurationError("; ".join(errs))
        for e in soft:
            log.warning("assumption override in effect: %s", e)
        return self


@dataclass(frozen=True)
class DerivedCoefficients:
    lam: float
    mu: float
    gamma1: float
    gamma2: float
    gamma3: float
    gamma4: float
    gamma5: float
    gamma6: float
    M: float
    change_matrix: np.ndarray
    inverse_matrix: np.ndarray
    closed_form: dict = field(default_factory=dict)

    @property
    def gammas(self):
        return (self.gamma1, self.gamma2, self.gamma3, self.gamma4, self.gamma5, self.gamma6)

    def to_reformulated(self, p, T, q):
        """(p, T, q) -> (varpi, tau, varsigma)."""
        A = self.change_matrix
        varpi = A[0, 0] * p + A[0, 1] * T + A[0, 2] * q
        tau = A[1, 0] * p + A[1, 1] * T + A[1, 2] * q
        varsigma = A[2, 0] * p + A[2, 1] * T + A[2, 2] * q
        return varpi, tau, varsigma

    def to_original(self, tau, varpi, varsigma):
        """(tau, varpi, varsigma) -> (p, T, q) using the gamma coefficients."""
        g1, g2, g3, g4, g5, g6 = self.gammas
        p = g4 * tau + g5 * varpi + g2 * varsigma
        T = g1 * tau + g2 * varpi + g3 * varsigma
        q = -g6 * tau + g4 * varpi + g1 * varsigma
        return p, T, q

    def report(self):
        lines = [f"lambda = {self.lam:.17g}", f"mu = {self.mu:.17g}", f"M = {self.M:.17g}"]
        for i, g in enumerate(self.gammas, start=1):
            cf = self.closed_form.get(f"gamma{i}")
            extra = "" if cf is None else f"   closed form {cf:.17g}   rel.diff {abs(cf - g) / max(abs(g), 1e-300):.3e}"
            lines.append(f"gamma{i} = {g:.17g}{extra}")
        return "\n".join(lines)


def _closed_form_gammas(params, L):
    a0, b0, c0, al, be = params.a0, params.b0, params.c0, params.alpha, params.beta
    M = al * c0 * be**2 + 2 * al**2 * be * b0 + a0 * al**3 + (c0 * a0 * al - b0**2 * al) * L
    if M == 0:
        return M, {}
    return M, {
        "gamma1": (al * be * c0 + al**2 * b0) / M,
        "gamma2": (al * b0 * L - al**2 * be) / M,
        "gamma3": (al**3 + al * c0 * L) / M,
        "gamma4": (a0 * al**2 + al * be * b0) / M,
        "gamma5": (a0 * al * L + al * be**2) / M,
        "gamma6": (al * c0 * a0 - al * b0**2) / M,
    }


def derive_coefficients(params):
    """Lame constants and the gamma coefficients of the inverse variable change.

    The gammas are read off the numerical inverse of the definition matrix;
    the closed-form expressions are kept only as a cross-check.
    """
    lam, mu = params.lam, params.mu
    L = lam + mu
    A = np.array(
        [
            [params.c0, -params.b0, params.alpha],
            [params.alpha, params.beta, -L],
            [-params.b0, params.a0, params.beta],
        ]
    )
    det = np.linalg.det(A)
    scale = np.prod(np.abs(A).max(axis=1))
    if not np.isfinite(det) or abs(det) <= 1e-14 * scale:
        raise ModelError(
            "variable-change matrix is singular for "
            f"a0={params.a0}, b0={params.b0}, c0={params.c0}, alpha={params.alpha}, beta={params.beta}"
        )
    Ainv = np.linalg.inv(A)
    # one Newton correction of the inverse
    Ainv = Ainv + Ainv @ (np.eye(3) - A @ Ainv)
    g5, g4, g2 = Ainv[0]
    g1, g3 = Ainv[1, 1], Ainv[1, 2]
    g6 = -Ainv[2, 1]
    M, closed = _closed_form_gammas(params, L)
    coeffs = DerivedCoefficients(lam, mu, g1, g2, g3, g4, g5, g6, M, A, Ainv, closed)
    if not g5 - g2 > 0 or not g3 - g2 > 0:
        log.warning("gamma5 - gamma2 or gamma3 - gamma2 is not positive:\n%s", coeffs.report())
    return coeffs


# permeability -----------------------------------------------------------


def _clamped_exponent(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite permeability exponent")
    return np.clip(x, _LOG_MIN, _LOG_MAX)


def permeability_factor(tau, params):
    """Scalar factor a * exp(b * tau), clamped to [1e-14, 1e14] * a.

    Multiplying by k0 gives the permeability."""
    return params.a * np.exp(_clamped_exponent(params.b * np.asarray(tau, dtype=float)))


def permeability(tau, params):
    """Permeability a k0 exp(b tau): scalar if k0 is scalar, else (..., 2, 2)."""
    f = permeability_factor(tau, params)
    if _is_scalar(params.k0):
        return f * float(params.k0)
    return f[..., None, None] * params.k0_tensor()


def permeability_original(q, p, T, params):
    """The same law written in the original variables."""
    L = params.lam + params.mu
    e = -params.b * (L * np.asarray(q) - params.alpha * np.asarray(p) - params.beta * np.asarray(T))
    f = params.a * np.exp(_clamped_exponent(e))
    if _is_scalar(params.k0):
        return f * float(params.k0)
    return f[..., None, None] * params.k0_tensor()


def permeability_is_clamped(tau, params):
    e = params.b * np.asarray(tau, dtype=float)
    return (e < _LOG_MIN) | (e > _LOG_MAX)


# exact solutions -----------------------------------------------------------


class ExactSolution:
    """Closed-form u, p, T with the derivatives needed by the strong form.

    ``evaluate(x, y, t)`` returns a namespace with

    u (2,...), du (2,2,...) [component, derivative], d2u (2,2,2,...),
    ut (2,...), dut (2,2,...), and for s in (p, T): s, ds (2,...),
    d2s (2,2,...), st.
    """

    name = "exact"

    def evaluate(self, x, y, t):
        raise NotImplementedError

    def field(self, name):
        return _FieldView(self, name)


class _FieldView:
    def __init__(self, sol, name):
        self.sol = sol
        self.name = name

    def value(self, x, y, t):
        e = self.sol.evaluate(x, y, t)
        if self.name == "q":
            return e.du[0, 0] + e.du[1, 1]
        return getattr(e, self.name)

    def grad(self, x, y, t):
        e = self.sol.evaluate(x, y, t)
        if self.name == "u":
            return e.du
        if self.name == "q":
            return np.stack([e.d2u[0, 0, 0] + e.d2u[1, 1, 0], e.d2u[0, 0, 1] + e.d2u[1, 1, 1]])
        return getattr(e, "d" + self.name)


class Test1Solution(ExactSolution):
    """u = pi e^t (cos(pi x) cos(pi y/2), sin(pi x) sin(pi y/2) / 2),
    p = T = e^t sin(pi x) cos(pi y/2)."""

    name = "test1"

    def evaluate(self, x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        pi = np.pi
        E = np.exp(t)
        cx, sx = np.cos(pi * x), np.sin(pi * x)
        cy, sy = np.cos(pi * y / 2), np.sin(pi * y / 2)
        u = np.stack([pi * E * cx * cy, 0.5 * pi * E * sx * sy])
        du = np.stack(
            [
                np.stack([-(pi**2) * E * sx * cy, -0.5 * pi**2 * E * cx * sy]),
                np.stack([0.5 * pi**2 * E * cx * sy, 0.25 * pi**2 * E * sx * cy]),
            ]
        )
        u1xx = -(pi**3) * E * cx * cy
        u1xy = 0.5 * pi**3 * E * sx * sy
        u1yy = -0.25 * pi**3 * E * cx * cy
        u2xx = -0.5 * pi**3 * E * sx * sy
        u2xy = 0.25 * pi**3 * E * cx * cy
        u2yy = -0.125 * pi**3 * E * sx * sy
        d2u = np.stack(
            [
                np.stack([np.stack([u1xx, u1xy]), np.stack([u1xy, u1yy])]),
                np.stack([np.stack([u2xx, u2xy]), np.stack([u2xy, u2yy])]),
            ]
        )
        s = E * sx * cy
        ds = np.stack([pi * E * cx * cy, -0.5 * pi * E * sx * sy])
        sxy = -0.5 * pi**2 * E * cx * sy
        d2s = np.stack([np.stack([-(pi**2) * s, sxy]), np.stack([sxy, -0.25 * pi**2 * s])])
        return SimpleNamespace(
            u=u, du=du, d2u=d2u, ut=u, dut=du,
            p=s, dp=ds, d2p=d2s, pt=s,
            T=s, dT=ds, d2T=d2s, Tt=s,
        )


class Test2Solution(ExactSolution):
    """u = t P (1, 1), p = T = t P with P = x(1-x)y(1-y)."""

    name = "test2"

    def evaluate(self, x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        P = x * (1 - x) * y * (1 - y)
        Px = (1 - 2 * x) * y * (1 - y)
        Py = x * (1 - x) * (1 - 2 * y)
        Pxx = -2 * y * (1 - y)
        Pyy = -2 * x * (1 - x)
        Pxy = (1 - 2 * x) * (1 - 2 * y)
        dP = np.stack([Px, Py])
        d2P = np.stack([np.stack([Pxx, Pxy]), np.stack([Pxy, Pyy])])
        s = t * P
        ds = t * dP
        d2s = t * d2P
        return SimpleNamespace(
            u=np.stack([s, s]), du=np.stack([ds, ds]), d2u=np.stack([d2s, d2s]),
            ut=np.stack([P, P]), dut=np.stack([dP, dP]),
            p=s, dp=ds, d2p=d2s, pt=P,
            T=s, dT=ds, d2T=d2s, Tt=P,
        )


def strong_form(exact, params, coeffs, x, y, t):
    """Sources f, g, phi and boundary fluxes obtained by applying the
    differential operators of the three-field model to ``exact``.

    Returns a namespace with f (2,...), g, phi, tau, dtau and the callables
    needed for natural boundary data.
    """
    e = exact.evaluate(x, y, t)
    L = coeffs.lam + coeffs.mu
    mu = coeffs.mu
    al, be = params.alpha, params.beta
    q = e.du[0, 0] + e.du[1, 1]
    dq = np.stack([e.d2u[0, 0, 0] + e.d2u[1, 1, 0], e.d2u[0, 0, 1] + e.d2u[1, 1, 1]])
    qt = e.dut[0, 0] + e.dut[1, 1]
    lap_u = e.d2u[:, 0, 0] + e.d2u[:, 1, 1]
    f = -mu * lap_u - L * dq + al * e.dp + be * e.dT

    tau = al * e.p - L * q + be * e.T
    dtau = al * e.dp - L * dq + be * e.dT
    kf = permeability_factor(tau, params)
    clamped = permeability_is_clamped(tau, params)
    K0 = params.k0_tensor()
    Th = params.theta_tensor()
    # div(k grad p) = kf (b grad(tau) . K0 grad p + K0 : hess p), grad kf = 0 where clamped
    K0dp = np.einsum("ij,j...->i...", K0, e.dp)
    div_k_dp = kf * (np.where(clamped, 0.0, params.b * np.einsum("i...,i...->...", dtau, K0dp))
                     + np.einsum("ij,ij...->...", K0, e.d2p))
    g = params.c0 * e.pt - params.b0 * e.Tt + al * qt - div_k_dp
    phi = params.a0 * e.Tt - params.b0 * e.pt + be * qt - np.einsum("ij,ij...->...", Th, e.d2T)
    return SimpleNamespace(f=f, g=g, phi=phi, tau=tau, dtau=dtau, q=q, kf=kf, fields=e)


# boundary conditions and cases -----------------------------------------------


@dataclass
class BoundaryConditions:
    """Per-field boundary data.

    ``dirichlet`` maps 'u1', 'u2', 'p', 'T' to {segment tag: f(x, y, t)}.
    ``traction(x, y, t, normal, **trace)`` returns (2, n) values and applies
    on every boundary edge; constrained components are overridden by the
    Dirichlet data.  ``traction_needs`` names the fields whose boundary trace
    the traction requires.  ``flux_p``/``flux_T(x, y, t, normal)`` give the
    normal fluxes on segments without p/T Dirichlet data.
    """

    dirichlet: dict = field(default_factory=dict)
    traction: Optional[Callable] = None
    traction_needs: tuple = ()
    flux_p: Optional[Callable] = None
    flux_T: Optional[Callable] = None

    def tags(self, name):
        return tuple(sorted(self.dirichlet.get(name, {})))

    def neumann_tags(self, name):
        return tuple(t for t in (1, 2, 3, 4) if t not in self.dirichlet.get(name, {}))


@dataclass
class Case:
    name: str
    params: PhysicalParams
    bcs: BoundaryConditions
    f: Callable
    g: Callable
    phi: Callable
    u0: Callable
    p0: Callable
    T0: Callable
    exact: Optional[ExactSolution] = None
    t_f: float = 1.0
    relative_errors: bool = True
    notes: str = ""

    @property
    def coeffs(self):
        return derive_coefficients(self.params)

    def q0(self):
        if self.exact is None:
            return None
        return lambda x, y: self.exact.field("q").value(x, y, 0.0)


TEST1_PARAMS = PhysicalParams(
    a0=2e-1, b0=1e-1, c0=2e-1, alpha=0.01, beta=0.01, a=1.0, b=1.0, k0=1e-5, Theta=1e-5, E=2e4, nu=0.4
)
TEST2_PARAMS = PhysicalParams(
    a0=2e5, b0=1e5, c0=2e5, alpha=0.01, beta=0.01, a=1.0, b=1.0, k0=0.1, Theta=0.1, E=2e7, nu=0.4
)
TEST3_PRESSURE_PARAMS = PhysicalParams(
    a0=1e-1, b0=0.0, c0=1e-10, alpha=1.0, beta=1.0, a=1.0, b=1.0, k0=0.1, Theta=1e-8, E=2.8e5, nu=0.42
)
TEST3_TEMPERATURE_PARAMS = TEST3_PRESSURE_PARAMS.replace(a0=1e-10, c0=1e-1)

PARAMETER_SETS = {
    "test1": TEST1_PARAMS,
    "test2": TEST2_PARAMS,
    "test3-pressure": TEST3_PRESSURE_PARAMS,
    "test3-temperature": TEST3_TEMPERATURE_PARAMS,
}


def _manufactured(name, exact, params, u1_tags, u2_tags, pT_dirichlet=True):
    coeffs = derive_coefficients(params)
    mu = coeffs.mu

    def f(x, y, t):
        return strong_form(exact, params, coeffs, x, y, t).f

    def g(x, y, t):
        return strong_form(exact, params, coeffs, x, y, t).g

    def phi(x, y, t):
        return strong_form(exact, params, coeffs, x, y, t).phi

    def traction(x, y, t, normal):
        s = strong_form(exact, params, coeffs, x, y, t)
        grad_n = np.einsum("ij...,j...->i...", s.fields.du, normal)
        return mu * grad_n - s.tau * normal

    def flux_p(x, y, t, normal):
        s = strong_form(exact, params, coeffs, x, y, t)
        K = permeability(s.tau, params)
        if np.ndim(K) == np.ndim(s.tau):
            return K * np.einsum("i...,i...->...", s.fields.dp, normal)
        return np.einsum("...ij,j...,i...->...", K, s.fields.dp, normal)

    def flux_T(x, y, t, normal):
        e = exact.evaluate(x, y, t)
        Th = params.theta_tensor()
        return np.einsum("ij,j...,i...->...", Th, e.dT, normal)

    def comp(i):
        return lambda x, y, t: exact.evaluate(x, y, t).u[i]

    def scalar(nm):
        return lambda x, y, t: getattr(exact.evaluate(x, y, t), nm)

    dirichlet = {"u1": {tag: comp(0) for tag in u1_tags}, "u2": {tag: comp(1) for tag in u2_tags}}
    if pT_dirichlet:
        dirichlet["p"] = {tag: scalar("p") for tag in (1, 2, 3, 4)}
        dirichlet["T"] = {tag: scalar("T") for tag in (1, 2, 3, 4)}
    bcs = BoundaryConditions(dirichlet=dirichlet, traction=traction, flux_p=flux_p, flux_T=flux_T)
    return Case(
        name=name,
        params=params,
        bcs=bcs,
        f=f,
        g=g,
        phi=phi,
        u0=lambda x, y: exact.evaluate(x, y, 0.0).u,
        p0=lambda x, y: exact.evaluate(x, y, 0.0).p,
        T0=lambda x, y: exact.evaluate(x, y, 0.0).T,
        exact=exact,
    )


def pulse(segment, lo=0.2, hi=0.8, amplitude=1.0):
    """amplitude * sin(t) on the part of ``segment`` whose along-segment
    coordinate (x on horizontal sides, y on vertical sides) lies in [lo, hi)."""
    horizontal = segment in (1, 3)

    def data(x, y, t):
        s = np.asarray(x if horizontal else y, dtype=float)
        return np.where((s >= lo) & (s < hi), amplitude * np.sin(t), 0.0)

    return data


def _zero(x, y, t=None):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_vec(x, y, t=None):
    return np.zeros((2,) + np.shape(x))


def barry_mercer_case(params=TEST3_PRESSURE_PARAMS, pulse_segment=4, amplitude=1.0, name="barry_mercer"):
    """Pulsed p/T on part of one side, homogeneous sources and initial data,
    roller-type displacement conditions and traction (0, alpha p + beta T)."""
    al, be = params.alpha, params.beta

    def traction(x, y, t, normal, p, T):
        return np.stack([np.zeros_like(p), al * p + be * T])

    data = pulse(pulse_segment, amplitude=amplitude)
    p_bc = {tag: (data if tag == pulse_segment else _zero) for tag in (1, 2, 3, 4)}
    T_bc = dict(p_bc)
    bcs = BoundaryConditions(
        dirichlet={"u1": {1: _zero, 3: _zero}, "u2": {2: _zero, 4: _zero}, "p": p_bc, "T": T_bc},
        traction=traction,
        traction_needs=("p", "T"),
    )
    return Case(
        name=name,
        params=params,
        bcs=bcs,
        f=_zero_vec,
        g=_zero,
        phi=_zero,
        u0=lambda x, y: _zero_vec(x, y),
        p0=lambda x, y: _zero(x, y),
        T0=lambda x, y: _zero(x, y),
        exact=None,
        t_f=1.0,
        relative_errors=False,
    )


def build_case(name, params=None, **options):
    """Named benchmark configurations.

    ``test1``/``test2`` are manufactured problems (u1 fixed on the vertical
    sides, u2 on the horizontal sides, p and T fixed everywhere; with
    ``neumann=True`` p and T get flux data instead).  ``barry_mercer`` pulses
    p and T on the left side, ``b_sweep`` on the top side.
    """
    if name == "test1":
        return _manufactured(name, Test1Solution(), params or TEST1_PARAMS, (2, 4), (1, 3),
                             pT_dirichlet=not options.get("neumann", False))
    if name == "test2":
        case = _manufactured(name, Test2Solution(), params or TEST2_PARAMS, (2, 4), (1, 3),
                             pT_dirichlet=not options.get("neumann", False))
        return case
    if name == "barry_mercer":
        variant = options.get("variant", "pressure")
        default = TEST3_PRESSURE_PARAMS if variant == "pressure" else TEST3_TEMPERATURE_PARAMS
        return barry_mercer_case(params or default, pulse_segment=4,
                                 amplitude=options.get("amplitude", 1.0))
    if name == "b_sweep":
        return barry_mercer_case(params or TEST3_PRESSURE_PARAMS, pulse_segment=3,
                                 amplitude=options.get("amplitude", 1.0), name="b_sweep")
    raise ConfigurationError(f"unknown case {name!r}; expected test1, test2, barry_mercer or b_sweep")
