"""Time integration of the coupled fluid/curve system.

Four schemes share one backward-Euler fluid step with the multiplier
coupling ``L_f u = L_s ddot``:

``monolithic``
    fluid, solid displacement and multiplier solved together.
``monolithic-linearized``
    same, with the coupling matrix frozen at the reference curve.
``alg2``
    the solid only contributes inertia to the implicit solve; elasticity is
    explicit through an extrapolated displacement, and ``d`` is advanced with
    the computed velocity.
``alg3``
    the same fluid-with-inertia solve yields a fractional velocity
    ``ddot_half``, corrected by a separate implicit elastic solve.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import FluidParams, SolidModel
from .errors import InvalidArgumentError, OutOfDomainError
from .linalg import Factorization, compose_system, generalized_eig_max

SCHEMES = ("monolithic", "monolithic-linearized", "alg2", "alg3")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "monolithic"
    r: int = 1
    tau: float = 0.05
    t_final: float = 1.0
    fluid: FluidParams = field(default_factory=FluidParams)
    solid: SolidModel = field(default_factory=SolidModel)
    gamma: float = 0.05
    frozen: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"unknown scheme {self.scheme!r}")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be positive")
        if self.r not in (0, 1, 2):
            raise InvalidArgumentError("extrapolation order must be 0, 1 or 2")
        if self.scheme == "alg2" and self.r == 0:
            raise InvalidArgumentError("alg2 needs extrapolation order 1 or 2")
        if not self.gamma > 0:
            raise InvalidArgumentError("gamma must be positive")

    @property
    def interface_frozen(self):
        return self.frozen or self.scheme == "monolithic-linearized"

    @property
    def n_steps(self):
        return int(round(self.t_final / self.tau))


@dataclass(frozen=True, eq=False)
class CoupledState:
    u: np.ndarray
    p: np.ndarray
    d: np.ndarray
    ddot: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    d_prev: np.ndarray
    ddot_half: np.ndarray = None
    t: float = 0.0
    n: int = 0
    kinematic_residual: float = 0.0
    frac_residual: float = None


def to_nodes(vec):
    """Component-blocked solid vector (2m,) -> node array (m, 2)."""
    m = len(vec) // 2
    return np.column_stack([vec[:m], vec[m:]])


def to_blocked(nodes):
    nodes = np.asarray(nodes, dtype=float)
    return np.concatenate([nodes[:, 0], nodes[:, 1]])


def extrapolate(r, d_prev, ddot_prev, tau):
    """Explicit prediction of the displacement used in the elastic force."""
    if r == 0:
        return np.zeros_like(d_prev)
    if r == 1:
        return np.array(d_prev, dtype=float)
    if r == 2:
        return d_prev + tau * ddot_prev
    raise InvalidArgumentError("extrapolation order must be 0, 1 or 2")


def init_state(d0, d1, u0, phi0, tau, n_pressure=None):
    """Initial state; the history value ``d0 - tau d1`` makes ``(d0 - d_prev)/tau = d1``."""
    d0 = np.asarray(d0, dtype=float)
    d1 = np.asarray(d1, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    phi0 = np.asarray(phi0, dtype=float)
    if d0.shape != d1.shape or d0.shape != (2 * len(phi0),):
        raise InvalidArgumentError("initial solid fields do not match the curve mesh")
    if n_pressure is None:
        n_pressure = len(u0) // 2
    return CoupledState(u=u0.copy(), p=np.zeros(n_pressure), d=d0.copy(), ddot=d1.copy(),
                        lam=np.zeros_like(d0), phi=phi0 + to_nodes(d0),
                        d_prev=d0 - tau * d1, ddot_half=None, t=0.0, n=0)


def _check_inside(phi):
    if np.any(phi <= 0.0) or np.any(phi >= 1.0):
        k = int(np.argmax(np.any((phi <= 0.0) | (phi >= 1.0), axis=1)))
        raise OutOfDomainError(f"curve node {k} left the fluid domain at {phi[k].tolist()}")


class Stepper:
    """Advances a state by one step; caches matrices that do not change."""

    def __init__(self, ops, config, body_force=None, solid_load=None):
        self.ops = ops
        self.config = config
        self.phi0 = ops.smesh.nodes
        self.body_force = body_force
        # constant force on the curve (assembled nodal vector), e.g. a prestress
        self.solid_load = solid_load
        tau = config.tau
        fl, so = config.fluid, config.solid
        self.bcs = np.concatenate([ops.fmesh.boundary, ops.fmesh.boundary])
        self.A_f = (fl.rho_f / tau * ops.M_f + 2.0 * fl.mu * ops.K_f).tocsr()
        inertia = so.inertia
        if config.scheme in ("monolithic", "monolithic-linearized"):
            self.A_s = (inertia / tau ** 2 * ops.M_s + ops.K_s).tocsr()
            self.C_ms = (-1.0 / tau) * ops.L_s
        else:
            self.A_s = (inertia / tau * ops.M_s).tocsr()
            self.C_ms = -ops.L_s
        self.C_sm = -ops.L_s
        self._frozen_system = None
        self._correction = None

    def _system(self, phi):
        if self.config.interface_frozen and self._frozen_system is not None:
            return self._frozen_system
        L_f = self.ops.coupling_fluid(self.phi0 if self.config.interface_frozen else phi)
        system = compose_system(dict(A_f=self.A_f, B=self.ops.B, S=self.ops.S,
                                     p_weights=self.ops.p_weights, A_s=self.A_s, L_f=L_f,
                                     C_sm=self.C_sm, C_ms=self.C_ms), self.bcs)
        system.L_f = L_f
        if self.config.interface_frozen:
            self._frozen_system = system
        return system

    def _fluid_rhs(self, state):
        f = self.config.fluid.rho_f / self.config.tau * (self.ops.M_f @ state.u)
        if self.body_force is not None:
            f = f + self.body_force
        return f

    def step(self, state):
        scheme = self.config.scheme
        if scheme in ("monolithic", "monolithic-linearized"):
            return self._step_monolithic(state)
        if scheme == "alg2":
            return self._step_alg2(state)
        return self._step_alg3(state)

    def _finish(self, state, system, sol, d_new, ddot_new, **extra):
        phi = self.phi0 + to_nodes(d_new)
        _check_inside(phi)
        return CoupledState(u=sol["velocity"], p=sol["pressure"], d=d_new, ddot=ddot_new,
                            lam=sol["multiplier"], phi=phi, d_prev=state.d,
                            t=state.t + self.config.tau, n=state.n + 1, **extra)

    def _step_monolithic(self, state):
        ops, tau = self.ops, self.config.tau
        inertia = self.config.solid.inertia
        system = self._system(state.phi)
        g = inertia / tau ** 2 * (ops.M_s @ (2.0 * state.d - state.d_prev))
        if self.solid_load is not None:
            g = g + self.solid_load
        m = -(1.0 / tau) * (ops.L_s @ state.d)
        b = system.rhs(velocity=self._fluid_rhs(state), solid=g, multiplier=m)
        sol = system.split(system.factorization.solve(b))
        d_new = sol["solid"]
        ddot_new = (d_new - state.d) / tau
        kin = system.L_f @ sol["velocity"] - (ops.L_s @ (d_new - state.d)) / tau
        return self._finish(state, system, sol, d_new, ddot_new,
                            kinematic_residual=float(np.abs(kin).max()))

    def _fluid_inertia_solve(self, state):
        """Fluid solve with implicit solid inertia; returns the solution and
        the extrapolated displacement."""
        ops, cfg = self.ops, self.config
        system = self._system(state.phi)
        d_star = extrapolate(cfg.r, state.d, state.ddot, cfg.tau)
        g = cfg.solid.inertia / cfg.tau * (ops.M_s @ state.ddot) - ops.K_s @ d_star
        if self.solid_load is not None:
            g = g + self.solid_load
        b = system.rhs(velocity=self._fluid_rhs(state), solid=g)
        sol = system.split(system.factorization.solve(b))
        kin = system.L_f @ sol["velocity"] - ops.L_s @ sol["solid"]
        return system, sol, d_star, float(np.abs(kin).max())

    def _step_alg2(self, state):
        system, sol, _, kin = self._fluid_inertia_solve(state)
        ddot_new = sol["solid"]
        d_new = state.d + self.config.tau * ddot_new
        return self._finish(state, system, sol, d_new, ddot_new, kinematic_residual=kin)

    def _step_alg3(self, state):
        ops, tau = self.ops, self.config.tau
        inertia = self.config.solid.inertia
        system, sol, d_star, kin = self._fluid_inertia_solve(state)
        ddot_half = sol["solid"]
        if self._correction is None:
            self._correction = Factorization((inertia / tau * ops.M_s + tau * ops.K_s).tocsc())
        rhs = inertia / tau * (ops.M_s @ ddot_half) + ops.K_s @ (d_star - state.d)
        ddot_new = self._correction.solve(rhs)
        d_new = state.d + tau * ddot_new
        frac = ops.M_s @ (ddot_half - ddot_new) - (tau / inertia) * (ops.K_s @ (d_new - d_star))
        return self._finish(state, system, sol, d_new, ddot_new, ddot_half=ddot_half,
                            kinematic_residual=kin, frac_residual=float(np.abs(frac).max()))


def step_monolithic(state, ops, config):
    if config.scheme not in ("monolithic", "monolithic-linearized"):
        raise InvalidArgumentError("config does not select a monolithic scheme")
    return Stepper(ops, config).step(state)


def step_alg2(state, ops, config):
    return Stepper(ops, replace(config, scheme="alg2")).step(state)


def step_alg3(state, ops, config):
    return Stepper(ops, replace(config, scheme="alg3")).step(state)


@dataclass(frozen=True)
class CflReport:
    lambda_max: float
    alg2_margin: float
    alg2_ok: bool
    alg3_r2_margin: float
    alg3_r2_ok: bool
    scheme_ok: bool
    unconditional: bool


def cfl_check(config, M_s, K_s):
    """Time-step restrictions of the partitioned schemes.

    Uses ``lambda_max`` of ``K_s x = lambda M_s x``; the explicit-elastic
    scheme needs ``tau^2 lambda_max < rho_s eps`` and the corrected scheme
    with second-order extrapolation ``2 tau^6 lambda_max^3 < (rho_s eps)^3``.
    """
    lam = generalized_eig_max(K_s, M_s)
    inertia = config.solid.inertia
    tau = config.tau
    m2 = tau ** 2 * lam / inertia
    m3 = 2.0 * tau ** 6 * (lam / inertia) ** 3
    ok2, ok3 = m2 < 1.0, m3 < 1.0
    if config.scheme == "alg2":
        unconditional, ok = False, ok2
    elif config.scheme == "alg3" and config.r == 2:
        unconditional, ok = False, ok3
    else:
        unconditional, ok = True, True
    return CflReport(lambda_max=lam, alg2_margin=m2, alg2_ok=ok2, alg3_r2_margin=m3,
                     alg3_r2_ok=ok3, scheme_ok=ok, unconditional=unconditional)


def zero_state(ops, tau):
    nv = ops.fmesh.n_vertices
    ns = 2 * ops.smesh.n_nodes
    return init_state(np.zeros(ns), np.zeros(ns), np.zeros(2 * nv), ops.smesh.nodes, tau)


__all__ = ["SchemeConfig", "CoupledState", "Stepper", "CflReport", "extrapolate", "init_state",
           "step_monolithic", "step_alg2", "step_alg3", "cfl_check", "to_nodes", "to_blocked",
           "zero_state"]
