"""Benchmark scenarios and experiment drivers.

Both coupled scenarios have a stress-free circle of radius ``R`` centred in
the unit square and an initial shape: the ellipse with semi-axes ``(a, b)``
sampled at the same node angles.  Velocities start at rest.

* ``EllipseRelax``: ``a != b``.  The mesh is laid on the stress-free circle
  and ``d0`` is the offset to the ellipse; the curve relaxes toward a circle.
* ``SteadyCircle``: ``a = b > R``.  As above, the mesh sits on the
  stress-free circle and ``d0`` stretches it onto the larger circle.  The
  elastic pull is balanced by a pressure jump, so the shape stays put up to
  discretization effects.  With ``prestressed=True`` the mesh is laid on the
  initial circle instead, ``d0 = 0``, and the stretch enters as the constant
  load ``-K_s d_pre``.

Ladder points of a study run concurrently (worker count capped by the
``IMMERSED_FSI_THREADS`` environment variable); results are collected in
ladder order, so output does not depend on the worker count.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import (FluidParams, SolidModel, _element_geometry, assemble_fluid_blocks,
                       assemble_operators, pressure_weights)
from .diagnostics import (EnergyTracker, alg3_r1_bound, convergence_rate, error_vs_reference)
from .errors import FsiError, InstabilityError, InvalidArgumentError
from .linalg import compose_system
from .mesh import build_ellipse, build_unit_square, ellipse_points
from .schemes import SchemeConfig, Stepper, cfl_check, init_state, to_blocked

BLOWUP = 1e6
# allowance for rounding when comparing energies that should not increase
ENERGY_ROUNDOFF = 1e-13


def worker_count():
    cap = os.environ.get("IMMERSED_FSI_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def _parallel_map(fn, items, workers=None):
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class Scenario:
    name: str = "EllipseRelax"
    center: tuple = (0.5, 0.5)
    R: float = 0.2
    a: float = 0.25
    b: float = 0.16
    fluid: FluidParams = field(default_factory=FluidParams)
    solid: SolidModel = field(default_factory=SolidModel)
    prestressed: bool = False

    def __post_init__(self):
        if self.name not in ("EllipseRelax", "SteadyCircle"):
            raise InvalidArgumentError(f"unknown scenario {self.name!r}")
        if self.name == "SteadyCircle" and self.a != self.b:
            raise InvalidArgumentError("SteadyCircle needs a circular initial shape (a = b)")

    def segments(self, n):
        """Curve segment count matched to fluid resolution ``1/n``: the
        largest power of two not exceeding ``circumference * n`` (at least 8)."""
        target = 2.0 * math.pi * self.R * n
        return max(8, 2 ** int(math.floor(math.log2(target))))

    def build(self, n):
        """Meshes and initial data at resolution ``1/n``."""
        fmesh = build_unit_square(n)
        m = self.segments(n)
        if self.prestressed:
            smesh = build_ellipse(self.center, self.a, self.b, m)
            rest = ellipse_points(self.center, self.R, self.R, smesh.params)
            d_pre = to_blocked(smesh.nodes - rest)
            d0 = np.zeros(2 * m)
        else:
            smesh = build_ellipse(self.center, self.R, self.R, m)
            shape = ellipse_points(self.center, self.a, self.b, smesh.params)
            if np.any(shape <= 0.0) or np.any(shape >= 1.0):
                raise InvalidArgumentError("initial shape leaves the unit square")
            d0 = to_blocked(shape - smesh.nodes)
            d_pre = None
        return BuiltScenario(fmesh=fmesh, smesh=smesh, d0=d0, d1=np.zeros_like(d0),
                             u0=np.zeros(2 * fmesh.n_vertices), d_pre=d_pre)


@dataclass(frozen=True, eq=False)
class BuiltScenario:
    fmesh: object
    smesh: object
    d0: np.ndarray
    d1: np.ndarray
    u0: np.ndarray
    # displacement from the stress-free shape to the mesh shape, if prestressed
    d_pre: np.ndarray = None


ELLIPSE_RELAX = Scenario()
STEADY_CIRCLE = Scenario(name="SteadyCircle", a=0.25, b=0.25)


def scenario_by_name(name, **overrides):
    base = {"EllipseRelax": ELLIPSE_RELAX, "SteadyCircle": STEADY_CIRCLE}.get(name)
    if base is None:
        raise InvalidArgumentError(f"unknown scenario {name!r}")
    return replace(base, **overrides)


@dataclass
class RunResult:
    state: object
    records: list
    ops: object
    meshes: tuple
    config: object
    status: str = "ok"
    message: str = ""
    bound: float = None

    @property
    def energies(self):
        return np.array([r.E for r in self.records])


def run_scenario(scenario, config, n, n_steps=None, sink=None, snapshot_every=None,
                 raise_on_failure=True):
    """Step a scenario at fluid resolution ``1/n``.

    ``sink(kind, payload)`` receives ``("record", EnergyRecord)`` after every
    step and ``("snapshot", state)`` every ``snapshot_every`` steps.  A run
    whose energy exceeds ``1e6 E0`` is aborted.  With ``raise_on_failure``
    false, errors end the run and are reported in ``status``.
    """
    built = scenario.build(n)
    fmesh, smesh = built.fmesh, built.smesh
    config = replace(config, fluid=scenario.fluid, solid=scenario.solid)
    ops = assemble_operators(fmesh, smesh, config.fluid, config.solid, config.gamma)
    load = None if built.d_pre is None else -(ops.K_s @ built.d_pre)
    state = init_state(built.d0, built.d1, built.u0, smesh.nodes, config.tau)
    tracker = EnergyTracker(state, ops, config, d_pre=built.d_pre)
    result = RunResult(state=state, records=tracker.records, ops=ops, meshes=(fmesh, smesh),
                       config=config, bound=alg3_r1_bound(state, ops, config))
    if sink is not None:
        sink("record", tracker.records[0])
        if snapshot_every:
            sink("snapshot", state)
    steps = config.n_steps if n_steps is None else n_steps
    stepper = Stepper(ops, config, solid_load=load)
    try:
        for _ in range(steps):
            state = stepper.step(state)
            rec = tracker.push(state)
            result.state = state
            if sink is not None:
                sink("record", rec)
                if snapshot_every and state.n % snapshot_every == 0:
                    sink("snapshot", state)
            if rec.E > BLOWUP * max(tracker.E0, np.finfo(float).tiny):
                raise InstabilityError(f"energy {rec.E:.3e} exceeds {BLOWUP:g} x E0 at step {state.n}")
    except FsiError as exc:
        result.status = type(exc).__name__
        result.message = str(exc)
        if raise_on_failure:
            raise
    return result


def energy_within_bound(result, scheme, r):
    """Does a run respect the energy statement proved for its scheme?

    Monolithic runs must not gain energy between steps; the corrected scheme
    must stay below ``E0`` (r = 0) or its explicit bound (r = 1).  Schemes
    without an unconditional statement count as bounded when they finish.
    """
    if result.status != "ok":
        return False
    E = result.energies
    slack = ENERGY_ROUNDOFF * E[0]
    if scheme in ("monolithic", "monolithic-linearized"):
        return bool(np.all(np.diff(E) <= slack))
    if scheme == "alg3" and r == 0:
        return bool(np.all(E <= E[0] + slack))
    if scheme == "alg3" and r == 1:
        return bool(np.all(E <= result.bound + slack))
    return True


@dataclass
class SweepRow:
    tau: float
    stable: bool
    status: str
    max_energy_ratio: float
    cfl_ok: bool
    steps_done: int
    result: object = field(default=None, repr=False)


def stability_sweep(scenario, scheme, r, taus, n=32, n_steps=100, workers=None, gamma=0.05):
    """Run each time step of the ladder at fixed resolution; failures are
    recorded and the sweep continues."""
    def one(tau):
        cfg = replace(_scheme_config(scheme, r, tau, gamma), t_final=tau * n_steps)
        res = run_scenario(scenario, cfg, n, n_steps=n_steps, raise_on_failure=False)
        cfl = cfl_check(res.config, res.ops.M_s, res.ops.K_s)
        E = res.energies
        return SweepRow(tau=tau, stable=energy_within_bound(res, scheme, r), status=res.status,
                        max_energy_ratio=float(E.max() / E[0]), cfl_ok=cfl.scheme_ok,
                        steps_done=res.records[-1].n, result=res)
    return _parallel_map(one, list(taus), workers)


def _scheme_config(scheme, r, tau, gamma=0.05, t_final=None):
    if scheme == "alg2" and r == 0:
        raise InvalidArgumentError("alg2 needs r >= 1")
    return SchemeConfig(scheme=scheme, r=r, tau=tau, t_final=tau if t_final is None else t_final,
                        gamma=gamma)


@dataclass(frozen=True)
class StudyPlan:
    """Ladders for a convergence study.

    TimeConv uses ``taus`` at resolution ``ref_n``; SpaceConv uses ``ns`` at
    time step ``taus[0]``; GlobalConv pairs ``ns[j]`` with ``taus[j]``.  The
    reference run uses ``ref_n``, ``ref_tau`` and ``ref_scheme``.
    """
    kind: str
    taus: tuple
    ns: tuple
    ref_n: int
    ref_tau: float
    t_eval: float
    ref_scheme: str = "monolithic"

    def __post_init__(self):
        if self.kind not in ("TimeConv", "SpaceConv", "GlobalConv"):
            raise InvalidArgumentError(f"unknown study kind {self.kind!r}")
        for ladder in (self.taus, self.ns):
            for x, y in zip(ladder, ladder[1:]):
                if not math.isclose(x / y, 2.0) and not math.isclose(y / x, 2.0):
                    raise InvalidArgumentError("ladders must halve or double at each entry")
        for tau in self.points_taus() + [self.ref_tau]:
            _steps(self.t_eval, tau)

    def points(self):
        if self.kind == "TimeConv":
            return [(self.ref_n, tau) for tau in self.taus]
        if self.kind == "SpaceConv":
            return [(n, self.taus[0]) for n in self.ns]
        if len(self.ns) != len(self.taus):
            raise InvalidArgumentError("GlobalConv ladders must have equal length")
        return list(zip(self.ns, self.taus))

    def points_taus(self):
        return [tau for _, tau in self.points()]

    def param(self, n, tau):
        return tau if self.kind == "TimeConv" else 1.0 / n


def _steps(t, tau):
    k = round(t / tau)
    if k < 0 or not math.isclose(k * tau, t, rel_tol=1e-9, abs_tol=1e-15):
        raise InvalidArgumentError(f"t = {t} is not a multiple of tau = {tau}")
    return int(k)


TIME_CONV = StudyPlan(kind="TimeConv", taus=(0.064, 0.032, 0.016, 0.008), ns=(64,), ref_n=64,
                      ref_tau=0.001, t_eval=0.064)
SPACE_CONV = StudyPlan(kind="SpaceConv", taus=(5e-4,), ns=(8, 16, 32, 64), ref_n=128,
                       ref_tau=5e-4, t_eval=1e-3)
GLOBAL_CONV = StudyPlan(kind="GlobalConv", taus=(0.064, 0.032, 0.016, 0.008), ns=(8, 16, 32, 64),
                        ref_n=128, ref_tau=0.001, t_eval=0.064)

STUDY_COLUMNS = ["param", "err_u", "err_d", "err_ddot", "total", "rate",
                 "err_p", "rate_u", "rate_d", "rate_ddot", "rate_p"]


@dataclass
class StudyResult:
    plan: StudyPlan
    reports: list
    params: list

    def rows(self):
        out = []
        prev = None
        for param, rep in zip(self.params, self.reports):
            vals = [rep.err_u_L2, rep.err_d_energy, rep.err_ddot_L2, rep.total, rep.err_p_L2]
            if prev is None:
                rates = [None] * 5
            else:
                rates = [_safe_rate(a, b) for a, b in zip(prev, vals)]
            out.append([param, vals[0], vals[1], vals[2], vals[3], rates[3], vals[4],
                        rates[0], rates[1], rates[2], rates[4]])
            prev = vals
        return out

    def rates(self, key):
        idx = STUDY_COLUMNS.index(key)
        return [row[idx] for row in self.rows()[1:]]


def _safe_rate(a, b):
    try:
        return convergence_rate(a, b)
    except InvalidArgumentError:
        return float("nan")


def convergence_study(plan, scenario, scheme_config, workers=None):
    """Errors of each ladder point against a reference run at ``plan.t_eval``."""
    ref_cfg = replace(scheme_config, scheme=plan.ref_scheme, tau=plan.ref_tau, t_final=plan.t_eval)
    ref = run_scenario(scenario, ref_cfg, plan.ref_n, n_steps=_steps(plan.t_eval, plan.ref_tau))
    points = plan.points()

    def one(point):
        n, tau = point
        cfg = replace(scheme_config, tau=tau, t_final=plan.t_eval)
        res = run_scenario(scenario, cfg, n, n_steps=_steps(plan.t_eval, tau))
        return error_vs_reference(res.state, res.meshes, ref.state, ref.meshes, ref.ops)

    reports = _parallel_map(one, points, workers)
    return StudyResult(plan=plan, reports=reports, params=[plan.param(n, t) for n, t in points])


# ---------------------------------------------------------------------------
# steady Stokes with a manufactured solution

# degree-5 rule on the reference triangle (barycentric points, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_W0, _W1, _W2 = 0.225, 0.132394152788506, 0.125939180544827
DEG5_POINTS = np.array([[1 / 3, 1 / 3, 1 / 3],
                        [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
                        [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2]])
DEG5_WEIGHTS = np.array([_W0] + [_W1] * 3 + [_W2] * 3)


@dataclass(frozen=True)
class Manufactured:
    """Exact velocity, its gradient, pressure and the matching body force."""
    velocity: object
    gradient: object
    pressure: object
    force: object


def smooth_solution(mu):
    """``u = (2 cos(x + 2y), -cos(x + 2y))`` (divergence free, nonzero on the
    boundary) and ``p = cos(pi x) cos(pi y)``; ``-mu lap u = 5 mu u``."""
    def velocity(x, y):
        c = np.cos(x + 2 * y)
        return np.stack([2 * c, -c], axis=-1)

    def gradient(x, y):
        s = np.sin(x + 2 * y)
        # rows: component, columns: derivative direction
        return np.stack([np.stack([-2 * s, -4 * s], -1), np.stack([s, 2 * s], -1)], axis=-2)

    def pressure(x, y):
        return np.cos(np.pi * x) * np.cos(np.pi * y)

    def force(x, y):
        gp = np.stack([-np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
                       -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)], axis=-1)
        return 5 * mu * velocity(x, y) + gp

    return Manufactured(velocity, gradient, pressure, force)


def resting_solution(value=1.0):
    """Fluid at rest under a constant pressure."""
    zero2 = lambda x, y: np.zeros(np.shape(x) + (2,))
    return Manufactured(velocity=zero2,
                        gradient=lambda x, y: np.zeros(np.shape(x) + (2, 2)),
                        pressure=lambda x, y: np.full(np.shape(x), float(value)),
                        force=zero2)


def _quadrature_points(mesh):
    p = mesh.vertices[mesh.triangles]
    x = np.einsum("qk,tkd->tqd", DEG5_POINTS, p)
    area = 0.5 * np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    return x, area[:, None] * DEG5_WEIGHTS[None, :]


@dataclass
class StokesResult:
    n: int
    u: np.ndarray
    p: np.ndarray
    err_u_L2: float
    err_u_H1: float
    err_p_L2: float
    mean_p: float


def solve_stokes(n, solution, mu=0.1, gamma=0.05):
    """Stabilized P1/P1 Stokes on the ``n x n`` mesh with Dirichlet data from
    ``solution``, returning errors against it."""
    mesh = build_unit_square(n)
    nv = mesh.n_vertices
    _, K_f, B, S = assemble_fluid_blocks(mesh, FluidParams(rho_f=1.0, mu=mu), gamma)
    w = pressure_weights(mesh)
    bcs = np.concatenate([mesh.boundary, mesh.boundary])
    system = compose_system(dict(A_f=2.0 * mu * K_f, B=B, S=S, p_weights=w), bcs)

    xq, wq = _quadrature_points(mesh)
    fq = solution.force(xq[..., 0], xq[..., 1])
    load = np.zeros(2 * nv)
    for c in range(2):
        # P1 hats at the quadrature points are the barycentric coordinates
        vals = np.einsum("tq,tq,qk->tk", wq, fq[..., c], DEG5_POINTS)
        np.add.at(load, mesh.triangles.ravel() + c * nv, vals.ravel())
    exact_nodes = solution.velocity(mesh.vertices[:, 0], mesh.vertices[:, 1])
    u_bc = np.concatenate([exact_nodes[:, 0], exact_nodes[:, 1]])

    sol = system.split(system.factorization.solve(system.rhs(velocity=load, u_fixed=u_bc)),
                       u_fixed=u_bc)
    u, p = sol["velocity"], sol["pressure"]

    tri = mesh.triangles
    uq = np.stack([np.einsum("qk,tk->tq", DEG5_POINTS, u[c * nv:(c + 1) * nv][tri])
                   for c in range(2)], axis=-1)
    pq = np.einsum("qk,tk->tq", DEG5_POINTS, p[tri])
    _, grads, _ = _element_geometry(mesh)
    # grad of component c: sum_k u_c[k] grad_k, constant per element
    gu = np.stack([np.einsum("tk,tkd->td", u[c * nv:(c + 1) * nv][tri], grads) for c in range(2)],
                  axis=1)
    ue = solution.velocity(xq[..., 0], xq[..., 1])
    ge = solution.gradient(xq[..., 0], xq[..., 1])
    pe = solution.pressure(xq[..., 0], xq[..., 1])
    pe = pe - np.sum(wq * pe) / np.sum(wq)
    e_l2 = math.sqrt(np.sum(wq[..., None] * (uq - ue) ** 2))
    e_semi = math.sqrt(np.sum(wq[..., None, None] * (gu[:, None] - ge) ** 2))
    e_p = math.sqrt(np.sum(wq * (pq - pe) ** 2))
    return StokesResult(n=n, u=u, p=p, err_u_L2=e_l2, err_u_H1=math.sqrt(e_l2 ** 2 + e_semi ** 2),
                        err_p_L2=e_p, mean_p=float(w @ p))


STOKES_COLUMNS = ["n", "h", "err_u_L2", "rate_u_L2", "err_u_H1", "rate_u_H1", "err_p_L2", "rate_p_L2"]


def stokes_mms(ns=(8, 16, 32, 64), gamma=0.05, mu=0.1, solution=None, workers=None):
    """Errors and rates of the stabilized Stokes solver over a mesh ladder."""
    solution = smooth_solution(mu) if solution is None else solution
    results = _parallel_map(lambda n: solve_stokes(n, solution, mu, gamma), list(ns), workers)
    rows, prev = [], None
    for res in results:
        errs = [res.err_u_L2, res.err_u_H1, res.err_p_L2]
        rates = [None] * 3 if prev is None else [_safe_rate(a, b) for a, b in zip(prev, errs)]
        rows.append([res.n, 1.0 / res.n, errs[0], rates[0], errs[1], rates[1], errs[2], rates[2]])
        prev = errs
    return rows, results


__all__ = ["Scenario", "ELLIPSE_RELAX", "STEADY_CIRCLE", "scenario_by_name", "RunResult",
           "run_scenario", "stability_sweep", "SweepRow", "StudyPlan", "TIME_CONV", "SPACE_CONV",
           "GLOBAL_CONV", "convergence_study", "StudyResult", "stokes_mms", "solve_stokes",
           "smooth_solution", "resting_solution", "worker_count", "energy_within_bound",
           "STUDY_COLUMNS", "STOKES_COLUMNS"]
