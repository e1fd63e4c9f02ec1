"""Energy bookkeeping, errors against a reference run, convergence rates and
table output."""

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidArgumentError
from .mesh import locate_points
from .schemes import to_nodes


def _quad(A, x):
    return float(x @ (A @ x))


def energy_terms(state, ops, config, d_pre=None):
    """Kinetic fluid, kinetic solid and elastic parts, without weights.

    ``d_pre`` shifts the elastic term for a curve meshed in a prestressed
    shape: the strain is measured from the stress-free shape.
    """
    d = state.d if d_pre is None else state.d + d_pre
    return _quad(ops.M_f, state.u), _quad(ops.M_s, state.ddot), _quad(ops.K_s, d)


def energy(state, ops, config, d_pre=None):
    """``rho_f/2 |u|^2 + rho_s eps/2 |ddot|^2 + 1/2 |d|_s^2``."""
    ku, kd, el = energy_terms(state, ops, config, d_pre)
    return 0.5 * (config.fluid.rho_f * ku + config.solid.inertia * kd + el)


def dissipation_increment(state_prev, state_new, ops, config):
    """Energy lost in one step by the monolithic scheme, exactly."""
    tau, mu = config.tau, config.fluid.mu
    du = state_new.u - state_prev.u
    dv = state_new.ddot - state_prev.ddot
    dd = state_new.d - state_prev.d
    return (2.0 * mu * tau * _quad(ops.K_f, state_new.u) + tau * _quad(ops.S, state_new.p)
            + 0.5 * config.fluid.rho_f * _quad(ops.M_f, du)
            + 0.5 * config.solid.inertia * _quad(ops.M_s, dv)
            + 0.5 * _quad(ops.K_s, dd))


def split_dissipation_increment(state_prev, state_new, ops, config, with_elastic=True):
    """Increment of the dissipation written for the split schemes: viscous and
    stabilization terms unweighted, jumps without the 1/2 factor."""
    tau = config.tau
    du = state_new.u - state_prev.u
    dv = state_new.ddot - state_prev.ddot
    out = (tau * (_quad(ops.K_f, state_new.u) + _quad(ops.S, state_new.p))
           + config.fluid.rho_f * _quad(ops.M_f, du) + config.solid.inertia * _quad(ops.M_s, dv))
    if with_elastic:
        out += _quad(ops.K_s, state_new.d - state_prev.d)
    return out


def alg3_r1_bound(state0, ops, config):
    """Upper bound on the energy of the corrected scheme with first-order
    extrapolation: ``E0 + tau^2/2 |ddot0|_s^2 + tau^2/(2 rho_s eps) |M_s^-1 K_s d0|^2``."""
    tau, inertia = config.tau, config.solid.inertia
    Ld = ops.solid_operator(state0.d)
    return (energy(state0, ops, config) + 0.5 * tau ** 2 * _quad(ops.K_s, state0.ddot)
            + 0.5 * tau ** 2 / inertia * _quad(ops.M_s, Ld))


@dataclass
class EnergyRecord:
    n: int
    t: float
    E: float
    D_cum: float
    kinematic_residual: float
    frac_residual: float
    E_tot: float
    E_split: float
    D_split_cum: float

    @staticmethod
    def columns():
        return [f.name for f in fields(EnergyRecord)]

    def row(self):
        return [getattr(self, c) for c in self.columns()]


class EnergyTracker:
    """Accumulates one EnergyRecord per step."""

    def __init__(self, state0, ops, config, d_pre=None):
        self.ops, self.config = ops, config
        self.d_pre = d_pre
        self.E0 = energy(state0, ops, config, d_pre)
        self.D = 0.0
        self.D_split = 0.0
        self.prev = state0
        self.records = [self._record(state0)]

    def _record(self, state):
        ku, kd, el = energy_terms(state, self.ops, self.config, self.d_pre)
        cfg = self.config
        frac = state.frac_residual if state.frac_residual is not None else 0.0
        return EnergyRecord(n=state.n, t=state.t, E=0.5 * (cfg.fluid.rho_f * ku + cfg.solid.inertia * kd + el),
                            D_cum=self.D,
                            kinematic_residual=state.kinematic_residual, frac_residual=frac,
                            E_tot=ku + kd + el,
                            E_split=cfg.fluid.rho_f * ku + cfg.solid.inertia * kd + el,
                            D_split_cum=self.D_split)

    def push(self, state):
        self.D += dissipation_increment(self.prev, state, self.ops, self.config)
        self.D_split += split_dissipation_increment(
            self.prev, state, self.ops, self.config, with_elastic=self.config.scheme == "alg3")
        self.prev = state
        rec = self._record(state)
        self.records.append(rec)
        return rec


@dataclass(frozen=True)
class ErrorReport:
    err_u_L2: float
    err_d_energy: float
    err_ddot_L2: float
    err_p_L2: float
    total: float


def _ratio_power_of_two(fine, coarse, what):
    if coarse <= 0 or fine % coarse:
        raise InvalidArgumentError(f"{what}: {fine} is not a refinement of {coarse}")
    k = fine // coarse
    if k & (k - 1):
        raise InvalidArgumentError(f"{what}: refinement ratio {k} is not a power of two")
    return k


def fluid_to_reference(coarse_mesh, ref_mesh, values):
    """Evaluate a P1 field (scalar per vertex, or component-blocked vector)
    of the coarse mesh at the reference vertices."""
    _ratio_power_of_two(ref_mesh.n, coarse_mesh.n, "fluid meshes")
    tri, bary = locate_points(coarse_mesh, ref_mesh.vertices)
    verts = coarse_mesh.triangles[tri]
    values = np.asarray(values, dtype=float)
    nc = coarse_mesh.n_vertices
    comps = len(values) // nc
    out = [np.einsum("ki,ki->k", bary, values[c * nc:(c + 1) * nc][verts]) for c in range(comps)]
    return np.concatenate(out)


def solid_to_reference(coarse, ref, values):
    """Evaluate a component-blocked P1 curve field of ``coarse`` at the nodes
    of the nested curve mesh ``ref``, interpolating in reference arclength."""
    if coarse.is_closed != ref.is_closed:
        raise InvalidArgumentError("curve meshes differ in closedness")
    mc, mr = coarse.n_nodes, ref.n_nodes
    if coarse.is_closed:
        k = _ratio_power_of_two(mr, mc, "curve meshes")
    else:
        k = _ratio_power_of_two(mr - 1, mc - 1, "curve meshes")
    if not np.allclose(ref.nodes[::k], coarse.nodes, rtol=0.0, atol=1e-12):
        raise InvalidArgumentError("curve meshes are not nested")
    seg_len = ref.lengths.reshape(-1, k)
    cum = np.cumsum(seg_len, axis=1)
    frac = np.concatenate([np.zeros((len(seg_len), 1)), cum[:, :-1] / cum[:, -1:]], axis=1)
    frac = frac.ravel()
    left = np.repeat(np.arange(len(seg_len)), k)
    right = (left + 1) % mc
    if not coarse.is_closed:
        frac = np.append(frac, 1.0)
        left = np.append(left, mc - 2)
        right = np.append(right, mc - 1)
    nodes = to_nodes(np.asarray(values, dtype=float))
    out = (1.0 - frac)[:, None] * nodes[left] + frac[:, None] * nodes[right]
    return np.concatenate([out[:, 0], out[:, 1]])


def error_vs_reference(coarse_state, coarse_meshes, ref_state, ref_meshes, ops_ref):
    """Errors of a coarse state measured in reference-mesh norms.

    ``*_meshes`` are ``(fluid_mesh, solid_mesh)`` pairs; ``ops_ref`` carries
    the reference mass and stiffness matrices.
    """
    cf, cs = coarse_meshes
    rf, rs = ref_meshes
    eu = fluid_to_reference(cf, rf, coarse_state.u) - ref_state.u
    ep = fluid_to_reference(cf, rf, coarse_state.p) - ref_state.p
    ed = solid_to_reference(cs, rs, coarse_state.d) - ref_state.d
    ev = solid_to_reference(cs, rs, coarse_state.ddot) - ref_state.ddot
    err_u = math.sqrt(max(_quad(ops_ref.M_f, eu), 0.0))
    err_p = math.sqrt(max(_quad(ops_ref.M_p, ep), 0.0))
    err_d = math.sqrt(max(_quad(ops_ref.K_s, ed), 0.0))
    err_v = math.sqrt(max(_quad(ops_ref.M_s, ev), 0.0))
    total = math.sqrt(err_u ** 2 + err_d ** 2 + err_v ** 2)
    return ErrorReport(err_u_L2=err_u, err_d_energy=err_d, err_ddot_L2=err_v, err_p_L2=err_p,
                       total=total)


def convergence_rate(err_coarse, err_fine):
    """Observed order for a parameter halving."""
    if not (err_coarse > 0 and err_fine > 0):
        raise InvalidArgumentError("errors must be positive")
    return math.log2(err_coarse / err_fine)


def fmt(x):
    """Decimal text that round-trips a double."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


def write_table(path, columns, rows, config_hash):
    """Write ``path`` as CSV plus a whitespace-separated ``.dat`` mirror.

    Both start with a comment line naming the columns and the config hash.
    """
    header = f"# columns: {' '.join(columns)} | config_hash: {config_hash}\n"
    text = [",".join(fmt(v) for v in row) for row in rows]
    with open(path, "w", newline="\n") as fh:
        fh.write(header)
        fh.write(",".join(columns) + "\n")
        fh.write("".join(line + "\n" for line in text))
    dat = str(path)
    dat = (dat[:-4] if dat.endswith(".csv") else dat) + ".dat"
    with open(dat, "w", newline="\n") as fh:
        fh.write(header)
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(fmt(v) if v is not None else "nan" for v in row) + "\n")
