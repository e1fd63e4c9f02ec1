"""Sparse operators of the coupled fluid/curve problem.

Velocity unknowns are stored component-blocked: ``[u_x(0..N-1), u_y(0..N-1)]``
over fluid vertices, and solid/multiplier unknowns likewise over curve nodes.
All matrices come back as CSR with sorted, duplicate-free column indices.
Duplicate triplets are summed in a canonical order (sorted by row, column and
value) so a matrix never depends on the order elements were visited in.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidArgumentError
from .mesh import cut_segment


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


# edge-midpoint rule on the reference triangle (0,0),(1,0),(0,1); points in barycentric form
TRIANGLE_MIDPOINT = QuadratureRule(
    points=np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    weights=np.full(3, 1.0 / 6.0),
)

GAUSS3 = QuadratureRule(
    points=np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)]),
    weights=np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]),
)


@dataclass(frozen=True)
class FluidParams:
    rho_f: float = 1.0
    mu: float = 0.1

    def __post_init__(self):
        if not (self.rho_f > 0 and self.mu > 0):
            raise InvalidArgumentError("rho_f and mu must be positive")


@dataclass(frozen=True)
class SolidModel:
    """Thin-structure model: ``kind`` is ``"string"`` or ``"membrane"``.

    The string form ``lambda0 * d_s(d).d_s(w) + lambda1 * d.w`` acts on each
    displacement component; the membrane is a pure spring ``K_coef * d.w``.
    """
    rho_s: float = 1.0
    eps: float = 0.1
    kind: str = "string"
    lambda0: float = 1.0
    lambda1: float = 10.0
    K_coef: float = 1.0

    def __post_init__(self):
        if not (self.rho_s > 0 and self.eps > 0):
            raise InvalidArgumentError("rho_s and eps must be positive")
        if self.kind == "string":
            if self.lambda0 < 0 or self.lambda1 <= 0:
                raise InvalidArgumentError("string model needs lambda0 >= 0 and lambda1 > 0")
        elif self.kind == "membrane":
            if self.K_coef <= 0:
                raise InvalidArgumentError("membrane model needs K_coef > 0")
        else:
            raise InvalidArgumentError(f"unknown solid model kind {self.kind!r}")

    @property
    def inertia(self):
        return self.rho_s * self.eps

    @classmethod
    def string_from_material(cls, young, nu, radius, rho_s=1.0, eps=0.1):
        """String coefficients of a thin cylindrical shell of given radius."""
        lambda0 = young * eps / (2.0 * (1.0 + nu))
        lambda1 = young * eps / (radius ** 2 * (1.0 - nu ** 2))
        return cls(rho_s=rho_s, eps=eps, kind="string", lambda0=lambda0, lambda1=lambda1)


def triplets_to_csr(rows, cols, vals, shape):
    """Sum duplicate triplets in a canonical order and return CSR."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if len(vals) == 0:
        return sp.csr_matrix(shape)
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    start = np.concatenate([[True], (np.diff(rows) != 0) | (np.diff(cols) != 0)])
    first = np.flatnonzero(start)
    data = np.add.reduceat(vals, first)
    r, c = rows[first], cols[first]
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, r + 1, 1)
    indptr = np.cumsum(indptr)
    return sp.csr_matrix((data, c, indptr), shape=shape)


def _element_geometry(mesh):
    """Areas, hat-function gradients (T, 3, 2) and diameters of all triangles."""
    p = mesh.vertices[mesh.triangles]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = np.linalg.inv(jac)
    grads = np.empty((len(p), 3, 2))
    grads[:, 1] = inv[:, 0]
    grads[:, 2] = inv[:, 1]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    edge = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    diam = np.linalg.norm(edge, axis=-1).max(axis=1)
    return 0.5 * det, grads, diam


def _local_mass(area, rule=TRIANGLE_MIDPOINT):
    phi = rule.points
    ref = np.einsum("q,qi,qj->ij", rule.weights, phi, phi)
    # reference triangle has area 1/2
    return (2.0 * area)[:, None, None] * ref[None]


def _scatter(tri_dofs_row, tri_dofs_col, local, shape):
    rows = np.broadcast_to(tri_dofs_row[:, :, None], local.shape)
    cols = np.broadcast_to(tri_dofs_col[:, None, :], local.shape)
    return triplets_to_csr(rows, cols, local, shape)


def assemble_scalar_mass(mesh):
    area, _, _ = _element_geometry(mesh)
    n = mesh.n_vertices
    return _scatter(mesh.triangles, mesh.triangles, _local_mass(area), (n, n))


def pressure_weights(mesh):
    """Integrals of the scalar hat functions (the constraint row for zero mean)."""
    area, _, _ = _element_geometry(mesh)
    w = np.zeros(mesh.n_vertices)
    np.add.at(w, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    return w


def assemble_fluid_blocks(mesh, params, gamma):
    """Raw fluid operators ``(M_f, K_f, B, S)`` before any Dirichlet elimination.

    ``K_f`` is the symmetric-gradient form without the ``2 mu`` factor.
    """
    if not gamma > 0:
        raise InvalidArgumentError("stabilization constant must be positive")
    n = mesh.n_vertices
    tri = mesh.triangles
    area, g, diam = _element_geometry(mesh)

    mass = _local_mass(area)
    zero = np.zeros_like(mass)
    local_m = np.block([[mass, zero], [zero, mass]])

    # eps(phi_a e_c) : eps(phi_b e_d) = (delta_cd grad_a.grad_b + d_d phi_a d_c phi_b) / 2
    gg = np.einsum("tbk,tak->tba", g, g)
    local_k = np.empty((len(tri), 6, 6))
    for d in range(2):
        for c in range(2):
            blk = 0.5 * np.einsum("ta,tb->tba", g[:, :, d], g[:, :, c])
            if c == d:
                blk = blk + 0.5 * gg
            local_k[:, 3 * d:3 * d + 3, 3 * c:3 * c + 3] = area[:, None, None] * blk

    vdofs = np.concatenate([tri, tri + n], axis=1)
    M_f = _scatter(vdofs, vdofs, local_m, (2 * n, 2 * n))
    K_f = _scatter(vdofs, vdofs, local_k, (2 * n, 2 * n))

    # B_{i,(c,a)} = -int d_c phi_a psi_i, and int psi_i = area/3 on each element
    local_b = -(area / 3.0)[:, None, None] * np.concatenate([
        np.broadcast_to(g[:, None, :, 0], (len(tri), 3, 3)),
        np.broadcast_to(g[:, None, :, 1], (len(tri), 3, 3))], axis=2)
    B = _scatter(tri, vdofs, local_b, (n, 2 * n))

    local_s = (gamma * diam ** 2 * area)[:, None, None] * gg
    S = _scatter(tri, tri, local_s, (n, n))
    return M_f, K_f, B, S


def _segment_mass(lengths, rule=GAUSS3):
    s = 0.5 * (rule.points + 1.0)
    phi = np.stack([1.0 - s, s], axis=1)
    ref = 0.5 * np.einsum("q,qi,qj->ij", rule.weights, phi, phi)
    return lengths[:, None, None] * ref[None]


def _solid_scatter(smesh, local):
    m = smesh.n_nodes
    seg = smesh.segments
    dofs = np.concatenate([seg, seg + m], axis=1)
    zero = np.zeros_like(local)
    both = np.block([[local, zero], [zero, local]])
    return _scatter(dofs, dofs, both, (2 * m, 2 * m))


def assemble_solid_blocks(smesh, model):
    """Solid mass ``M_s`` and stiffness ``K_s`` on the 2-vector displacement."""
    mass = _segment_mass(smesh.lengths)
    M_s = _solid_scatter(smesh, mass)
    if model.kind == "membrane":
        return M_s, (model.K_coef * M_s).tocsr()
    lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
    local = (model.lambda0 / smesh.lengths)[:, None, None] * lap[None] + model.lambda1 * mass
    return M_s, _solid_scatter(smesh, local)


def assemble_coupling_solid(smesh):
    """Multiplier/solid coupling; multiplier and displacement share one basis."""
    return _solid_scatter(smesh, _segment_mass(smesh.lengths))


def assemble_coupling_fluid(fmesh, smesh, phi, rule=GAUSS3):
    """Multiplier/fluid coupling at current node positions ``phi`` (m, 2).

    Rows are multiplier unknowns, columns velocity unknowns.  Each current
    segment is cut against the fluid mesh; on each piece the solid hat is
    evaluated in reference arclength and the fluid hat at the current point.
    """
    phi = np.asarray(phi, dtype=float)
    m, nv = smesh.n_nodes, fmesh.n_vertices
    seg_ids, t0s, t1s, tris = [], [], [], []
    for k, (j0, j1) in enumerate(smesh.segments):
        cut = cut_segment(fmesh, phi[j0], phi[j1], length=smesh.lengths[k])
        for a, b, tri in cut.pieces:
            seg_ids.append(k)
            t0s.append(a)
            t1s.append(b)
            tris.append(tri)
    seg_ids = np.array(seg_ids)
    t0s, t1s, tris = np.array(t0s), np.array(t1s), np.array(tris)

    half = 0.5 * (t1s - t0s)
    zeta = 0.5 * (t0s + t1s)[:, None] + half[:, None] * rule.points[None, :]
    w = half[:, None] * rule.weights[None, :]
    s = zeta / smesh.lengths[seg_ids][:, None]
    j0 = smesh.segments[seg_ids, 0]
    j1 = smesh.segments[seg_ids, 1]
    x = phi[j0][:, None, :] + s[..., None] * (phi[j1] - phi[j0])[:, None, :]
    bary = fmesh.barycentric(np.broadcast_to(tris[:, None], s.shape), x)

    solid_hat = np.stack([1.0 - s, s], axis=-1)
    # (piece, solid local, fluid local)
    vals = np.einsum("pq,pqi,pqa->pia", w, solid_hat, bary)
    rows = np.broadcast_to(np.stack([j0, j1], axis=1)[:, :, None], vals.shape)
    cols = np.broadcast_to(fmesh.triangles[tris][:, None, :], vals.shape)
    rows = np.concatenate([rows.ravel(), rows.ravel() + m])
    cols = np.concatenate([cols.ravel(), cols.ravel() + nv])
    vals = np.concatenate([vals.ravel(), vals.ravel()])
    return triplets_to_csr(rows, cols, vals, (2 * m, 2 * nv))


def apply_discrete_solid_operator(M_s, K_s, w):
    """Return ``x`` with ``M_s x = K_s w``."""
    w = np.asarray(w, dtype=float)
    if M_s.shape[0] != len(w) or K_s.shape != M_s.shape:
        raise InvalidArgumentError("dimension mismatch")
    return splu(sp.csc_matrix(M_s)).solve(K_s @ w)


@dataclass(eq=False)
class AssembledOperators:
    """Time-independent blocks plus a hook to rebuild the fluid coupling."""
    fmesh: object
    smesh: object
    fluid: FluidParams
    solid: SolidModel
    gamma: float
    M_f: sp.csr_matrix
    K_f: sp.csr_matrix
    B: sp.csr_matrix
    S: sp.csr_matrix
    M_p: sp.csr_matrix
    p_weights: np.ndarray
    M_s: sp.csr_matrix
    K_s: sp.csr_matrix
    L_s: sp.csr_matrix
    _M_s_lu: object = field(default=None, repr=False)

    def coupling_fluid(self, phi):
        return assemble_coupling_fluid(self.fmesh, self.smesh, phi)

    def solid_operator(self, w):
        """``M_s^{-1} K_s w`` with a cached factorization of ``M_s``."""
        if self._M_s_lu is None:
            self._M_s_lu = splu(sp.csc_matrix(self.M_s))
        return self._M_s_lu.solve(self.K_s @ np.asarray(w, dtype=float))

    def solve_solid_mass(self, rhs):
        if self._M_s_lu is None:
            self._M_s_lu = splu(sp.csc_matrix(self.M_s))
        return self._M_s_lu.solve(np.asarray(rhs, dtype=float))


def assemble_operators(fmesh, smesh, fluid, solid, gamma=0.05):
    M_f, K_f, B, S = assemble_fluid_blocks(fmesh, fluid, gamma)
    M_s, K_s = assemble_solid_blocks(smesh, solid)
    return AssembledOperators(
        fmesh=fmesh, smesh=smesh, fluid=fluid, solid=solid, gamma=gamma,
        M_f=M_f, K_f=K_f, B=B, S=S, M_p=assemble_scalar_mass(fmesh),
        p_weights=pressure_weights(fmesh), M_s=M_s, K_s=K_s,
        L_s=assemble_coupling_solid(smesh))


def write_coo(matrix, path):
    """Dump a sparse matrix as ``row,col,value`` lines."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r},{c},{v:.17g}\n")
