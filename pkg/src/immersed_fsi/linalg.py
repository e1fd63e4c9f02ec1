"""Block saddle-point systems, sparse LU and a generalized eigenvalue estimate.

Unknown ordering of a composed system::

    [ velocity (free dofs only) | pressure | solid | multiplier | mean-pressure scalar ]

Velocity rows on the Dirichlet boundary are removed; prescribed boundary
values enter the right-hand side through the removed columns.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, eigh
from scipy.sparse.linalg import splu

from .errors import ConvergenceError, InvalidArgumentError, SingularSystemError

PIVOT_TOL = 1e-14
# threshold partial pivoting: keep the diagonal unless it is 1000x smaller than
# the column maximum; minimum-degree ordering of A^T + A keeps fill low
DIAG_PIVOT_THRESH = 1e-3
RESIDUAL_TOL = 1e-10


def _splu(A):
    return splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=DIAG_PIVOT_THRESH,
                options=dict(SymmetricMode=True))


class Factorization:
    """Sparse LU with partial pivoting and a residual-checked solve."""

    def __init__(self, matrix):
        A = sp.csc_matrix(matrix, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise InvalidArgumentError(f"matrix must be square, got {A.shape}")
        self.A = A
        scale = abs(A).max() if A.nnz else 0.0
        if scale == 0.0:
            raise SingularSystemError("matrix is identically zero", pivot=0)
        try:
            self.lu = _splu(A)
        except RuntimeError as exc:
            pivot = _locate_singular_pivot(A, scale)
            raise SingularSystemError(f"factorization failed ({exc}); zero pivot at column {pivot}",
                                      pivot=pivot) from None
        diag = np.abs(self.lu.U.diagonal())
        small = np.flatnonzero(diag <= PIVOT_TOL * scale)
        if len(small):
            pivot = int(self.lu.perm_c[small[0]])
            raise SingularSystemError(f"numerically zero pivot at column {pivot}", pivot=pivot)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = self.lu.solve(b)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return x
        for _ in range(3):
            r = b - self.A @ x
            if np.linalg.norm(r) <= RESIDUAL_TOL * bnorm:
                return x
            x = x + self.lu.solve(r)
        res = np.linalg.norm(b - self.A @ x) / bnorm
        if res > RESIDUAL_TOL:
            raise SingularSystemError(f"relative residual {res:.3e} after refinement")
        return x


def _locate_singular_pivot(A, scale):
    """Column where elimination breaks down, found on a shifted copy."""
    shifted = A + sp.identity(A.shape[0], format="csc") * (1e-10 * scale)
    lu = _splu(shifted)
    k = int(np.argmin(np.abs(lu.U.diagonal())))
    return int(lu.perm_c[k])


def factorize(matrix):
    return Factorization(matrix)


@dataclass(eq=False)
class BlockSystem:
    """Composed saddle-point matrix with its layout.

    ``layout`` maps block names to slices of the global vector.  ``free``
    lists the retained velocity dofs and ``fixed`` the eliminated ones.
    """
    matrix: sp.csr_matrix
    layout: dict
    free: np.ndarray
    fixed: np.ndarray
    n_velocity: int
    # columns of the eliminated dofs, used to lift boundary data into the rhs
    fixed_columns: sp.csr_matrix
    _factor: object = field(default=None, repr=False)

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def factorization(self):
        if self._factor is None:
            self._factor = Factorization(self.matrix)
        return self._factor

    def rhs(self, velocity=None, pressure=None, solid=None, multiplier=None, u_fixed=None):
        """Global right-hand side from full-length block vectors."""
        b = np.zeros(self.size)
        if velocity is not None:
            b[self.layout["velocity"]] = np.asarray(velocity)[self.free]
        for name, vec in (("pressure", pressure), ("solid", solid), ("multiplier", multiplier)):
            if vec is not None:
                b[self.layout[name]] = vec
        if u_fixed is not None and len(self.fixed):
            b -= self.fixed_columns @ np.asarray(u_fixed)[self.fixed]
        return b

    def split(self, x, u_fixed=None):
        """Block views of a solution; velocity is expanded to full length."""
        u = np.zeros(self.n_velocity)
        u[self.free] = x[self.layout["velocity"]]
        if u_fixed is not None:
            u[self.fixed] = np.asarray(u_fixed)[self.fixed]
        out = {"velocity": u}
        for name, sl in self.layout.items():
            if name != "velocity":
                out[name] = x[sl]
        return out


def compose_system(blocks, bcs):
    """Assemble the global matrix.

    ``blocks`` is a dict with keys
      ``A_f`` (velocity/velocity), ``B`` (pressure/velocity), ``S`` (pressure
      stabilization, placed with a minus sign), ``p_weights`` (mean-zero row),
    and optionally
      ``A_s`` (solid/solid), ``L_f`` (multiplier/velocity),
      ``C_sm`` (solid/multiplier) and ``C_ms`` (multiplier/solid).
    ``bcs`` is a boolean mask over velocity dofs marking Dirichlet dofs.

    The pressure row reads ``B u - S p + w xi``; the velocity row carries
    ``B^T p + L_f^T lambda``.
    """
    A_f, B, S = blocks["A_f"], blocks["B"], blocks["S"]
    nv, npres = A_f.shape[0], S.shape[0]
    bcs = np.asarray(bcs, dtype=bool)
    if A_f.shape != (nv, nv) or B.shape != (npres, nv) or S.shape != (npres, npres) \
            or len(bcs) != nv:
        raise InvalidArgumentError("fluid block dimensions are inconsistent")
    w = np.asarray(blocks["p_weights"], dtype=float).reshape(-1, 1)
    if w.shape[0] != npres:
        raise InvalidArgumentError("pressure weight vector has wrong length")
    free = np.flatnonzero(~bcs)
    fixed = np.flatnonzero(bcs)

    has_solid = blocks.get("A_s") is not None
    A_full = sp.csr_matrix(A_f)
    B = sp.csr_matrix(B)
    grid = [[A_full[free][:, free], B[:, free].T, None, None, None],
            [B[:, free], -S, None, None, sp.csr_matrix(w)]]
    fixed_rows = [A_full[free][:, fixed], B[:, fixed]]
    names = [("velocity", len(free)), ("pressure", npres)]
    if has_solid:
        A_s, L_f = blocks["A_s"], sp.csr_matrix(blocks["L_f"])
        C_sm, C_ms = blocks["C_sm"], blocks["C_ms"]
        ns, nm = A_s.shape[0], L_f.shape[0]
        if L_f.shape[1] != nv or C_sm.shape != (ns, nm) or C_ms.shape != (nm, ns):
            raise InvalidArgumentError("coupling block dimensions are inconsistent")
        grid[0][3] = L_f[:, free].T
        grid.append([None, None, A_s, C_sm, None])
        grid.append([L_f[:, free], None, C_ms, None, None])
        fixed_rows += [sp.csr_matrix((ns, len(fixed))), L_f[:, fixed]]
        names += [("solid", ns), ("multiplier", nm)]
    else:
        grid = [row[:2] + row[4:] for row in grid]
    last = len(grid[0]) - 1
    grid.append([None] * (last + 1))
    grid[-1][1] = sp.csr_matrix(w.T)
    grid[-1][last] = sp.csr_matrix((1, 1))
    fixed_rows.append(sp.csr_matrix((1, len(fixed))))
    names.append(("mean", 1))

    matrix = sp.bmat(grid, format="csr")
    matrix.sort_indices()
    layout, start = {}, 0
    for name, size in names:
        layout[name] = slice(start, start + size)
        start += size
    fixed_columns = sp.vstack(fixed_rows, format="csr")
    return BlockSystem(matrix=matrix, layout=layout, free=free, fixed=fixed,
                       n_velocity=nv, fixed_columns=fixed_columns)


def lu_solve(system, rhs):
    """Solve a composed system, reusing its factorization across calls."""
    if isinstance(system, BlockSystem):
        return system.factorization.solve(rhs)
    return Factorization(system).solve(rhs)


def generalized_eig_max(K, M, rtol=1e-10, maxiter=10_000, seed=0, block=8):
    """Largest ``lam`` with ``K x = lam M x`` by block power iteration on ``M^{-1} K``.

    A block of ``block`` vectors is iterated and reduced by Rayleigh-Ritz each
    sweep, so clusters of nearly equal top eigenvalues (curve stiffness on a
    circle has them in pairs) do not stall convergence.  The first start
    vector alternates in sign, close to the highest-frequency mode of curve
    stiffness matrices; the others are seeded random.
    """
    K = sp.csr_matrix(K)
    M = sp.csc_matrix(M)
    n = M.shape[0]
    if K.shape != M.shape or M.shape[0] != M.shape[1]:
        raise InvalidArgumentError("K and M must be square and of equal size")
    if K.nnz == 0 or abs(K).max() == 0.0:
        return 0.0
    lu = splu(M)
    rng = np.random.default_rng(seed)
    p = min(block, n)
    X = rng.standard_normal((n, p))
    X[:, 0] = np.where(np.arange(n) % 2 == 0, 1.0, -1.0) + 1e-3 * X[:, 0]
    rho = None
    for _ in range(maxiter):
        Y = lu.solve(K @ X)
        Kr = Y.T @ (K @ Y)
        Mr = Y.T @ (M @ Y)
        try:
            vals, vecs = eigh(0.5 * (Kr + Kr.T), 0.5 * (Mr + Mr.T))
        except LinAlgError:
            # the block lost rank; restart its weakest directions at random
            Y, _ = np.linalg.qr(Y)
            Y[:, 1:] = rng.standard_normal((n, p - 1))
            X = Y
            continue
        new = float(vals[-1])
        if rho is not None and abs(new - rho) <= rtol * abs(new):
            return new
        rho = new
        X = Y @ vecs[:, ::-1]
        X /= np.sqrt(np.einsum("ij,ij->j", X, M @ X))
    raise ConvergenceError(f"power iteration did not converge in {maxiter} iterations")
