"""Fluid triangulation of the unit square and the immersed curve mesh.

The fluid mesh is a structured grid of ``n x n`` cells, each split along the
diagonal from its lower-left to its upper-right corner::

    v01 ---- v11
     |     / |
     | T1 /  |
     |   / T0|
    v00 ---- v10

Cell ``c = j*n + i`` owns triangles ``2c`` (v00, v10, v11) and ``2c + 1``
(v00, v11, v01), both counterclockwise.  Vertex ``(i, j)`` has index
``j*(n + 1) + i``.

The curve mesh is an ordered chain of nodes in the reference configuration.
Point location uses a uniform bucket grid; ties on shared edges or vertices
go to the lowest triangle index so that results never depend on the order in
which candidates are visited.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, InvalidArgumentError, OutOfDomainError

TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FluidMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    n: int
    boundary: np.ndarray
    # bucket grid: candidates of bucket b are grid_tris[grid_ptr[b]:grid_ptr[b+1]]
    grid_n: int
    grid_ptr: np.ndarray
    grid_tris: np.ndarray
    edges: np.ndarray
    _affine: np.ndarray = field(repr=False)

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def signed_areas(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    def barycentric(self, tri, x):
        """Barycentric coordinates of points ``x`` (k, 2) in triangles ``tri`` (k,)."""
        tri = np.asarray(tri)
        x = np.asarray(x, dtype=float)
        aff = self._affine[tri]
        origin = self.vertices[self.triangles[tri, 0]]
        rel = x - origin
        l1 = aff[..., 0, 0] * rel[..., 0] + aff[..., 0, 1] * rel[..., 1]
        l2 = aff[..., 1, 0] * rel[..., 0] + aff[..., 1, 1] * rel[..., 1]
        return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _unique_edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _bucket_grid(vertices, triangles, grid_n):
    """Map each bucket of a ``grid_n x grid_n`` grid to the triangles whose
    (slightly dilated) bounding box meets it."""
    pts = vertices[triangles]
    lo = np.floor((pts.min(axis=1) - TOL) * grid_n).astype(int)
    hi = np.floor((pts.max(axis=1) + TOL) * grid_n).astype(int)
    lo = np.clip(lo, 0, grid_n - 1)
    hi = np.clip(hi, 0, grid_n - 1)
    buckets = [[] for _ in range(grid_n * grid_n)]
    for t in range(len(triangles)):
        for bj in range(lo[t, 1], hi[t, 1] + 1):
            for bi in range(lo[t, 0], hi[t, 0] + 1):
                buckets[bj * grid_n + bi].append(t)
    ptr = np.zeros(grid_n * grid_n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(b) for b in buckets])
    tris = np.array([t for b in buckets for t in b], dtype=np.int64)
    return ptr, tris


def build_unit_square(n):
    """Structured triangulation of [0,1]^2 with ``2 n^2`` right triangles."""
    if int(n) != n or n < 2:
        raise InvalidArgumentError(f"n must be an integer >= 2, got {n}")
    n = int(n)
    idx = np.arange(n + 1)
    gx, gy = np.meshgrid(idx / n, idx / n)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v00 = (jj * (n + 1) + ii).ravel()
    v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])

    x, y = vertices[:, 0], vertices[:, 1]
    boundary = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)

    a = vertices[triangles[:, 0]]
    jac = np.stack([vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a], axis=-1)
    affine = np.linalg.inv(jac)

    ptr, tris = _bucket_grid(vertices, triangles, n)
    return FluidMesh(vertices=vertices, triangles=triangles, n=n, boundary=boundary,
                     grid_n=n, grid_ptr=ptr, grid_tris=tris,
                     edges=_unique_edges(triangles), _affine=affine)


def _check_in_domain(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    bad = np.any((x < -TOL) | (x > 1.0 + TOL), axis=1)
    if np.any(bad):
        raise OutOfDomainError(f"point {x[np.argmax(bad)].tolist()} lies outside [0,1]^2")
    # points within the tolerance outside are moved onto the boundary
    return np.clip(x, 0.0, 1.0)


def _bucket_of(mesh, x):
    b = np.clip(np.floor(x * mesh.grid_n).astype(int), 0, mesh.grid_n - 1)
    return b[:, 1] * mesh.grid_n + b[:, 0]


def locate_points(mesh, x):
    """Vectorized point location.

    Returns ``(tri, bary)`` with ``tri`` of shape (k,) and ``bary`` (k, 3).
    """
    x = _check_in_domain(x)
    buckets = _bucket_of(mesh, x)
    counts = mesh.grid_ptr[buckets + 1] - mesh.grid_ptr[buckets]
    width = int(counts.max())
    cand = np.full((len(x), width), -1, dtype=np.int64)
    for k in range(width):
        has = counts > k
        cand[has, k] = mesh.grid_tris[mesh.grid_ptr[buckets[has]] + k]
    safe = np.where(cand >= 0, cand, 0)
    bary = mesh.barycentric(safe, np.broadcast_to(x[:, None, :], cand.shape + (2,)))
    ok = (cand >= 0) & np.all(bary >= -TOL, axis=-1)
    # buckets list triangles in increasing index, so the first hit is the lowest
    masked = np.where(ok, cand, np.iinfo(np.int64).max)
    tri = masked.min(axis=1)
    if np.any(tri == np.iinfo(np.int64).max):
        k = int(np.argmax(tri == np.iinfo(np.int64).max))
        raise OutOfDomainError(f"no triangle contains point {x[k].tolist()}")
    return tri, mesh.barycentric(tri, x)


def locate_point(mesh, x):
    """Triangle index and barycentric coordinates of a single point."""
    tri, bary = locate_points(mesh, np.asarray(x, dtype=float)[None, :])
    return int(tri[0]), bary[0]


@dataclass(frozen=True)
class SegmentCut:
    """Pieces ``(t_start, t_end, triangle)`` with ``t`` measured in [0, length]."""
    pieces: list
    length: float


def _candidate_triangles(mesh, p0, p1):
    lo = np.clip(np.floor((np.minimum(p0, p1) - TOL) * mesh.grid_n).astype(int), 0, mesh.grid_n - 1)
    hi = np.clip(np.floor((np.maximum(p0, p1) + TOL) * mesh.grid_n).astype(int), 0, mesh.grid_n - 1)
    out = []
    for bj in range(lo[1], hi[1] + 1):
        for bi in range(lo[0], hi[0] + 1):
            b = bj * mesh.grid_n + bi
            out.append(mesh.grid_tris[mesh.grid_ptr[b]:mesh.grid_ptr[b + 1]])
    return np.unique(np.concatenate(out))


def cut_segment(mesh, p0, p1, length=None):
    """Split the segment ``p0 -> p1`` into one piece per traversed triangle.

    Piece parameters are scaled to ``[0, length]``; ``length`` defaults to the
    Euclidean length of the segment.  Passing the reference length of a curve
    element gives pieces in reference arclength.
    """
    p0 = _check_in_domain(p0)[0]
    p1 = _check_in_domain(p1)[0]
    d = p1 - p0
    dlen = float(np.hypot(d[0], d[1]))
    if dlen == 0.0:
        raise InvalidArgumentError("zero-length segment")
    if length is None:
        length = dlen

    tris = _candidate_triangles(mesh, p0, p1)
    e = mesh.triangles[tris]
    edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
    edges.sort(axis=1)
    edges = np.unique(edges, axis=0)
    q0 = mesh.vertices[edges[:, 0]]
    ev = mesh.vertices[edges[:, 1]] - q0
    # p0 + t d = q0 + s ev
    denom = d[0] * ev[:, 1] - d[1] * ev[:, 0]
    w = q0 - p0
    nonpar = np.abs(denom) > 1e-14 * dlen * np.hypot(ev[:, 0], ev[:, 1])
    den = np.where(nonpar, denom, 1.0)
    t = (w[:, 0] * ev[:, 1] - w[:, 1] * ev[:, 0]) / den
    s = (w[:, 0] * d[1] - w[:, 1] * d[0]) / den
    hit = nonpar & (s >= -TOL) & (s <= 1.0 + TOL) & (t > TOL) & (t < 1.0 - TOL)

    ts = np.sort(np.concatenate([[0.0, 1.0], t[hit]]))
    keep = np.concatenate([[True], np.diff(ts) > TOL])
    ts = ts[keep]
    ts[-1] = 1.0

    mids = p0 + 0.5 * (ts[:-1] + ts[1:])[:, None] * d
    owner, _ = locate_points(mesh, mids)
    pieces = []
    for k in range(len(ts) - 1):
        tri = int(owner[k])
        if pieces and pieces[-1][2] == tri:
            pieces[-1] = (pieces[-1][0], ts[k + 1], tri)
        else:
            pieces.append((ts[k], ts[k + 1], tri))
    pieces = [(float(a) * length, float(b) * length, tri) for a, b, tri in pieces]
    return SegmentCut(pieces=pieces, length=float(length))


@dataclass(frozen=True, eq=False)
class SolidMesh:
    """Node chain of the immersed curve in its reference configuration.

    ``params`` holds the parameter value of each node (the angle for ellipse
    meshes); nested meshes share parameter values at common nodes.
    """
    nodes: np.ndarray
    segments: np.ndarray
    lengths: np.ndarray
    is_closed: bool
    params: np.ndarray

    @property
    def h(self):
        return float(self.lengths.max())

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_segments(self):
        return len(self.segments)


def build_curve(nodes, closed=True, params=None, max_ratio=4.0):
    """Curve mesh through the given nodes, in order."""
    nodes = np.asarray(nodes, dtype=float)
    m = len(nodes)
    if nodes.ndim != 2 or nodes.shape[1] != 2 or m < 2:
        raise InvalidArgumentError("nodes must be an (m, 2) array with m >= 2")
    idx = np.arange(m)
    if closed:
        if m < 3:
            raise InvalidArgumentError("a closed curve needs at least 3 nodes")
        segments = np.column_stack([idx, np.roll(idx, -1)])
    else:
        segments = np.column_stack([idx[:-1], idx[1:]])
    seg = nodes[segments[:, 1]] - nodes[segments[:, 0]]
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths <= 0.0):
        raise GeometryError("curve has a zero-length segment")
    if len(np.unique(nodes, axis=0)) != m:
        raise GeometryError("curve nodes are not distinct")
    ratio = lengths.max() / lengths.min()
    if ratio > max_ratio:
        raise GeometryError(f"segment length ratio {ratio:.3g} exceeds {max_ratio}")
    if params is None:
        params = np.concatenate([[0.0], np.cumsum(lengths)])[:m]
    return SolidMesh(nodes=nodes, segments=segments, lengths=lengths,
                     is_closed=bool(closed), params=np.asarray(params, dtype=float))


def build_ellipse(center, a, b, m):
    """Closed curve with ``m`` nodes at equal parameter angles on an ellipse."""
    if a <= 0 or b <= 0:
        raise InvalidArgumentError("semi-axes must be positive")
    if int(m) != m or m < 3:
        raise InvalidArgumentError(f"m must be an integer >= 3, got {m}")
    cx, cy = center
    if not (cx - a > 0.0 and cx + a < 1.0 and cy - b > 0.0 and cy + b < 1.0):
        raise GeometryError("ellipse touches or crosses the boundary of the unit square")
    theta = 2.0 * np.pi * np.arange(int(m)) / m
    nodes = np.column_stack([cx + a * np.cos(theta), cy + b * np.sin(theta)])
    return build_curve(nodes, closed=True, params=theta)


def ellipse_points(center, a, b, theta):
    theta = np.asarray(theta, dtype=float)
    return np.column_stack([center[0] + a * np.cos(theta), center[1] + b * np.sin(theta)])


def write_fluid_mesh_csv(mesh, vertices_path, triangles_path):
    np.savetxt(vertices_path, mesh.vertices, delimiter=",", fmt="%.17g")
    np.savetxt(triangles_path, mesh.triangles, delimiter=",", fmt="%d")


def write_solid_mesh_csv(smesh, nodes_path, segments_path):
    np.savetxt(nodes_path, smesh.nodes, delimiter=",", fmt="%.17g")
    np.savetxt(segments_path, smesh.segments, delimiter=",", fmt="%d")
