import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from immersed_fsi.assembly import (GAUSS3, TRIANGLE_MIDPOINT, FluidParams, SolidModel,
                                   apply_discrete_solid_operator, assemble_coupling_fluid,
                                   assemble_coupling_solid, assemble_fluid_blocks,
                                   assemble_scalar_mass, assemble_solid_blocks, triplets_to_csr,
                                   write_coo)
from immersed_fsi.errors import InvalidArgumentError, OutOfDomainError
from immersed_fsi.mesh import build_curve, build_ellipse, build_unit_square

FLUID = FluidParams()


def _gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def test_quadrature_weights():
    assert TRIANGLE_MIDPOINT.weights.sum() == pytest.approx(0.5, abs=1e-15)
    assert GAUSS3.weights.sum() == pytest.approx(2.0, abs=1e-15)


def test_triangle_rule_degree_two():
    # int over reference triangle of x^a y^b = a! b! / (a + b + 2)!
    x = TRIANGLE_MIDPOINT.points[:, 1]
    y = TRIANGLE_MIDPOINT.points[:, 2]
    for a, b in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]:
        exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
        assert TRIANGLE_MIDPOINT.weights @ (x ** a * y ** b) == pytest.approx(exact, abs=1e-15)


def test_csr_canonical():
    A = triplets_to_csr([2, 0, 2, 0], [1, 0, 1, 2], [1.0, 2.0, 3.0, 4.0], (3, 3))
    assert np.array_equal(A.toarray(), [[2, 0, 4], [0, 0, 0], [0, 4, 0]])
    for r in range(3):
        cols = A.indices[A.indptr[r]:A.indptr[r + 1]]
        assert np.all(np.diff(cols) > 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_csr_independent_of_triplet_order(seed):
    rng = np.random.default_rng(seed)
    r = rng.integers(0, 5, 40)
    c = rng.integers(0, 5, 40)
    v = rng.standard_normal(40)
    A = triplets_to_csr(r, c, v, (5, 5))
    p = rng.permutation(40)
    B = triplets_to_csr(r[p], c[p], v[p], (5, 5))
    assert np.array_equal(A.data, B.data) and np.array_equal(A.indices, B.indices)
    dense = np.zeros((5, 5))
    np.add.at(dense, (r, c), v)
    assert np.allclose(A.toarray(), dense, atol=1e-14)


def test_mass_on_one_right_triangle():
    from immersed_fsi.assembly import _local_mass
    loc = _local_mass(np.array([0.5]))[0]
    assert np.allclose(np.diag(loc), 1 / 12, atol=1e-16)
    assert np.allclose(loc[~np.eye(3, dtype=bool)], 1 / 24, atol=1e-16)


def test_scalar_mass_integrates_constants():
    M = assemble_scalar_mass(build_unit_square(5))
    assert M.sum() == pytest.approx(1.0, abs=1e-14)


def _interp(mesh, fx, fy):
    x, y = mesh.vertices.T
    return np.concatenate([fx(x, y), fy(x, y)])


@pytest.mark.parametrize("n", [2, 5, 8])
def test_rigid_rotation_in_kernel(n):
    mesh = build_unit_square(n)
    _, K_f, _, _ = assemble_fluid_blocks(mesh, FLUID, 0.05)
    v = _interp(mesh, lambda x, y: -y, lambda x, y: x)
    assert np.abs(K_f @ v).max() <= 1e-12
    t = _interp(mesh, lambda x, y: np.ones_like(x), lambda x, y: 2 * np.ones_like(x))
    assert np.abs(K_f @ t).max() <= 1e-12


def test_stabilization_row_sums():
    mesh = build_unit_square(6)
    _, _, _, S = assemble_fluid_blocks(mesh, FLUID, 0.05)
    assert np.abs(S @ np.ones(mesh.n_vertices)).max() <= 1e-13


def test_divergence_of_linear_field():
    """B u = -int div(u) psi_i; for u = (x, y) this is -2 int psi_i."""
    mesh = build_unit_square(4)
    M, _, B, _ = assemble_fluid_blocks(mesh, FLUID, 0.05)
    u = _interp(mesh, lambda x, y: x, lambda x, y: y)
    w = assemble_scalar_mass(mesh) @ np.ones(mesh.n_vertices)
    assert np.allclose(B @ u, -2 * w, atol=1e-14)


def test_strain_energy_of_shear():
    """u = (y, 0): eps = [[0, 1/2], [1/2, 0]], eps:eps = 1/2 over the unit square."""
    mesh = build_unit_square(3)
    _, K_f, _, _ = assemble_fluid_blocks(mesh, FLUID, 0.05)
    u = _interp(mesh, lambda x, y: y, lambda x, y: 0 * x)
    assert u @ K_f @ u == pytest.approx(0.5, abs=1e-13)


def test_fluid_blocks_symmetric_and_definite():
    mesh = build_unit_square(4)
    M, K, _, S = assemble_fluid_blocks(mesh, FLUID, 0.05)
    for A in (M, K, S):
        assert abs(A - A.T).max() <= 1e-13 * abs(A).max()
    assert np.linalg.eigvalsh(M.toarray()).min() > 0
    assert np.linalg.eigvalsh(K.toarray()).min() > -1e-12
    assert np.linalg.eigvalsh(S.toarray()).min() > -1e-14


def test_gamma_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        assemble_fluid_blocks(build_unit_square(2), FLUID, 0.0)


def test_single_segment_mass():
    from immersed_fsi.assembly import _segment_mass
    assert np.allclose(_segment_mass(np.array([2.0]))[0], [[2 / 3, 1 / 3], [1 / 3, 2 / 3]],
                       atol=1e-15)
    seg = build_curve(np.array([[0.2, 0.5], [0.2, 0.7]]), closed=False)
    M, _ = assemble_solid_blocks(seg, SolidModel())
    assert np.allclose(M.toarray()[:2, :2], 0.2 / 6 * np.array([[2, 1], [1, 2]]), atol=1e-16)


def test_unit_segment_stiffness():
    d = 1 / math.sqrt(2)
    seg = build_curve(np.array([[0.1, 0.1], [0.1 + d, 0.1 + d]]), closed=False)
    assert seg.lengths[0] == pytest.approx(1.0, abs=1e-15)
    model = SolidModel(kind="string", lambda0=1.0, lambda1=4.0)
    M, K = assemble_solid_blocks(seg, model)
    tension = (K - model.lambda1 * M).toarray()
    for c in range(2):
        blk = tension[2 * c:2 * c + 2, 2 * c:2 * c + 2]
        assert np.allclose(blk, [[1, -1], [-1, 1]], atol=1e-14)


def test_membrane_stiffness_is_scaled_mass():
    smesh = build_ellipse((0.5, 0.5), 0.2, 0.1, 16)
    M, K = assemble_solid_blocks(smesh, SolidModel(kind="membrane", K_coef=3.5))
    assert abs(K - 3.5 * M).max() == 0.0


def test_coupling_solid_equals_mass():
    smesh = build_ellipse((0.5, 0.5), 0.2, 0.1, 32)
    M, _ = assemble_solid_blocks(smesh, SolidModel())
    L = assemble_coupling_solid(smesh)
    assert abs(L - M).max() <= 1e-14
    assert abs(L - L.T).max() == 0.0


def test_coupling_solid_row_sums_circle():
    smesh = build_ellipse((0.5, 0.5), 0.2, 0.2, 8)
    L = assemble_coupling_solid(smesh).toarray()
    lumped = np.zeros(8)
    for k, (i, j) in enumerate(smesh.segments):
        lumped[i] += smesh.lengths[k] / 2
        lumped[j] += smesh.lengths[k] / 2
    assert np.allclose(L.sum(axis=1), np.concatenate([lumped, lumped]), atol=1e-15)


def _random_curve(rng):
    c = rng.uniform(0.35, 0.65, 2)
    a, b = rng.uniform(0.05, 0.3, 2)
    m = int(rng.choice([8, 13, 16, 32]))
    theta0 = rng.uniform(0, 2 * np.pi)
    theta = theta0 + 2 * np.pi * np.arange(m) / m
    nodes = np.column_stack([c[0] + a * np.cos(theta), c[1] + b * np.sin(theta)])
    return build_curve(nodes, closed=True, max_ratio=np.inf)


def test_coupling_fluid_partition_and_consistency_random():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        n = int(rng.choice([4, 8, 13]))
        fmesh = build_unit_square(n)
        smesh = _random_curve(rng)
        # a displaced current configuration, still inside the square
        phi = smesh.nodes + rng.uniform(-0.02, 0.02, smesh.nodes.shape)
        L_f = assemble_coupling_fluid(fmesh, smesh, phi)
        L_s = assemble_coupling_solid(smesh)
        m, nv = smesh.n_nodes, fmesh.n_vertices
        support = np.zeros(m)
        for k, (i, j) in enumerate(smesh.segments):
            support[i] += smesh.lengths[k]
            support[j] += smesh.lengths[k]
        ones = np.ones(nv)
        for c in range(2):
            block = L_f[c * m:(c + 1) * m, c * nv:(c + 1) * nv]
            assert np.allclose(block @ ones, support / 2, atol=1e-12, rtol=0)
        const = np.array([0.7, -1.3])
        lhs = L_f @ np.repeat(const, nv)
        rhs = L_s @ np.repeat(const, m)
        assert np.abs(lhs - rhs).max() <= 1e-12


def test_coupling_fluid_single_triangle_oracle():
    """Segment inside one triangle: compare with high-order 1D quadrature of the
    product of the analytic fluid hats and the solid hats."""
    fmesh = build_unit_square(4)
    p0, p1 = np.array([0.3, 0.26]), np.array([0.45, 0.28])
    smesh = build_curve(np.array([p0, p1]), closed=False)
    L_f = assemble_coupling_fluid(fmesh, smesh, smesh.nodes).toarray()
    l = smesh.lengths[0]
    s, w = _gl(8)
    x = p0 + s[:, None] * (p1 - p0)
    # cell (1, 1) lower triangle: v00 = (0.25, 0.25), v10 = (0.5, 0.25), v11 = (0.5, 0.5)
    h = 0.25
    X, Y = (x[:, 0] - 0.25) / h, (x[:, 1] - 0.25) / h
    hats = {6: 1 - X, 7: X - Y, 12: Y}
    nv = fmesh.n_vertices
    for j, zeta in enumerate([1 - s, s]):
        for vert, phi in hats.items():
            exact = l * np.sum(w * zeta * phi)
            assert L_f[j, vert] == pytest.approx(exact, abs=1e-14)
            assert L_f[2 + j, nv + vert] == pytest.approx(exact, abs=1e-14)
    assert np.count_nonzero(np.abs(L_f) > 0) == 12


def test_coupling_fluid_uses_reference_arclength():
    """Stretching the current segment leaves the entries tied to the reference
    length: row sums keep equal to the reference half-lengths."""
    fmesh = build_unit_square(8)
    smesh = build_curve(np.array([[0.3, 0.3], [0.4, 0.3]]), closed=False)
    phi = np.array([[0.3, 0.3], [0.5, 0.3]])
    L_f = assemble_coupling_fluid(fmesh, smesh, phi)
    nv = fmesh.n_vertices
    assert np.allclose(L_f[:2, :nv] @ np.ones(nv), [0.05, 0.05], atol=1e-15)


def test_coupling_fluid_outside():
    fmesh = build_unit_square(4)
    smesh = build_ellipse((0.5, 0.5), 0.2, 0.2, 8)
    with pytest.raises(OutOfDomainError):
        assemble_coupling_fluid(fmesh, smesh, smesh.nodes + [0.4, 0.0])


def test_discrete_solid_operator():
    smesh = build_ellipse((0.5, 0.5), 0.2, 0.1, 16)
    M, K = assemble_solid_blocks(smesh, SolidModel())
    assert np.array_equal(apply_discrete_solid_operator(M, K, np.zeros(32)), np.zeros(32))
    Mm, Km = assemble_solid_blocks(smesh, SolidModel(kind="membrane", K_coef=2.5))
    w = np.random.default_rng(0).standard_normal(32)
    assert np.allclose(apply_discrete_solid_operator(Mm, Km, w), 2.5 * w, rtol=1e-13, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_discrete_solid_operator_identity(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 0.4)
    # aspect ratio below 2 keeps equal-angle segments within the quasi-uniformity bound
    smesh = build_ellipse((0.5, 0.5), a, a * rng.uniform(0.5, 1.0), int(rng.integers(8, 40)))
    M, K = assemble_solid_blocks(smesh, SolidModel(lambda0=rng.uniform(0, 3),
                                                   lambda1=rng.uniform(0.1, 20)))
    w = rng.standard_normal(2 * smesh.n_nodes)
    Lw = apply_discrete_solid_operator(M, K, w)
    ref = w @ K @ w
    assert abs(w @ (M @ Lw) - ref) <= 1e-10 * abs(ref)


def test_solid_blocks_symmetric_definite():
    smesh = build_ellipse((0.5, 0.5), 0.2, 0.1, 16)
    M, K = assemble_solid_blocks(smesh, SolidModel())
    for A in (M, K):
        assert abs(A - A.T).max() <= 1e-13 * abs(A).max()
        assert np.linalg.eigvalsh(A.toarray()).min() > 0


def test_solid_model_validation():
    with pytest.raises(InvalidArgumentError):
        SolidModel(rho_s=0)
    with pytest.raises(InvalidArgumentError):
        SolidModel(kind="string", lambda1=0)
    with pytest.raises(InvalidArgumentError):
        SolidModel(kind="membrane", K_coef=0)
    with pytest.raises(InvalidArgumentError):
        SolidModel(kind="plate")
    with pytest.raises(InvalidArgumentError):
        FluidParams(mu=0)


def test_string_from_material():
    model = SolidModel.string_from_material(young=2.0, nu=0.5, radius=0.5, eps=0.1)
    assert model.lambda0 == pytest.approx(2.0 * 0.1 / 3.0)
    assert model.lambda1 == pytest.approx(2.0 * 0.1 / (0.25 * 0.75))


def test_write_coo(tmp_path):
    A = sp.csr_matrix(np.array([[1.0, 0], [0.1, 2]]))
    write_coo(A, tmp_path / "a.txt")
    rows = np.loadtxt(tmp_path / "a.txt", delimiter=",")
    back = sp.coo_matrix((rows[:, 2], (rows[:, 0].astype(int), rows[:, 1].astype(int))), (2, 2))
    assert np.array_equal(back.toarray(), A.toarray())
