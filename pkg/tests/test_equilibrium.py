import numpy as np
import pytest
from hypothesis import given, strategies as st

from plasticshape import fixtures
from plasticshape.constraints import Constraint, ConstraintSet
from plasticshape.equilibrium import (
    ShapeMatching,
    default_force_tol,
    static_solve_attached,
    static_solve_unattached,
)
from plasticshape.fem import assemble, elastic_energy, rigid_modes
from plasticshape.linalg import _sparse_norm
from plasticshape.material import MaterialParams, identity_field, s_from_fp
from plasticshape.validation.fdcheck import central_jacobian, relative_error
from plasticshape.validation.synthetic import _vertex_point, end_vertices, rotation_about, smooth_field


def _state(mesh, seed):
    rng = np.random.default_rng(seed)
    s = smooth_field(mesh, 0.2, seed)
    x = mesh.rest_positions + 0.02 * mesh.bbox_diagonal() * rng.normal(size=3 * mesh.n_vertices)
    return s, x


def test_global_derivatives_match_finite_differences(params):
    mesh = fixtures.cube5(0.05)
    s, x = _state(mesh, 0)
    st_ = assemble(mesh, params, x, s)
    h = 1e-6 * mesh.bbox_diagonal()
    g = central_jacobian(lambda v: elastic_energy(mesh, params, v, s), x, h)
    assert relative_error(st_.grad_x, g) <= 1e-6
    K = central_jacobian(lambda v: assemble(mesh, params, v, s, order=1).grad_x, x, h)
    assert relative_error(st_.K.toarray(), K) <= 1e-6
    M = central_jacobian(lambda v: assemble(mesh, params, x, v, order=1).grad_x, s, 1e-6)
    assert relative_error(st_.M.toarray(), M) <= 1e-6


def test_assembly_is_deterministic(params):
    mesh = fixtures.beam()
    s, x = _state(mesh, 3)
    a = assemble(mesh, params, x, s)
    b = assemble(mesh, params, x, s)
    assert a.energy == b.energy
    assert np.array_equal(a.grad_x, b.grad_x)
    assert (a.K != b.K).nnz == 0


def _pinned(mesh, beta=1e8):
    av = end_vertices(mesh)
    cs = ConstraintSet(attachments=[Constraint(_vertex_point(mesh, int(v)), mesh.vertices_rest[v]) for v in av],
                       beta=beta)
    return cs.attachment_rows(mesh)


def test_identity_plasticity_stays_at_rest(params):
    mesh = fixtures.beam()
    eq = static_solve_attached(mesh, params, identity_field(mesh.n_tets), _pinned(mesh))
    assert eq.converged and eq.iterations == 0
    np.testing.assert_array_equal(eq.x, mesh.rest_positions)


def test_attached_equilibrium_residual(params):
    mesh = fixtures.beam()
    s = smooth_field(mesh, 0.1, 4)
    springs = _pinned(mesh)
    eq = static_solve_attached(mesh, params, s, springs)
    assert eq.converged
    f = assemble(mesh, params, eq.x, s, order=1).grad_x + springs.gradient(eq.x)
    assert np.linalg.norm(f) <= default_force_tol(mesh, params)
    assert eq.residual_norm == pytest.approx(np.linalg.norm(f))


def test_attached_needs_three_attachments(params):
    mesh = fixtures.cube5()
    cs = ConstraintSet(attachments=[Constraint(_vertex_point(mesh, 0), np.zeros(3))])
    with pytest.raises(ValueError):
        static_solve_attached(mesh, params, identity_field(mesh.n_tets), cs.attachment_rows(mesh))


def test_constant_anisotropic_plasticity_unattached(params):
    # spatially constant F_p is reachable with zero energy: the cube just becomes F_p X up to rigid motion
    mesh = fixtures.cube()
    fp = np.diag([2.0, 1.0, 1.0])
    s = np.tile(s_from_fp(fp), mesh.n_tets)
    stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
    R = rotation_about([0, 0, 1], 0.4)
    t = np.array([0.01, -0.02, 0.03])
    eq = static_solve_unattached(mesh, params, s, t, R, stab)
    assert eq.converged
    assert eq.energy <= 1e-12 * params.young_modulus * mesh.rest_volume.sum()
    X = mesh.vertices_rest
    expected = (X - stab.rest_centroid) @ (R @ fp).T + stab.rest_centroid + t
    # shape matching of an axis-aligned stretch of a symmetric point set has no rotation
    np.testing.assert_allclose(eq.x.reshape(-1, 3), expected, atol=1e-9 * mesh.bbox_diagonal())
    np.testing.assert_allclose(stab.translation(eq.x), t, atol=1e-13)
    np.testing.assert_allclose(stab.rotation(eq.x), R, atol=1e-12)


def test_shape_matching_align(rng):
    mesh = fixtures.cube5()
    stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
    x = mesh.rest_positions + 0.05 * rng.normal(size=3 * mesh.n_vertices)
    R = rotation_about([1, 2, 3], 0.9)
    y = stab.align(x, [1.0, 2.0, 3.0], R)
    np.testing.assert_allclose(stab.translation(y), [1, 2, 3], atol=1e-12)
    np.testing.assert_allclose(stab.rotation(y), R, atol=1e-12)
    np.testing.assert_allclose(stab.residual(y, [1, 2, 3], R), 0, atol=1e-12)


def test_shape_matching_jacobian(rng):
    mesh = fixtures.cube5()
    stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
    x = mesh.rest_positions + 0.05 * rng.normal(size=3 * mesh.n_vertices)

    def c(v):
        return np.concatenate([stab.translation(v), stab.rotation(v).reshape(9)])

    assert relative_error(stab.jacobian(x), central_jacobian(c, x, 1e-6)) <= 1e-7


def test_unattached_rejects_improper_rotation(params):
    mesh = fixtures.cube5()
    stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
    with pytest.raises(ValueError):
        static_solve_unattached(mesh, params, identity_field(mesh.n_tets), np.zeros(3), np.diag([1, 1, -1.0]), stab)


@pytest.mark.parametrize("mesh_factory,seed", [(fixtures.beam, 0), (fixtures.cube, 1)])
def test_stiffness_nullspace_at_equilibrium(params, mesh_factory, seed):
    mesh = mesh_factory()
    s = smooth_field(mesh, 0.3, seed)
    stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
    eq = static_solve_unattached(mesh, params, s, np.zeros(3), np.eye(3), stab)
    K = assemble(mesh, params, eq.x, s).K
    r = np.linalg.norm(K @ rigid_modes(eq.x), axis=0)
    assert r.max() <= 1e-7 * _sparse_norm(K)
    # off equilibrium only the translations stay in the nullspace
    xp = eq.x + 1e-2 * mesh.bbox_diagonal() * np.random.default_rng(0).normal(size=eq.x.size)
    K = assemble(mesh, params, xp, s).K
    r = np.linalg.norm(K @ rigid_modes(xp), axis=0)
    assert r[:3].max() <= 1e-7 * _sparse_norm(K)
    assert r[3:].min() > 1e-3 * _sparse_norm(K)


@given(st.floats(0.05, 0.3), st.integers(0, 100))
def test_unattached_equilibrium_is_rigid_invariant(amplitude, seed):
    params = MaterialParams()
    mesh = fixtures.cube5(0.05)
    s = smooth_field(mesh, amplitude, seed)
    stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
    a = static_solve_unattached(mesh, params, s, np.zeros(3), np.eye(3), stab)
    R = rotation_about([0, 1, 1], 1.1)
    b = static_solve_unattached(mesh, params, s, np.ones(3), R, stab)
    assert a.converged and b.converged
    c = stab.rest_centroid
    moved = (a.x.reshape(-1, 3) - c) @ R.T + c + 1.0
    np.testing.assert_allclose(b.x.reshape(-1, 3), moved, atol=1e-9)
    assert b.energy == pytest.approx(a.energy, rel=1e-8, abs=1e-12)
