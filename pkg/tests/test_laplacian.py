import numpy as np
import pytest
from hypothesis import given, strategies as st

from plasticshape import fixtures, laplacian
from plasticshape.material import fp_from_s
from plasticshape.validation.synthetic import constant_field


@pytest.mark.parametrize("mesh", [fixtures.two_tets(), fixtures.cube5(), fixtures.box(2, 1, 1)])
def test_dense_nullspace_is_six_dimensional(mesh):
    lap = laplacian.build(mesh)
    L = lap.matrix().toarray()
    ev = np.linalg.eigvalsh(L)
    assert np.sum(np.abs(ev) <= 1e-10) == 6
    assert np.sort(np.abs(ev))[6] > 1e-6
    np.testing.assert_allclose(L @ lap.nullspace, 0, atol=1e-14)


def test_constant_field_exactly_zero():
    mesh = fixtures.beam()
    lap = laplacian.build(mesh)
    s = constant_field(mesh, [[1.3, 0.1, 0.2], [0.1, 0.85, 0.05], [0.2, 0.05, 1.1]])
    assert np.all(laplacian.apply(lap, s) == 0.0)
    np.testing.assert_allclose(lap.matrix() @ s, 0.0, atol=1e-14)


def test_scalar_laplacian_of_two_tets():
    lap = laplacian.build(fixtures.two_tets())
    np.testing.assert_array_equal(lap.scalar_laplacian.toarray(), [[1, -1], [-1, 1]])


@given(st.integers(0, 10_000))
def test_smoothness_matches_frobenius_differences(seed):
    # |L s|^2 for two tets equals 2 |Fp_0 - Fp_1|_F^2 (row i of L is Fp_i - Fp_j)
    rng = np.random.default_rng(seed)
    mesh = fixtures.two_tets()
    lap = laplacian.build(mesh)
    s = rng.normal(size=12)
    d = fp_from_s(s[:6]) - fp_from_s(s[6:])
    assert laplacian.smoothness(lap, s) == pytest.approx(2 * np.sum(d * d), rel=1e-12)


@given(st.integers(0, 10_000))
def test_apply_matches_matrix(seed):
    mesh = fixtures.cube5()
    lap = laplacian.build(mesh)
    s = np.random.default_rng(seed).normal(size=6 * mesh.n_tets)
    np.testing.assert_allclose(laplacian.apply(lap, s), lap.matrix() @ s, atol=1e-12)
    np.testing.assert_allclose(lap.squared() @ s, lap.matrix() @ (lap.matrix() @ s), atol=1e-11)


def test_base_matrix_solve_matches_dense():
    mesh = fixtures.cube5()
    lap = laplacian.build(mesh)
    B = laplacian.base_matrix(lap, 2.0)
    h = np.random.default_rng(0).normal(size=6 * mesh.n_tets)
    dense = 2.0 * lap.squared().toarray() - lap.nullspace @ lap.nullspace.T
    np.testing.assert_allclose(B.dense(), dense, atol=1e-12)
    np.testing.assert_allclose(B.solve(h), np.linalg.solve(dense, h), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(B.matvec(h), dense @ h, atol=1e-12)
