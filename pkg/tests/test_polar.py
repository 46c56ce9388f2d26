import numpy as np
import pytest
from hypothesis import given, strategies as st

from plasticshape.polar import PolarError, best_rotation, kronecker_sum, polar, polar_derivatives, sylvester_residual
from plasticshape.validation import fdcheck


@given(st.integers(0, 10_000))
def test_polar_factors(seed):
    F = fdcheck.random_F(np.random.default_rng(seed), 0.5)
    R, S = polar(F)
    np.testing.assert_allclose(R @ S, F, atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(S, S.T, atol=1e-13)
    assert np.linalg.eigvalsh(S).min() > 0


def test_polar_of_rotation_times_spd():
    c, s = np.cos(0.7), np.sin(0.7)
    Q = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    S0 = np.array([[2.0, 0.3, 0], [0.3, 1.0, 0.1], [0, 0.1, 0.5]])
    R, S = polar(Q @ S0)
    np.testing.assert_allclose(R, Q, atol=1e-13)
    np.testing.assert_allclose(S, S0, atol=1e-13)


def test_reflection_rejected():
    with pytest.raises(PolarError):
        polar(np.diag([1.0, 1.0, -1.0]))


def test_kronecker_sum_row_major():
    S = np.array([[2.0, 0.3, 0], [0.3, 1.0, 0.1], [0, 0.1, 0.5]])
    X = np.arange(9.0).reshape(3, 3)
    np.testing.assert_allclose(kronecker_sum(S) @ X.reshape(9), (X @ S + S @ X).reshape(9))


def test_identity_derivatives():
    pd = polar_derivatives(np.eye(3), order=2)
    # at F = I: dS = sym(dF), dR = skew(dF)
    for i in range(9):
        E = np.zeros(9)
        E[i] = 1
        E = E.reshape(3, 3)
        np.testing.assert_allclose(pd.dS_dF[:, i].reshape(3, 3), 0.5 * (E + E.T), atol=1e-14)
        np.testing.assert_allclose(pd.dR_dF[:, i].reshape(3, 3), 0.5 * (E - E.T), atol=1e-14)


def test_finite_differences_spot():
    rng = np.random.default_rng(3)
    for _ in range(5):
        errs = fdcheck.polar_errors(fdcheck.random_F(rng, 0.5))
        assert max(errs["dR_dF"], errs["dS_dF"]) <= 1e-6
        assert max(errs["d2R_dF2"], errs["d2S_dF2"]) <= 1e-5
        assert errs["sylvester"] <= 1e-10


@given(st.integers(0, 10_000))
def test_sylvester_identity(seed):
    F = fdcheck.random_F(np.random.default_rng(seed), 0.5)
    assert sylvester_residual(polar_derivatives(F), F) <= 1e-10


def test_best_rotation_recovers_rigid_motion(rng):
    src = rng.normal(size=(10, 3))
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    Q *= np.sign(np.linalg.det(Q))
    t = rng.normal(size=3)
    Qf, c = best_rotation(src, src @ Q.T + t)
    np.testing.assert_allclose(Qf, Q, atol=1e-12)
    np.testing.assert_allclose(c, t, atol=1e-12)
