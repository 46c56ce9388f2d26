import numpy as np
import pytest
from hypothesis import given, strategies as st

from plasticshape.material import (
    IDENTITY_S,
    MaterialParams,
    PlasticityError,
    Y,
    clamp_field,
    clamp_spd,
    density,
    fp_from_s,
    s_from_fp,
    tet_derivatives,
    tet_energy,
)
from plasticshape.validation import fdcheck


def _rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


def _snh(params, F):
    # straight transcription of the density, independent of the batched code
    J = np.linalg.det(F)
    mu, lam = params.mu, params.lam + params.mu
    return mu / 2 * (np.trace(F.T @ F) - 3) - mu * (J - 1) + lam / 2 * (J - 1) ** 2


def test_lame_parameters():
    p = MaterialParams(1e5, 0.45)
    assert p.mu == pytest.approx(1e5 / 2.9)
    assert p.lam == pytest.approx(1e5 * 0.45 / (1.45 * 0.1))


def test_invalid_params():
    with pytest.raises(ValueError):
        MaterialParams(-1.0, 0.3)
    with pytest.raises(ValueError):
        MaterialParams(1.0, 0.5)


def test_packing():
    s = np.array([1.0, 2, 3, 4, 5, 6])
    fp = fp_from_s(s)
    np.testing.assert_array_equal(fp, [[1, 2, 3], [2, 4, 5], [3, 5, 6]])
    np.testing.assert_array_equal(Y @ s, fp.reshape(9))
    np.testing.assert_array_equal(s_from_fp(fp), s)
    np.testing.assert_array_equal(fp_from_s(IDENTITY_S), np.eye(3))


def test_rest_state_is_stress_free(params):
    psi, P, _ = density(params, np.eye(3), order=1)
    assert psi == 0.0
    np.testing.assert_array_equal(P, 0.0)


def test_small_strain_limit(params, rng):
    eps = 1e-6 * rng.normal(size=(3, 3))
    eps = 0.5 * (eps + eps.T)
    psi, _, _ = density(params, np.eye(3) + eps, order=1)
    linear = params.mu * np.sum(eps * eps) + 0.5 * params.lam * np.trace(eps) ** 2
    assert psi == pytest.approx(linear, rel=1e-4)


@given(st.integers(0, 10_000))
def test_density_matches_transcription_and_is_frame_indifferent(seed):
    rng = np.random.default_rng(seed)
    params = MaterialParams()
    F = fdcheck.random_F(rng, 0.4)
    psi, _, _ = density(params, F, order=1)
    assert psi == pytest.approx(_snh(params, F), rel=1e-12, abs=1e-9)
    psi_q, _, _ = density(params, _rotation(rng) @ F, order=1)
    assert psi_q == pytest.approx(psi, rel=1e-10, abs=1e-9)


@given(st.integers(0, 10_000))
def test_plastic_shape_is_stress_free(seed):
    rng = np.random.default_rng(seed)
    params = MaterialParams()
    Dm_inv, V0, _, s = fdcheck.random_material_state(rng)
    X = fdcheck.random_tet(np.random.default_rng(seed))
    Dm = np.linalg.inv(Dm_inv)
    # deform so that F = Q F_p: the elastic part is a pure rotation
    F = _rotation(rng) @ fp_from_s(s)
    x = X[0] + np.vstack([np.zeros(3), (F @ Dm).T])
    d = tet_derivatives(params, x, Dm_inv, s, V0, order=1)
    scale = params.young_modulus * V0
    assert abs(d.energy) <= 1e-9 * scale
    assert np.abs(d.grad_x).max() <= 1e-9 * scale
    assert np.abs(d.grad_s).max() <= 1e-9 * scale


def test_energy_scales_with_plastic_volume(params, rng):
    Dm_inv, V0, x, s = fdcheck.random_material_state(rng)
    Dm = np.linalg.inv(Dm_inv)
    X = np.zeros((4, 3))
    X[1:] = Dm.T
    F = (x.reshape(4, 3)[1:] - x.reshape(4, 3)[0]).T @ Dm_inv
    fp = fp_from_s(s)
    expected = np.linalg.det(fp) * V0 * _snh(params, F @ np.linalg.inv(fp))
    assert tet_energy(params, F, s, V0) == pytest.approx(expected, rel=1e-12)


def test_non_spd_rejected(params):
    s = s_from_fp(np.diag([1.0, -0.5, 1.0]))
    with pytest.raises(PlasticityError):
        tet_energy(params, np.eye(3), s, 1.0)


def test_clamp_floor():
    s = s_from_fp(np.diag([2.0, 0.001, -3.0]))
    out, changed = clamp_spd(s, 0.01)
    assert changed
    np.testing.assert_allclose(np.linalg.eigvalsh(fp_from_s(out)), [0.01, 0.01, 2.0], atol=1e-14)
    same, changed = clamp_spd(IDENTITY_S, 0.01)
    assert not changed
    np.testing.assert_array_equal(same, IDENTITY_S)


@given(st.integers(0, 10_000))
def test_clamp_field_property(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(7, 6))
    out, flags = clamp_field(s, 0.05)
    ev = np.linalg.eigvalsh(fp_from_s(out))
    assert ev.min() >= 0.05 - 1e-12
    np.testing.assert_array_equal(out[~flags], s[~flags])


def test_finite_differences_spot(params):
    rng = np.random.default_rng(7)
    for _ in range(5):
        errs = fdcheck.material_errors(params, *fdcheck.random_material_state(rng))
        assert max(errs.values()) <= 1e-5, errs


def test_hessians_symmetric(params, rng):
    Dm_inv, V0, x, s = fdcheck.random_material_state(rng)
    d = tet_derivatives(params, x, Dm_inv, s, V0, order=2)
    np.testing.assert_allclose(d.hess_xx, d.hess_xx.T, rtol=0, atol=1e-9 * np.abs(d.hess_xx).max())
    np.testing.assert_allclose(d.hess_ss, d.hess_ss.T, rtol=0, atol=1e-9 * np.abs(d.hess_ss).max())


def test_translation_invariance(params, rng):
    Dm_inv, V0, x, s = fdcheck.random_material_state(rng)
    d0 = tet_derivatives(params, x, Dm_inv, s, V0, order=2)
    # forces sum to zero and the Hessian annihilates translations
    np.testing.assert_allclose(d0.grad_x.reshape(4, 3).sum(0), 0, atol=1e-9 * np.abs(d0.grad_x).max())
    t = np.tile(np.eye(3), (4, 1))
    assert np.abs(d0.hess_xx @ t).max() <= 1e-9 * np.abs(d0.hess_xx).max()
