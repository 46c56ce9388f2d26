"""Central finite-difference checks of the analytic energy and polar derivatives.

Each block is compared at a ladder of step sizes and the best step is kept
(truncation error falls and round-off rises as h shrinks).  Errors are relative
to the larger of the analytic and finite-difference norms.
"""
from __future__ import annotations

import numpy as np

from ..material import MaterialParams, fp_from_s, s_from_fp, tet_derivatives
from ..polar import polar, polar_derivatives, sylvester_residual

MATERIAL_BLOCKS = ("grad_x", "grad_s", "hess_xx", "hess_xs", "hess_ss")
POLAR_BLOCKS = ("dR_dF", "dS_dF", "d2R_dF2", "d2S_dF2")
STEPS = 10.0 ** -np.arange(3.0, 7.0)


def central_jacobian(fun, v, h: float) -> np.ndarray:
    """(out..., len(v)) central differences of ``fun`` at ``v``."""
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        cols.append((np.asarray(fun(v + e)) - np.asarray(fun(v - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(analytic, approx, floor: float = 1e-300) -> float:
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(approx, dtype=float)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def best_step_error(analytic, fun, v, scale: float = 1.0, floor: float = 1e-300) -> float:
    return min(relative_error(analytic, central_jacobian(fun, v, h * scale), floor) for h in STEPS)


# -- random states ----------------------------------------------------------------------


def random_tet(rng) -> np.ndarray:
    """Well-shaped positively oriented tet: perturbed regular tet of unit-ish size."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / (2 * np.sqrt(2))
    v = v + 0.1 * rng.normal(size=v.shape)
    if np.linalg.det((v[1:] - v[0]).T) < 0:
        v[[2, 3]] = v[[3, 2]]
    return v


def random_spd(rng, spread: float = 0.3) -> np.ndarray:
    A = rng.normal(size=(3, 3))
    fp = np.eye(3) + spread * 0.5 * (A + A.T)
    w, q = np.linalg.eigh(fp)
    return (q * np.clip(w, 0.3, None)) @ q.T


def random_F(rng, spread: float = 0.3) -> np.ndarray:
    while True:
        F = np.eye(3) + spread * rng.normal(size=(3, 3))
        if np.linalg.det(F) > 0.1:
            return F


def random_material_state(rng):
    X = random_tet(rng)
    Dm = (X[1:] - X[0]).T
    V0 = abs(np.linalg.det(Dm)) / 6.0
    x = X @ random_F(rng, 0.2).T + 0.05 * rng.normal(size=(4, 3))
    if np.linalg.det((x[1:] - x[0]).T) <= 0:
        x = X.copy()
    return np.linalg.inv(Dm), V0, x.reshape(12), s_from_fp(random_spd(rng))


# -- suites -----------------------------------------------------------------------------


def material_errors(params: MaterialParams, Dm_inv, V0, x, s) -> dict:
    """Best-step relative error of each energy derivative block at one state."""
    d = tet_derivatives(params, x, Dm_inv, s, V0, order=2)
    # absolute floor keeps rest-state zero blocks from dividing by round-off
    floor = 1e-9 * params.young_modulus * V0

    def energy_x(v):
        return tet_derivatives(params, v, Dm_inv, s, V0, order=1).energy

    def energy_s(v):
        return tet_derivatives(params, x, Dm_inv, v, V0, order=1).energy

    def gx_x(v):
        return tet_derivatives(params, v, Dm_inv, s, V0, order=1).grad_x

    def gx_s(v):
        return tet_derivatives(params, x, Dm_inv, v, V0, order=1).grad_x

    def gs_s(v):
        return tet_derivatives(params, x, Dm_inv, v, V0, order=1).grad_s

    return {
        "grad_x": best_step_error(d.grad_x, energy_x, x, floor=floor),
        "grad_s": best_step_error(d.grad_s, energy_s, s, floor=floor),
        "hess_xx": best_step_error(d.hess_xx, gx_x, x, floor=floor),
        "hess_xs": best_step_error(d.hess_xs, gx_s, s, floor=floor),
        "hess_ss": best_step_error(d.hess_ss, gs_s, s, floor=floor),
    }


def polar_errors(F) -> dict:
    F = np.asarray(F, dtype=float)
    pd = polar_derivatives(F, order=2)
    f = F.reshape(9)

    def R_of(v):
        return polar(v.reshape(3, 3))[0].reshape(9)

    def S_of(v):
        return polar(v.reshape(3, 3))[1].reshape(9)

    def dR_of(v):
        return polar_derivatives(v.reshape(3, 3)).dR_dF

    def dS_of(v):
        return polar_derivatives(v.reshape(3, 3)).dS_dF

    return {
        "dR_dF": best_step_error(pd.dR_dF, R_of, f),
        "dS_dF": best_step_error(pd.dS_dF, S_of, f),
        "d2R_dF2": best_step_error(pd.d2R_dF2, dR_of, f),
        "d2S_dF2": best_step_error(pd.d2S_dF2, dS_of, f),
        "sylvester": sylvester_residual(pd, F),
    }


def _worst(rows) -> dict:
    out = {}
    for r in rows:
        for k, v in r.items():
            out[k] = max(out.get(k, 0.0), v)
    return out


def run_material_suite(seed: int = 0, trials: int = 100, params: MaterialParams | None = None) -> dict:
    params = params or MaterialParams()
    rng = np.random.default_rng(seed)
    return _worst(material_errors(params, *random_material_state(rng)) for _ in range(trials))


def run_rest_state_check(params: MaterialParams | None = None) -> dict:
    """Gradients at the undeformed state with identity plasticity, relative to E V0."""
    params = params or MaterialParams()
    X = random_tet(np.random.default_rng(0))
    Dm = (X[1:] - X[0]).T
    V0 = abs(np.linalg.det(Dm)) / 6.0
    d = tet_derivatives(params, X.reshape(12), np.linalg.inv(Dm), s_from_fp(np.eye(3)), V0, order=1)
    scale = params.young_modulus * V0
    return {"rest_energy": abs(d.energy) / scale, "rest_grad_x": float(np.abs(d.grad_x).max()) / scale,
            "rest_grad_s": float(np.abs(d.grad_s).max()) / scale}


def run_polar_suite(seed: int = 0, trials: int = 50) -> dict:
    rng = np.random.default_rng(seed)
    return _worst(polar_errors(random_F(rng, 0.5)) for _ in range(trials))


__all__ = [
    "central_jacobian", "relative_error", "best_step_error", "material_errors", "polar_errors",
    "run_material_suite", "run_polar_suite", "run_rest_state_check", "random_material_state", "random_F",
    "random_spd", "MATERIAL_BLOCKS", "POLAR_BLOCKS", "fp_from_s",
]
