"""Stable neo-Hookean elasticity under multiplicative plasticity.

Each tet carries a symmetric plastic deformation gradient ``F_p`` packed into
six numbers ``s = (s1..s6)``::

    F_p = [[s1, s2, s3],
           [s2, s4, s5],
           [s3, s5, s6]]

The per-tet energy is ``V(F_p) * psi(F F_p^{-1})`` with ``V = det(F_p) V0``.
``psi`` is the stable neo-Hookean density (Smith, de Goes, Kim 2018) with its
additive constant removed so that the rest state carries no energy or stress::

    psi(F) = mu/2 (tr(F^T F) - 3) - mu (J - 1) + lam_s/2 (J - 1)^2,   J = det F

and ``lam_s = lambda + mu`` so that the small-strain limit reproduces linear
elasticity with the Lame parameters derived from (E, nu).

Matrices are vectorized row-major: ``vec(A)[3*i + j] = A[i, j]``.  Vertex
derivatives are ordered ``(vertex a, coordinate c) -> 3*a + c``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# vec(F_p) = Y @ s
Y = np.zeros((9, 6))
for _k, _entries in enumerate([[(0, 0)], [(0, 1), (1, 0)], [(0, 2), (2, 0)], [(1, 1)], [(1, 2), (2, 1)], [(2, 2)]]):
    for _i, _j in _entries:
        Y[3 * _i + _j, _k] = 1.0

IDENTITY_S = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 1.0])

_LEVI = np.zeros((3, 3, 3))
for _a, _b, _c in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
    _LEVI[_a, _b, _c] = 1.0
    _LEVI[_a, _c, _b] = -1.0


class PlasticityError(ValueError):
    """Plastic deformation gradient outside the symmetric positive definite domain."""


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = 1e5
    poisson_ratio: float = 0.45

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")

    @property
    def mu(self) -> float:
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.young_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def lam_snh(self) -> float:
        return self.lam + self.mu


# -- parameterization ------------------------------------------------------------


def fp_from_s(s) -> np.ndarray:
    """Symmetric F_p from packed parameters; accepts (6,) or (m, 6)."""
    s = np.asarray(s, dtype=float)
    return (s.reshape(-1, 6) @ Y.T).reshape(s.shape[:-1] + (3, 3))


def s_from_fp(fp) -> np.ndarray:
    """Pack the symmetric part of F_p; inverse of :func:`fp_from_s` on symmetric input."""
    fp = np.asarray(fp, dtype=float)
    sym = 0.5 * (fp + np.swapaxes(fp, -1, -2))
    return np.stack(
        [sym[..., 0, 0], sym[..., 0, 1], sym[..., 0, 2], sym[..., 1, 1], sym[..., 1, 2], sym[..., 2, 2]], axis=-1
    )


def identity_field(m: int) -> np.ndarray:
    return np.tile(IDENTITY_S, m)


def clamp_spd(s6, floor: float = 0.01):
    """Raise eigenvalues of F_p(s6) below ``floor`` to ``floor``.

    Returns the repacked parameters and whether any eigenvalue was changed.
    """
    s_new, flags = clamp_field(np.asarray(s6, dtype=float).reshape(1, 6), floor)
    return s_new.reshape(6), bool(flags[0])


def clamp_field(s, floor: float = 0.01):
    """Vectorized :func:`clamp_spd` over a (m, 6) or flat (6m,) field.

    Returns the clamped field (same shape) and a per-tet boolean mask.
    """
    if floor <= 0:
        raise ValueError("clamp floor must be positive")
    s = np.asarray(s, dtype=float)
    blocks = s.reshape(-1, 6)
    evals, evecs = np.linalg.eigh(fp_from_s(blocks))
    low = evals < floor
    flags = low.any(axis=1)
    out = blocks.copy()
    if np.any(flags):
        ev = np.where(low, floor, evals)[flags]
        q = evecs[flags]
        out[flags] = s_from_fp(np.einsum("tij,tj,tkj->tik", q, ev, q))
    return out.reshape(s.shape), flags


def check_spd(fp) -> None:
    evals = np.linalg.eigvalsh(np.asarray(fp).reshape(-1, 3, 3))
    bad = np.flatnonzero(evals.min(axis=1) <= 0)
    if bad.size:
        raise PlasticityError(f"F_p is not positive definite in tets {bad.tolist()[:20]}")


# -- density ---------------------------------------------------------------------


def _cofactor(F):
    return np.stack(
        [np.cross(F[..., 1, :], F[..., 2, :]), np.cross(F[..., 2, :], F[..., 0, :]), np.cross(F[..., 0, :], F[..., 1, :])],
        axis=-2,
    )


def _det_hessian(F):
    """d^2 det(F) / dF dF as (..., 9, 9)."""
    h = np.einsum("ikp,jlq,...pq->...ijkl", _LEVI, _LEVI, F)
    return h.reshape(F.shape[:-2] + (9, 9))


def density(params: MaterialParams, F, order: int = 2):
    """psi, P = dpsi/dF and (order 2) dP/dF for a batch of (.., 3, 3) gradients."""
    F = np.asarray(F, dtype=float)
    mu, lam = params.mu, params.lam_snh
    J = np.linalg.det(F)
    ic = np.einsum("...ij,...ij->...", F, F)
    psi = 0.5 * mu * (ic - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2
    cof = _cofactor(F)
    P = mu * F + (lam * (J - 1.0) - mu)[..., None, None] * cof
    if order < 2:
        return psi, P, None
    c = cof.reshape(F.shape[:-2] + (9,))
    dP = mu * np.eye(9) + lam * np.einsum("...i,...j->...ij", c, c)
    dP = dP + (lam * (J - 1.0) - mu)[..., None, None] * _det_hessian(F)
    return psi, P, dP


def project_psd(H):
    """Clamp negative eigenvalues of a batch of symmetric matrices to zero."""
    w, q = np.linalg.eigh(H)
    return np.einsum("...ij,...j,...kj->...ik", q, np.maximum(w, 0.0), q)


# -- per-tet energy and derivatives ------------------------------------------------


def tet_energy(params: MaterialParams, F, s6, V0) -> float:
    """Energy ``det(F_p) V0 psi(F F_p^{-1})`` of one tet."""
    fp = fp_from_s(s6)
    check_spd(fp)
    psi, _, _ = density(params, np.asarray(F) @ np.linalg.inv(fp), order=1)
    return float(np.linalg.det(fp) * V0 * psi)


@dataclass
class EnergyDerivatives:
    """Per-tet energy and derivatives; arrays carry a leading tet axis when batched."""

    energy: np.ndarray
    grad_x: np.ndarray
    grad_s: np.ndarray
    hess_xx: np.ndarray | None = None
    hess_xs: np.ndarray | None = None
    hess_ss: np.ndarray | None = None


def element_derivatives(params: MaterialParams, F, shape_gradients, s, V0, order: int = 2, project: bool = False,
                        blocks=("xx", "xs", "ss")) -> EnergyDerivatives:
    """Batched energy derivatives for m tets.

    Parameters
    ----------
    F : (m, 3, 3)
        Deformation gradients of the current configuration.
    shape_gradients : (m, 4, 3)
        ``dF/dx`` factors: ``F = sum_a x_a g_a^T``.
    s : (m, 6) or flat (6m,)
        Plastic parameters.
    V0 : (m,)
    order : 1 or 2
    project : bool
        Replace ``dP/dF_e`` by its PSD projection in ``hess_xx`` (Newton safeguard).
    blocks : which second-derivative blocks to compute.
    """
    F = np.asarray(F, dtype=float).reshape(-1, 3, 3)
    m = F.shape[0]
    s = np.asarray(s, dtype=float).reshape(m, 6)
    fp = fp_from_s(s)
    check_spd(fp)
    G = np.linalg.inv(fp)
    detp = np.linalg.det(fp)
    V = detp * V0
    Fe = F @ G
    psi, P, dP = density(params, Fe, order=order)
    Pv = P.reshape(m, 9)

    h = np.einsum("tak,tkj->taj", shape_gradients, G)  # dFe/dx factors
    eye3 = np.eye(3)
    # D_x[(i,j),(a,c)] = delta_ic h[a,j]
    Dx = np.einsum("ic,taj->tijac", eye3, h).reshape(m, 9, 12)
    # D_p[(i,j),(k,l)] = -Fe[i,k] G[l,j]
    Dp = -np.einsum("tik,tlj->tijkl", Fe, G).reshape(m, 9, 9)
    dV = V0[:, None] * _cofactor(fp).reshape(m, 9)

    gx = V[:, None] * np.einsum("tpi,tp->ti", Dx, Pv)
    DpP = np.einsum("tpi,tp->ti", Dp, Pv)
    gp = V[:, None] * DpP + psi[:, None] * dV
    out = EnergyDerivatives(energy=V * psi, grad_x=gx, grad_s=gp @ Y)
    if order < 2:
        return out

    if "xx" in blocks:
        dPx = project_psd(dP) if project else dP
        out.hess_xx = V[:, None, None] * np.einsum("tpi,tpq,tqj->tij", Dx, dPx, Dx)
    if "xs" in blocks:
        # sum_ij P_ij d2Fe_ij/dx_ac dFp_kl = -(P G^T)[c,l] h[a,k]
        PGt = np.einsum("tij,tlj->til", P, G)
        tx = -np.einsum("tcl,tak->tackl", PGt, h).reshape(m, 12, 9)
        hxp = V[:, None, None] * (np.einsum("tpi,tpq,tqj->tij", Dx, dP, Dp) + tx)
        hxp += np.einsum("ti,tj->tij", gx / V[:, None], dV)
        out.hess_xs = hxp @ Y
    if "ss" in blocks:
        # sum_ij P_ij d2Fe_ij/dFp_kl dFp_pq = N[k,q] G[l,p] + N[p,l] G[q,k], N = Fe^T P G^T
        N = np.einsum("tik,tij,tqj->tkq", Fe, P, G)
        tp = np.einsum("tkq,tlp->tklpq", N, G) + np.einsum("tpl,tqk->tklpq", N, G)
        hpp = V[:, None, None] * (np.einsum("tpi,tpq,tqj->tij", Dp, dP, Dp) + tp.reshape(m, 9, 9))
        hpp += np.einsum("ti,tj->tij", dV, DpP) + np.einsum("ti,tj->tij", DpP, dV)
        hpp += (psi * V0)[:, None, None] * _det_hessian(fp)
        out.hess_ss = Y.T @ hpp @ Y
    return out


def tet_derivatives(params: MaterialParams, x_tet, rest_shape_inverse, s6, V0, order: int = 2) -> EnergyDerivatives:
    """Derivatives of one tet's energy w.r.t. its 4 vertex positions (12) and s (6)."""
    x_tet = np.asarray(x_tet, dtype=float).reshape(4, 3)
    g = np.empty((1, 4, 3))
    g[0, 1:] = rest_shape_inverse
    g[0, 0] = -np.asarray(rest_shape_inverse).sum(axis=0)
    F = np.einsum("ai,taj->tij", x_tet, g)
    d = element_derivatives(params, F, g, np.asarray(s6).reshape(1, 6), np.array([float(V0)]), order=order)
    return EnergyDerivatives(
        energy=float(d.energy[0]),
        grad_x=d.grad_x[0],
        grad_s=d.grad_s[0],
        hess_xx=None if d.hess_xx is None else d.hess_xx[0],
        hess_xs=None if d.hess_xs is None else d.hess_xs[0],
        hess_ss=None if d.hess_ss is None else d.hess_ss[0],
    )
