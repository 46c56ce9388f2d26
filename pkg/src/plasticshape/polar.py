"""Polar decomposition F = R S and its first and second derivatives w.r.t. entries of F.

Derivatives of S solve Sylvester equations ``dS S + S dS = C``.  With row-major
vectorization ``vec(X S) = (I kron S) vec(X)`` and ``vec(S X) = (S kron I) vec(X)``
for symmetric S, so ``vec(dS) = (S kron I + I kron S)^{-1} vec(C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PolarError(ValueError):
    """Raised when det(F) <= 0: the rotation factor would be a reflection."""


def polar(F):
    """Return (R, S) with S the SPD square root of F^T F and R = F S^{-1}."""
    F = np.asarray(F, dtype=float)
    if np.linalg.det(F) <= 0:
        raise PolarError(f"polar decomposition needs det(F) > 0, got {np.linalg.det(F):.3e}")
    w, q = np.linalg.eigh(F.T @ F)
    sq = np.sqrt(w)
    S = (q * sq) @ q.T
    R = F @ ((q / sq) @ q.T)
    return R, S


def kronecker_sum(S) -> np.ndarray:
    eye = np.eye(3)
    return np.kron(S, eye) + np.kron(eye, S)


def _unit(i):
    E = np.zeros(9)
    E[i] = 1.0
    return E.reshape(3, 3)


@dataclass
class PolarDerivatives:
    """R, S and derivatives; ``dR_dF[p, i] = d vec(R)[p] / d vec(F)[i]``."""

    R: np.ndarray
    S: np.ndarray
    dR_dF: np.ndarray
    dS_dF: np.ndarray
    d2R_dF2: np.ndarray | None = None  # [p, i, j]
    d2S_dF2: np.ndarray | None = None


def polar_derivatives(F, order: int = 1) -> PolarDerivatives:
    F = np.asarray(F, dtype=float)
    R, S = polar(F)
    Sinv = np.linalg.inv(S)
    ks_inv = np.linalg.inv(kronecker_sum(S))
    E = [_unit(i) for i in range(9)]
    dS = []
    dR = []
    for Ei in E:
        c = Ei.T @ F + F.T @ Ei
        dSi = (ks_inv @ c.reshape(9)).reshape(3, 3)
        dS.append(dSi)
        dR.append((Ei - R @ dSi) @ Sinv)
    out = PolarDerivatives(
        R, S,
        np.stack([d.reshape(9) for d in dR], axis=1),
        np.stack([d.reshape(9) for d in dS], axis=1),
    )
    if order < 2:
        return out
    d2R = np.empty((9, 9, 9))
    d2S = np.empty((9, 9, 9))
    for i in range(9):
        for j in range(i, 9):
            c = E[i].T @ E[j] + E[j].T @ E[i] - dS[i] @ dS[j] - dS[j] @ dS[i]
            d2Sij = (ks_inv @ c.reshape(9)).reshape(3, 3)
            d2Rij = (-R @ d2Sij - dR[j] @ dS[i] - dR[i] @ dS[j]) @ Sinv
            d2S[:, i, j] = d2S[:, j, i] = d2Sij.reshape(9)
            d2R[:, i, j] = d2R[:, j, i] = d2Rij.reshape(9)
    out.d2R_dF2 = d2R
    out.d2S_dF2 = d2S
    return out


def sylvester_residual(pd: PolarDerivatives, F) -> float:
    """max_i |dS_i S + S dS_i - d(F^T F)/dF_i|."""
    F = np.asarray(F, dtype=float)
    worst = 0.0
    for i in range(9):
        Ei = _unit(i)
        dSi = pd.dS_dF[:, i].reshape(3, 3)
        r = dSi @ pd.S + pd.S @ dSi - (Ei.T @ F + F.T @ Ei)
        worst = max(worst, float(np.abs(r).max()))
    return worst


def best_rotation(src, dst, weights=None):
    """Rigid (Q, c) minimizing sum w |Q src + c - dst|^2 (Kabsch, proper rotation)."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    w = np.full(src.shape[0], 1.0 / src.shape[0]) if weights is None else np.asarray(weights, float) / np.sum(weights)
    cs = w @ src
    cd = w @ dst
    cov = ((dst - cd) * w[:, None]).T @ (src - cs)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    Q = u @ np.diag([1.0, 1.0, d]) @ vt
    return Q, cd - Q @ cs
