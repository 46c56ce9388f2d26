"""Static equilibrium under plasticity, for attached and unattached meshes.

Attached meshes minimize elastic energy plus attachment springs with damped
Newton.  Unattached meshes have a 6-dimensional family of equilibria (any rigid
motion of one is another).  Newton steps are restricted to the complement of the
rigid modes through the augmented known-nullspace system, and the converged
shape is then moved rigidly so the shape-matching centroid and rotation of the
stabilization point set equal the requested (t, R).  Because the elastic energy
is rigid-invariant this lands exactly on the constrained equilibrium.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .constraints import MarkerRows
from .fem import assemble, rigid_modes
from .linalg import KnownNullspaceMatrix, SingularSystemError, factorize
from .material import MaterialParams
from .polar import PolarError, polar, polar_derivatives
from .tetmesh import MaterialPoint, TetMesh, as_points

log = logging.getLogger(__name__)


@dataclass
class EquilibriumState:
    x: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    residual_norm: float = 0.0
    converged: bool = False
    iterations: int = 0
    energy: float = 0.0
    force_tol: float = 0.0


def default_force_tol(mesh: TetMesh, params: MaterialParams, rtol: float = 1e-9) -> float:
    """Force tolerance scaled by the elastic force scale E * diag^2."""
    d = mesh.bbox_diagonal()
    return rtol * params.young_modulus * d * d


# -- stabilization constraints ----------------------------------------------------


class ShapeMatching:
    """Centroid and shape-matching rotation of a weighted material point set D.

    ``centroid(x) = sum_j w_j x_j`` and ``cov(x) = sum_j w_j x_j (X_j - Xbar)^T``
    are linear in x (the subtracted translation drops out because the rest
    offsets sum to zero), with equal weights ``w_j = 1/|D|``.
    """

    def __init__(self, mesh: TetMesh, points):
        if len(points) == 0:
            raise ValueError("stabilization set D must be nonempty")
        self.mesh = mesh
        self.points = list(points)
        k = len(self.points)
        self.weights = np.full(k, 1.0 / k)
        n = mesh.n_vertices
        rows, cols, vals = [], [], []
        for j, p in enumerate(self.points):
            for a, v in enumerate(mesh.tets[p.tet_index]):
                for c in range(3):
                    rows.append(3 * j + c)
                    cols.append(3 * v + c)
                    vals.append(p.barycentric[a])
        self.interp = sp.csr_matrix((vals, (rows, cols)), shape=(3 * k, 3 * n))
        self.rest = self.positions(mesh.rest_positions)
        self.rest_centroid = self.weights @ self.rest
        offsets = self.rest - self.rest_centroid
        # W1: (3, 3n) centroid; W2: (9, 3n) row-major vec of the covariance
        self.W1 = (sp.kron(sp.csr_matrix(self.weights[None, :]), sp.eye(3)) @ self.interp).tocsr()
        w2 = np.einsum("j,ab,jc->acjb", self.weights, np.eye(3), offsets).reshape(9, 3 * k)
        self.W2 = (sp.csr_matrix(w2) @ self.interp).tocsr()

    @classmethod
    def from_vertices(cls, mesh: TetMesh, vertices):
        pts = []
        for v in vertices:
            t, a = np.argwhere(mesh.tets == v)[0]
            w = np.zeros(4)
            w[a] = 1.0
            pts.append(MaterialPoint(int(t), w))
        return cls(mesh, pts)

    def positions(self, x) -> np.ndarray:
        return (self.interp @ np.asarray(x).reshape(-1)).reshape(-1, 3)

    def centroid(self, x) -> np.ndarray:
        return self.W1 @ np.asarray(x).reshape(-1)

    def translation(self, x) -> np.ndarray:
        return self.centroid(x) - self.rest_centroid

    def covariance(self, x) -> np.ndarray:
        return (self.W2 @ np.asarray(x).reshape(-1)).reshape(3, 3)

    def rotation(self, x) -> np.ndarray:
        C = self.covariance(x)
        if np.linalg.det(C) <= 0:
            raise PolarError("shape-matching covariance has det <= 0 (mirrored configuration)")
        return polar(C)[0]

    def residual(self, x, t, R) -> np.ndarray:
        """Stacked (3 + 9,) residual of the centroid and rotation constraints."""
        return np.concatenate([self.translation(x) - t, (self.rotation(x) - R).reshape(9)])

    def jacobian(self, x) -> np.ndarray:
        """(12, 3n) Jacobian: W1 stacked over dR/dF : W2."""
        pd = polar_derivatives(self.covariance(x), order=1)
        return np.vstack([self.W1.toarray(), pd.dR_dF @ self.W2.toarray()])

    def rotation_hessian(self, x) -> np.ndarray:
        """(9, 3n, 3n) Hessian ``W2^T : d2R/dF2 : W2`` (dense; small meshes only)."""
        pd = polar_derivatives(self.covariance(x), order=2)
        W2 = self.W2.toarray()
        return np.einsum("ia,pij,jb->pab", W2, pd.d2R_dF2, W2)

    def gauge_rows(self, x) -> np.ndarray:
        """(6, 3n) linearized gauge conditions: centroid shift and infinitesimal rotation.

        The rotation rows are the axial vector of ``R^T dR``, which carries the
        three independent directions of the 9 rotation-constraint rows.
        """
        pd = polar_derivatives(self.covariance(x), order=1)
        R = pd.R
        dR = (pd.dR_dF @ self.W2.toarray()).reshape(3, 3, -1)
        Om = np.einsum("ji,jkn->ikn", R, dR)
        axial = 0.5 * np.stack([Om[2, 1] - Om[1, 2], Om[0, 2] - Om[2, 0], Om[1, 0] - Om[0, 1]])
        return np.vstack([self.W1.toarray(), axial])

    def align(self, x, t, R) -> np.ndarray:
        """Rigidly move x so that translation(x) = t and rotation(x) = R exactly."""
        p = as_points(x)
        Q = np.asarray(R) @ self.rotation(x).T
        c = self.centroid(x)
        return ((p - c) @ Q.T + self.rest_centroid + np.asarray(t)).reshape(-1)


def stiffness_nullspace(x) -> np.ndarray:
    """Orthonormal translations and infinitesimal rotations about the origin, (3n, 6)."""
    return rigid_modes(x, orthonormal=True)


# -- Newton -----------------------------------------------------------------------


def _potential(mesh, params, s, springs, x, order, project=False):
    st = assemble(mesh, params, x, s, order=order, project=project, with_M=False)
    E, g = st.energy, st.grad_x
    if springs is not None and springs.count:
        E += springs.energy(x)
        g = g + springs.gradient(x)
    K = None
    if order >= 2:
        K = st.K
        if springs is not None and springs.count:
            K = (K + springs.hessian()).tocsr()
    return E, g, K


def _newton_direction(K, g, modes):
    if modes is None:
        d = -factorize(K).solve(g)
    else:
        A = KnownNullspaceMatrix(K, modes, check=False)
        d, _ = A.kkt_solve(-A.project_range(g))
    if not np.all(np.isfinite(d)):
        raise SingularSystemError("non-finite Newton direction")
    return d


def _minimize(mesh, params, s, springs, x0, force_tol, max_iter, rigid_free):
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    E, g, _ = _potential(mesh, params, s, springs, x, order=1)
    # energy differences below this are summation round-off
    e_floor = 1e-12 * params.mu * float(mesh.rest_volume.sum())
    gnorm = float(np.linalg.norm(g))
    it = 0
    for it in range(1, max_iter + 1):
        if gnorm <= force_tol:
            return x, E, gnorm, True, it - 1
        modes = rigid_modes(x) if rigid_free else None
        d = None
        for project in (False, True):
            _, _, K = _potential(mesh, params, s, springs, x, order=2, project=project)
            try:
                cand = _newton_direction(K, g, modes)
            except SingularSystemError:
                continue
            if g @ cand < 0:
                d = cand
                break
        if d is None:
            d = -g / max(float(np.abs(K.diagonal()).max()), 1e-300)
        slope = float(g @ d)
        step = 1.0
        accepted = False
        while step > 1e-12:
            xn = x + step * d
            En, gn, _ = _potential(mesh, params, s, springs, xn, order=1)
            gn_norm = float(np.linalg.norm(gn))
            if En <= E + 1e-4 * step * slope:
                accepted = True
            elif gn_norm < gnorm and En - E <= e_floor + 1e-10 * abs(E):
                # energy differences are below round-off; trust the residual
                accepted = True
            if accepted:
                break
            step *= 0.5
        if not accepted:
            log.warning("equilibrium line search stalled at |f| = %.3e", gnorm)
            return x, E, gnorm, gnorm <= force_tol, it
        x, E, g, gnorm = xn, En, gn, gn_norm
    return x, E, gnorm, gnorm <= force_tol, it


def static_solve_attached(mesh: TetMesh, params: MaterialParams, s, springs: MarkerRows, x0=None,
                          force_tol: float | None = None, max_iter: int = 100) -> EquilibriumState:
    """Equilibrium of elastic plus attachment spring forces (net force zero)."""
    if springs is None or springs.count < 3:
        raise ValueError("attached solve needs at least three attachments")
    tol = default_force_tol(mesh, params) if force_tol is None else force_tol
    x0 = mesh.rest_positions if x0 is None else x0
    x, E, r, ok, it = _minimize(mesh, params, s, springs, x0, tol, max_iter, rigid_free=False)
    if not ok:
        log.warning("attached equilibrium did not converge: |f_net| = %.3e > %.3e", r, tol)
    return EquilibriumState(x=x, residual_norm=r, converged=ok, iterations=it, energy=E, force_tol=tol)


def static_solve_unattached(mesh: TetMesh, params: MaterialParams, s, target_t, target_R, stabilizer: ShapeMatching,
                            x0=None, force_tol: float | None = None, max_iter: int = 100) -> EquilibriumState:
    """Elastic equilibrium with the stabilizer's centroid at t and rotation at R."""
    target_R = np.asarray(target_R, dtype=float)
    if abs(np.linalg.det(target_R) - 1.0) > 1e-8 or np.abs(target_R.T @ target_R - np.eye(3)).max() > 1e-8:
        raise ValueError("target rotation must be a proper rotation")
    tol = default_force_tol(mesh, params) if force_tol is None else force_tol
    x0 = mesh.rest_positions if x0 is None else x0
    x, E, r, ok, it = _minimize(mesh, params, s, None, x0, tol, max_iter, rigid_free=True)
    x = stabilizer.align(x, target_t, target_R)
    if not ok:
        log.warning("unattached equilibrium did not converge: |f_e| = %.3e > %.3e", r, tol)
    return EquilibriumState(
        x=x, translation=np.asarray(target_t, float).copy(), rotation=target_R.copy(),
        residual_norm=r, converged=ok, iterations=it, energy=E, force_tol=tol,
    )
