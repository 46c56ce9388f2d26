"""Global assembly of elastic energy, forces and sparse derivative matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .material import MaterialParams, element_derivatives
from .tetmesh import TetMesh, as_points, deformation_gradients


@dataclass
class ElasticState:
    energy: float
    grad_x: np.ndarray  # dE/dx, (3n,); elastic force is -grad_x
    grad_s: np.ndarray  # dE/ds, (6m,)
    K: sp.csr_matrix | None = None  # d2E/dx2, (3n, 3n)
    M: sp.csr_matrix | None = None  # d2E/dx ds, (3n, 6m)

    @property
    def force(self) -> np.ndarray:
        return -self.grad_x


def _dofs(mesh: TetMesh) -> np.ndarray:
    return (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)


def elastic_energy(mesh: TetMesh, params: MaterialParams, x, s) -> float:
    d = element_derivatives(params, deformation_gradients(mesh, x), mesh.shape_gradients, s, mesh.rest_volume, order=1)
    return float(np.sum(d.energy))


def assemble(mesh: TetMesh, params: MaterialParams, x, s, order: int = 2, project: bool = False,
             with_M: bool = True) -> ElasticState:
    """Sum per-tet energies and derivatives into global arrays.

    Accumulation order is fixed by tet index, so results are reproducible.
    """
    n, m = mesh.n_vertices, mesh.n_tets
    blocks = ("xx", "xs") if with_M else ("xx",)
    d = element_derivatives(
        params, deformation_gradients(mesh, x), mesh.shape_gradients, s, mesh.rest_volume,
        order=order, project=project, blocks=blocks,
    )
    dofs = _dofs(mesh)
    grad_x = np.bincount(dofs.ravel(), weights=d.grad_x.ravel(), minlength=3 * n)
    state = ElasticState(float(np.sum(d.energy)), grad_x, d.grad_s.reshape(-1))
    if order < 2:
        return state
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    K = sp.coo_matrix((d.hess_xx.ravel(), (rows, cols)), shape=(3 * n, 3 * n)).tocsr()
    state.K = 0.5 * (K + K.T)
    if with_M:
        sdofs = 6 * np.arange(m)[:, None] + np.arange(6)
        rows = np.repeat(dofs, 6, axis=1).ravel()
        cols = np.tile(sdofs, (1, 12)).ravel()
        state.M = sp.coo_matrix((d.hess_xs.ravel(), (rows, cols)), shape=(3 * n, 6 * m)).tocsr()
    return state


def rigid_modes(x, orthonormal: bool = True) -> np.ndarray:
    """Translations e_i and infinitesimal rotations e_i x x_j, as columns (3n, 6)."""
    p = as_points(x)
    n = p.shape[0]
    modes = np.zeros((n, 3, 6))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        modes[:, i, i] = 1.0
        modes[:, :, 3 + i] = np.cross(e, p)
    modes = modes.reshape(3 * n, 6)
    if orthonormal:
        modes, _ = np.linalg.qr(modes)
    return modes
