"""Plastic strain Laplacian over face-adjacent tets and its rank-corrected base matrix.

Fields are stored tet-major: ``s.reshape(m, 6)[t]`` is the parameter vector of
tet ``t``.  The 6-expanded operator is ``kron(L_sc, diag(w))`` with weights
``w = (1, sqrt2, sqrt2, 1, sqrt2, 1)`` since s2, s3, s5 each fill two entries of F_p.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import KnownNullspaceMatrix
from .tetmesh import MeshError, TetMesh

COMPONENT_WEIGHTS = np.array([1.0, np.sqrt(2.0), np.sqrt(2.0), 1.0, np.sqrt(2.0), 1.0])


@dataclass
class StrainLaplacian:
    scalar_laplacian: sp.csr_matrix
    component_weights: np.ndarray
    adjacency: np.ndarray | None = None  # (e, 2) face-adjacent tet pairs

    @property
    def n_tets(self) -> int:
        return self.scalar_laplacian.shape[0]

    @property
    def nullspace(self) -> np.ndarray:
        """Orthonormal (6m, 6) basis: component i constant, others zero."""
        m = self.n_tets
        return np.kron(np.ones((m, 1)), np.eye(6)) / np.sqrt(m)

    def matrix(self) -> sp.csr_matrix:
        return sp.kron(self.scalar_laplacian, sp.diags(self.component_weights), format="csr")

    def squared(self) -> sp.csr_matrix:
        lsc2 = (self.scalar_laplacian @ self.scalar_laplacian).tocsr()
        return sp.kron(lsc2, sp.diags(self.component_weights**2), format="csr")


def build(mesh: TetMesh) -> StrainLaplacian:
    """Combinatorial tet Laplacian: -1 per shared face, diagonal = neighbour count."""
    m = mesh.n_tets
    adj = mesh.face_adjacency
    if m > 1 and adj.shape[0] < m - 1:
        raise MeshError("mesh is not face-connected")
    i, j = adj[:, 0], adj[:, 1]
    off = sp.coo_matrix((-np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(m, m))
    deg = np.bincount(np.r_[i, j], minlength=m).astype(float)
    lsc = (off + sp.diags(deg)).tocsr()
    lsc.sum_duplicates()
    return StrainLaplacian(lsc, COMPONENT_WEIGHTS.copy(), np.asarray(adj).reshape(-1, 2))


def apply(lap: StrainLaplacian, s) -> np.ndarray:
    """``L s`` summed as neighbour differences, so constant fields give exact zeros."""
    s = np.asarray(s, dtype=float)
    blocks = s.reshape(-1, 6)
    if lap.adjacency is None:
        out = lap.scalar_laplacian @ blocks
    else:
        i, j = lap.adjacency[:, 0], lap.adjacency[:, 1]
        d = blocks[i] - blocks[j]
        out = np.zeros_like(blocks)
        np.add.at(out, i, d)
        np.add.at(out, j, -d)
    return (out * lap.component_weights).reshape(s.shape)


def smoothness(lap: StrainLaplacian, s) -> float:
    """||L s||^2."""
    r = apply(lap, s)
    return float(r @ r)


class BaseMatrix:
    """``B = w L^2 - sum_i psi_i psi_i^T`` solved through its known-nullspace structure.

    ``B`` itself is dense (the psi_i psi_i^T blocks fill every component), so it is
    never formed; the sparse augmented system of ``w L^2`` is factored once.
    """

    def __init__(self, lap: StrainLaplacian, weight: float = 1.0, alpha: float = -1.0):
        self.lap = lap
        self.weight = float(weight)
        self.alpha = float(alpha)
        self.A = KnownNullspaceMatrix(self.weight * lap.squared(), lap.nullspace)
        self.shape = self.A.matrix.shape

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        psi = self.A.nullspace
        return self.A.matrix @ v + self.alpha * psi @ (psi.T @ v)

    def solve(self, h):
        alphas = np.full(self.A.k, self.alpha)
        return self.A.solve_rank_corrected(alphas, h)

    def dense(self) -> np.ndarray:
        psi = self.A.nullspace
        return self.A.matrix.toarray() + self.alpha * psi @ psi.T


def base_matrix(lap: StrainLaplacian, weight: float = 1.0) -> BaseMatrix:
    return BaseMatrix(lap, weight)
