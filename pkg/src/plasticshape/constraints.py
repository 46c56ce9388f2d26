"""Attachment, landmark and closest-point (ICP) constraints as quadratic rows.

Every constraint k contributes ``c_k / 2 |A_k x + b_k|^2`` where ``A_k`` (3 x 3n)
interpolates the constrained point from the vertices of its tet or triangle and
``b_k = -target``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .tetmesh import MaterialPoint, SurfacePoint, TetMesh, as_points, closest_surface_points

log = logging.getLogger(__name__)

STAGES = ("attachments", "landmarks", "icp")


@dataclass
class MarkerRows:
    """Stacked constraint rows: ``A`` (3k, 3n) sparse, ``b`` (3k,), weights ``c`` (k,)."""

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    kinds: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.c.shape[0]

    @property
    def c_rows(self) -> np.ndarray:
        return np.repeat(self.c, 3)

    def residuals(self, x) -> np.ndarray:
        """(k, 3) array of ``A_k x + b_k``."""
        return (self.A @ np.asarray(x).reshape(-1) + self.b).reshape(-1, 3)

    def errors(self, x) -> np.ndarray:
        return np.linalg.norm(self.residuals(x), axis=1)

    def energy(self, x) -> float:
        r = self.residuals(x)
        return 0.5 * float(np.sum(self.c * np.sum(r * r, axis=1)))

    def gradient(self, x) -> np.ndarray:
        r = self.A @ np.asarray(x).reshape(-1) + self.b
        return self.A.T @ (self.c_rows * r)

    def hessian(self) -> sp.csr_matrix:
        return (self.A.T @ sp.diags(self.c_rows) @ self.A).tocsr()

    def weighted(self):
        """``(sqrt(C) A, sqrt(C) b)`` so that the energy is half the squared norm."""
        w = np.sqrt(self.c_rows)
        return (sp.diags(w) @ self.A).tocsr(), w * self.b

    def scaled(self, factor: float) -> "MarkerRows":
        return MarkerRows(self.A, self.b, self.c * factor, list(self.kinds))

    @staticmethod
    def empty(n: int) -> "MarkerRows":
        return MarkerRows(sp.csr_matrix((0, 3 * n)), np.zeros(0), np.zeros(0))

    @staticmethod
    def stack(parts, n: int) -> "MarkerRows":
        parts = [p for p in parts if p.count]
        if not parts:
            return MarkerRows.empty(n)
        return MarkerRows(
            sp.vstack([p.A for p in parts], format="csr"),
            np.concatenate([p.b for p in parts]),
            np.concatenate([p.c for p in parts]),
            sum((p.kinds for p in parts), []),
        )


def _rows(n, vertex_ids, weights, targets, c, kind):
    k = len(c)
    if k == 0:
        return MarkerRows.empty(n)
    vertex_ids = np.asarray(vertex_ids).reshape(k, -1)
    weights = np.asarray(weights, dtype=float).reshape(k, -1)
    nv = vertex_ids.shape[1]
    rows = (3 * np.arange(k)[:, None, None] + np.arange(3)[None, None, :]).repeat(nv, axis=1)
    cols = 3 * vertex_ids[:, :, None] + np.arange(3)[None, None, :]
    vals = np.broadcast_to(weights[:, :, None], rows.shape)
    A = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * k, 3 * n))
    A.sum_duplicates()
    return MarkerRows(A, -np.asarray(targets, dtype=float).reshape(-1), np.asarray(c, dtype=float), [kind] * k)


def rows_from_material_points(mesh: TetMesh, points, targets, c, kind="landmark") -> MarkerRows:
    """Rows ``[w1 I, w2 I, w3 I, w4 I] S^k`` for points embedded in tets."""
    if len(points) == 0:
        return MarkerRows.empty(mesh.n_vertices)
    ids = np.stack([mesh.tets[p.tet_index] for p in points])
    w = np.stack([p.barycentric for p in points])
    return _rows(mesh.n_vertices, ids, w, targets, c, kind)


def rows_from_surface_points(mesh: TetMesh, points, targets, c, kind="icp") -> MarkerRows:
    if len(points) == 0:
        return MarkerRows.empty(mesh.n_vertices)
    ids = np.stack([mesh.surface_triangles[p.triangle_index] for p in points])
    w = np.stack([p.barycentric for p in points])
    return _rows(mesh.n_vertices, ids, w, targets, c, kind)


@dataclass
class Constraint:
    point: MaterialPoint
    target: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.target)):
            raise ValueError("constraint target must be finite")
        if not self.weight > 0:
            raise ValueError("constraint weight must be positive")


@dataclass
class ConstraintSet:
    """Attachments (physical springs), landmarks and ICP markers.

    Weights ``c_k`` entering the objective are ``beta * weight`` for attachments
    and ``alpha * weight`` for landmarks and ICP markers.  Attachment springs use
    the same ``beta * weight`` as their stiffness.
    """

    attachments: list = field(default_factory=list)
    landmarks: list = field(default_factory=list)
    icp_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    icp_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: float = 1e9
    beta: float = 1e8

    def __post_init__(self):
        self.icp_targets = np.asarray(self.icp_targets, dtype=float).reshape(-1, 3)
        if self.icp_weights is None or len(self.icp_weights) == 0:
            self.icp_weights = np.ones(self.icp_targets.shape[0])
        self.icp_weights = np.asarray(self.icp_weights, dtype=float)
        if self.icp_weights.shape[0] != self.icp_targets.shape[0]:
            raise ValueError("one ICP weight per marker required")
        if np.any(self.icp_weights <= 0) or not np.all(np.isfinite(self.icp_targets)):
            raise ValueError("ICP markers need finite targets and positive weights")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")

    @property
    def counts(self):
        return len(self.landmarks), self.icp_targets.shape[0], len(self.attachments)

    @property
    def attached(self) -> bool:
        return len(self.attachments) > 0

    def attachment_rows(self, mesh: TetMesh) -> MarkerRows:
        a = self.attachments
        return rows_from_material_points(
            mesh, [c.point for c in a], [c.target for c in a], [self.beta * c.weight for c in a], "attachment"
        )

    def landmark_rows(self, mesh: TetMesh) -> MarkerRows:
        lm = self.landmarks
        return rows_from_material_points(
            mesh, [c.point for c in lm], [c.target for c in lm], [self.alpha * c.weight for c in lm], "landmark"
        )

    def icp_rows(self, mesh: TetMesh, x):
        """Rows at the current closest surface points, plus those points."""
        if self.icp_targets.shape[0] == 0:
            return MarkerRows.empty(mesh.n_vertices), []
        sps = closest_surface_points(mesh, x, self.icp_targets)
        rows = rows_from_surface_points(mesh, sps, self.icp_targets, self.alpha * self.icp_weights, "icp")
        return rows, sps

    def icp_distances(self, mesh: TetMesh, x) -> np.ndarray:
        if self.icp_targets.shape[0] == 0:
            return np.zeros(0)
        sps = closest_surface_points(mesh, x, self.icp_targets)
        return np.linalg.norm(np.stack([p.position for p in sps]) - self.icp_targets, axis=1)


@dataclass
class AssembledConstraints:
    """Objective rows active in a stage, plus the attachment springs of f_net."""

    objective: MarkerRows
    springs: MarkerRows
    surface_points: list
    stage: str


def stage_active(stage: str):
    """Which constraint classes enter the objective in a stage."""
    if stage == "attachments":
        return {"attachments"}
    if stage == "landmarks":
        return {"attachments", "landmarks"}
    if stage == "icp":
        return {"attachments", "icp"}
    if stage == "all":
        return {"attachments", "landmarks", "icp"}
    raise ValueError(f"unknown stage {stage!r}")


def assemble_constraints(mesh: TetMesh, cset: ConstraintSet, x, stage: str = "all") -> AssembledConstraints:
    """Build the quadratic rows of the objective for a stage at positions x.

    ICP rows are linearized at the closest surface points of the current x.
    """
    active = stage_active(stage)
    springs = cset.attachment_rows(mesh)
    parts = []
    if "attachments" in active:
        parts.append(springs)
    if "landmarks" in active:
        parts.append(cset.landmark_rows(mesh))
    sps = []
    if "icp" in active:
        rows, sps = cset.icp_rows(mesh, x)
        parts.append(rows)
    objective = MarkerRows.stack(parts, mesh.n_vertices)
    if objective.count == 0:
        log.warning("stage %s has no active constraints", stage)
    return AssembledConstraints(objective, springs, sps, stage)


def positions_of(mesh: TetMesh, x, points) -> np.ndarray:
    p = as_points(x)
    return np.stack([pt.barycentric @ p[mesh.tets[pt.tet_index]] for pt in points]) if points else np.zeros((0, 3))
