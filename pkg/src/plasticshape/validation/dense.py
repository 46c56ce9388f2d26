"""Dense brute-force reference for the Gauss-Newton step.

Forms the equilibrium Jacobian J = dx/ds explicitly with dense solves and
solves the linearized problem two ways: the normal equations
``(w L^2 + J^T A^T C A J) ds = -g`` (in least-squares form) and the equivalent KKT system in (ds, dx)
with the linearized equilibrium as an explicit constraint.
"""
from __future__ import annotations

import numpy as np

from ..fem import assemble, rigid_modes
from ..optimizer import FitProblem

MAX_UNKNOWNS = 500


def dense_jacobian(problem: FitProblem, s, x) -> np.ndarray:
    """(3n, 6m) dx/ds at the equilibrium x; gauge-fixed by the stabilizer when unattached."""
    st = assemble(problem.mesh, problem.params, x, s, order=2)
    K = st.K.toarray()
    M = st.M.toarray()
    if problem.attached:
        K = K + problem.springs.hessian().toarray()
        return -np.linalg.solve(K, M)
    # Gauge conditions G dx = 0 replace the rigid nullspace: [[K, G^T], [G, 0]] is
    # nonsingular because G Psi is
    G = problem.stabilizer.gauge_rows(x)
    n = K.shape[0]
    kkt = np.block([[K, G.T], [G, np.zeros((6, 6))]])
    rhs = np.vstack([-M, np.zeros((6, M.shape[1]))])
    return np.linalg.solve(kkt, rhs)[:n]


def _linearization(problem, s, x, rows):
    if 6 * problem.mesh.n_tets > MAX_UNKNOWNS:
        raise ValueError(f"dense reference limited to 6m <= {MAX_UNKNOWNS}")
    w = problem.config.laplacian_weight
    L = problem.lap.matrix().toarray()
    A = rows.A.toarray()
    C = np.diag(rows.c_rows)
    r = A @ x + rows.b
    return w, L, A, C, r


def _free_rigid(problem: FitProblem, free_rigid) -> bool:
    if problem.attached:
        return False
    return problem.config.free_rigid if free_rigid is None else bool(free_rigid)


def dense_reference_step(problem: FitProblem, s, x, rows, free_rigid: bool | None = None) -> np.ndarray:
    """Gauss-Newton step ``(w L^2 + J^T A^T C A J) ds = -g`` with J formed explicitly.

    Solved as the stacked least-squares problem ``[sqrt(w) L; sqrt(C) A J] ds ~ -[..]``
    (QR) rather than by forming the normal matrix, which would square its condition
    number.  With ``free_rigid`` (unattached meshes) a rigid motion ``Psi theta`` is
    added to the linearized displacement and minimized over jointly with ``ds``.
    """
    w, L, A, C, r = _linearization(problem, s, x, rows)
    J = dense_jacobian(problem, s, x)
    p = J.shape[1]
    if _free_rigid(problem, free_rigid):
        J = np.hstack([J, rigid_modes(x)])
    sc = np.sqrt(np.diag(C))
    top = np.hstack([np.sqrt(w) * L, np.zeros((L.shape[0], J.shape[1] - p))])
    lhs = np.vstack([top, sc[:, None] * (A @ J)])
    rhs = -np.concatenate([np.sqrt(w) * (L @ s), sc * r])
    return np.linalg.lstsq(lhs, rhs, rcond=None)[0][:p]


def dense_reference_step_kkt(problem: FitProblem, s, x, rows, free_rigid: bool | None = None) -> np.ndarray:
    """Same step from the KKT system in (ds, dx) without forming J.

    minimize w/2 |L(s+ds)|^2 + 1/2 (r + A dx)^T C (r + A dx)
    subject to K dx + M ds = 0 (and G dx = 0 when unattached).  With
    ``free_rigid`` the residual becomes ``r + A (dx + Psi theta)`` with theta free.
    """
    w, L, A, C, r = _linearization(problem, s, x, rows)
    st = assemble(problem.mesh, problem.params, x, s, order=2)
    K = st.K.toarray()
    M = st.M.toarray()
    if problem.attached:
        K = K + problem.springs.hessian().toarray()
        E = np.hstack([M, K])
    else:
        # Psi^T (K dx + M ds) vanishes identically, so the gauge rows G dx = 0 are
        # folded into those 6 redundant directions: (K + kappa Psi G) dx + M ds = 0.
        G = problem.stabilizer.gauge_rows(x)
        psi = rigid_modes(x)
        kappa = np.abs(K).max()
        E = np.hstack([M, K + kappa * psi @ G])
    p, n = M.shape[1], K.shape[0]
    if _free_rigid(problem, free_rigid):
        # the marker residual sees dx + Psi theta; theta is free and unconstrained
        psi = rigid_modes(x)
        E = np.hstack([E, np.zeros((n, 6))])
        A = np.hstack([A, A @ psi])
    q = A.shape[1]
    Q = np.zeros((p + q, p + q))
    Q[:p, :p] = w * L.T @ L
    Q[p:, p:] = A.T @ C @ A
    c = np.concatenate([w * L.T @ (L @ s), A.T @ C @ r])
    k = E.shape[0]
    big = np.block([[Q, E.T], [E, np.zeros((k, k))]])
    rhs = np.concatenate([-c, np.zeros(k)])
    return np.linalg.solve(big, rhs)[:p]


__all__ = ["dense_jacobian", "dense_reference_step", "dense_reference_step_kkt", "rigid_modes", "MAX_UNKNOWNS"]
