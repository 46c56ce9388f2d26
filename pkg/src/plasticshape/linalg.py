"""Sparse solves with a known nullspace, and Woodbury low-rank updates.

For symmetric ``A`` with nullspace spanned by orthonormal ``psi_1..psi_k``:

* ``A x = b`` with ``b`` in range(A) has exactly one solution orthogonal to
  every ``psi_i``; it comes from the non-singular augmented system
  ``[[A, Psi], [Psi^T, 0]] [x; lam] = [b; 0]``.
* ``(A + sum_i a_i psi_i psi_i^T) y = h`` is solved by projecting ``h`` onto
  range(A), solving the augmented system, and adding ``sum_i (psi_i^T h / a_i) psi_i``.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularSystemError(ArithmeticError):
    """A factorization failed or a right-hand side is inconsistent."""


class RangeError(SingularSystemError):
    def __init__(self, projection_norm: float, rhs_norm: float):
        self.projection_norm = projection_norm
        self.rhs_norm = rhs_norm
        super().__init__(
            f"right-hand side is not in the range: |proj_N b| = {projection_norm:.3e} "
            f"vs |b| = {rhs_norm:.3e}"
        )


def factorize(A):
    """Sparse LU of a (symmetric) matrix; raises SingularSystemError on failure."""
    A = sp.csc_matrix(A)
    try:
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularSystemError(f"sparse factorization failed: {exc}") from exc


def _sparse_norm(A) -> float:
    if sp.issparse(A):
        return float(spla.norm(A, ord=1))
    return float(np.linalg.norm(A, 1))


def orthonormalize(vectors) -> np.ndarray:
    q, r = np.linalg.qr(np.asarray(vectors, dtype=float))
    if np.any(np.abs(np.diag(r)) < 1e-12 * max(1.0, np.abs(r).max())):
        raise ValueError("nullspace vectors are linearly dependent")
    return q


def augmented_matrix(A, psi) -> sp.csc_matrix:
    k = psi.shape[1]
    psi_s = sp.csr_matrix(np.where(np.abs(psi) > 0, psi, 0.0))
    return sp.bmat([[sp.csr_matrix(A), psi_s], [psi_s.T, sp.csr_matrix((k, k))]], format="csc")


class KnownNullspaceMatrix:
    """Symmetric sparse matrix together with an orthonormal basis of its nullspace.

    Parameters
    ----------
    matrix : sparse (p, p)
    nullspace : (p, k) array
        Columns spanning the nullspace; orthonormalized here.
    tol : float
        Construction check ``|A psi_i| <= tol |A|`` (1-norm).  Pass ``check=False``
        to skip it when the caller restricts the solve to the complement on purpose.
    """

    def __init__(self, matrix, nullspace, tol: float = 1e-8, check: bool = True):
        self.matrix = sp.csr_matrix(matrix)
        psi = np.asarray(nullspace, dtype=float)
        if psi.ndim == 1:
            psi = psi[:, None]
        self.nullspace = orthonormalize(psi)
        self.k = self.nullspace.shape[1]
        self.norm = _sparse_norm(self.matrix)
        if check:
            resid = np.abs(self.matrix @ self.nullspace).sum(axis=0).max() if self.k else 0.0
            if resid > tol * max(self.norm, 1e-300):
                raise ValueError(f"|A psi| = {resid:.3e} exceeds {tol:g} * |A| = {tol * self.norm:.3e}")
        self._lu = None

    @property
    def lu(self):
        if self._lu is None:
            self._lu = factorize(augmented_matrix(self.matrix, self.nullspace))
        return self._lu

    def kkt_solve(self, b):
        """Solve the augmented system; returns (x, lam)."""
        b = np.asarray(b, dtype=float)
        p = self.matrix.shape[0]
        rhs = np.concatenate([b, np.zeros((self.k,) + b.shape[1:])], axis=0)
        sol = self.lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SingularSystemError("augmented system solve produced non-finite values")
        return sol[:p], sol[p:]

    def project_range(self, b):
        b = np.asarray(b, dtype=float)
        return b - self.nullspace @ (self.nullspace.T @ b)

    def solve(self, b, range_tol: float = 1e-8):
        return solve_singular(self, b, range_tol)

    def solve_rank_corrected(self, alphas, h):
        return solve_rank_corrected(self, alphas, h)


def solve_singular(A: KnownNullspaceMatrix, b, range_tol: float = 1e-8):
    """Solution of ``A x = b`` orthogonal to the nullspace (b may be (p,) or (p, r))."""
    b = np.asarray(b, dtype=float)
    proj = A.nullspace.T @ b
    pn = np.linalg.norm(proj, axis=0)
    bn = np.linalg.norm(b, axis=0)
    if np.any(pn > range_tol * np.maximum(bn, 1e-300)):
        i = int(np.argmax(pn / np.maximum(bn, 1e-300))) if np.ndim(pn) else 0
        raise RangeError(float(np.atleast_1d(pn)[i]), float(np.atleast_1d(bn)[i]))
    x, _ = A.kkt_solve(b)
    return x


def solve_rank_corrected(A: KnownNullspaceMatrix, alphas, h):
    """Solve ``(A + sum_i alphas[i] psi_i psi_i^T) y = h``."""
    alphas = np.asarray(alphas, dtype=float).reshape(-1)
    if alphas.shape[0] != A.k:
        raise ValueError(f"expected {A.k} alphas")
    if np.any(alphas == 0):
        raise ValueError("all alphas must be nonzero")
    h = np.asarray(h, dtype=float)
    # With the unprojected h as right-hand side the multipliers come out as
    # lam_i = psi_i^T h while x solves A x = proj_R(h).
    x, lam = A.kkt_solve(h)
    scale = (1.0 / alphas).reshape((-1,) + (1,) * (h.ndim - 1))
    return x + A.nullspace @ (lam * scale)


# -- Woodbury --------------------------------------------------------------------


@dataclass
class WoodburyOperator:
    """``H^{-1}`` for ``H = B + Zhat^T Zhat`` with a factored base ``B``.

    ``base`` needs a ``solve`` accepting (p,) and (p, r) arrays.
    """

    base: object
    zhat: np.ndarray
    capacitance: np.ndarray
    cap_lu: tuple
    binv_zt: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def min_pivot(self) -> float:
        return float(np.abs(np.diag(self.cap_lu[0])).min()) if self.capacitance.size else np.inf


def build_woodbury(base, zhat) -> WoodburyOperator:
    """Form and factor the capacitance matrix ``I + Zhat B^{-1} Zhat^T``."""
    zhat = np.atleast_2d(np.asarray(zhat, dtype=float))
    t0 = time.perf_counter()
    rows = zhat.shape[0]
    if rows == 0:
        binv_zt = np.zeros((base.shape[0], 0))
        cap = np.zeros((0, 0))
        return WoodburyOperator(base, zhat, cap, (cap, np.zeros(0, dtype=int)), binv_zt)
    if zhat.shape[1] != base.shape[0]:
        raise ValueError(f"zhat has {zhat.shape[1]} columns, base is {base.shape[0]}")
    binv_zt = base.solve(zhat.T)
    cap = np.eye(rows) + zhat @ binv_zt
    cap = 0.5 * (cap + cap.T)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)  # singularity is reported below
        lu, piv = la.lu_factor(cap, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= 1e-14 * max(pivots.max(), 1.0):
        raise SingularSystemError(
            f"capacitance matrix is singular (smallest pivot {pivots.min():.3e}); "
            "H is not invertible on the constrained subspace"
        )
    op = WoodburyOperator(base, zhat, cap, (lu, piv), binv_zt)
    op.timings["build"] = time.perf_counter() - t0
    return op


def _woodbury_apply_inverse(op: WoodburyOperator, h) -> np.ndarray:
    y = op.base.solve(h)
    if op.zhat.shape[0] == 0:
        return y
    return y - op.binv_zt @ la.lu_solve(op.cap_lu, op.zhat @ y)


def woodbury_matvec(op: WoodburyOperator, v) -> np.ndarray:
    """``H v = B v + Zhat^T Zhat v``; needs ``base.matvec``."""
    v = np.asarray(v, dtype=float)
    out = op.base.matvec(v)
    if op.zhat.shape[0]:
        out = out + op.zhat.T @ (op.zhat @ v)
    return out


def woodbury_solve(op: WoodburyOperator, h, refine: int = 2, rtol: float = 1e-12) -> np.ndarray:
    """``H^{-1} h`` via ``B^{-1} h - B^{-1} Zhat^T cap^{-1} Zhat B^{-1} h``.

    Large marker weights make the capacitance badly scaled, so up to ``refine``
    steps of iterative refinement (residual against ``H``, same factorizations)
    are applied until the relative residual drops below ``rtol``.
    """
    h = np.asarray(h, dtype=float)
    y = _woodbury_apply_inverse(op, h)
    if refine <= 0 or not hasattr(op.base, "matvec"):
        return y
    hn = np.linalg.norm(h)
    if hn == 0:
        return y
    for _ in range(refine):
        r = h - woodbury_matvec(op, y)
        if np.linalg.norm(r) <= rtol * hn:
            break
        y = y + _woodbury_apply_inverse(op, r)
    return y


def cg_solve(apply_H, h, rtol: float = 1e-8, maxiter: int | None = None):
    """Unpreconditioned conjugate gradients on an implicitly applied SPD matrix."""
    h = np.asarray(h, dtype=float)
    n = h.shape[0]
    op = spla.LinearOperator((n, n), matvec=apply_H, dtype=float)
    count = {"it": 0}

    def cb(_):
        count["it"] += 1

    y, info = spla.cg(op, h, rtol=rtol, atol=0.0, maxiter=maxiter or 50 * n, callback=cb)
    return y, info, count["it"]
