"""Gauss-Newton fitting of a plastic strain field to attachments, landmarks and ICP markers.

The objective is ``w/2 |L s|^2 + sum_k c_k/2 |A_k x + b_k|^2`` subject to x being a
static equilibrium for s.  Each outer iteration linearizes the equilibrium map
``x(s)``, solves the resulting quadratic problem for a direction with the
Woodbury identity (never forming the dense Jacobian), then line-searches along
it with Brent's method, re-solving the equilibrium at every trial step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.optimize as so

from . import laplacian as lapmod
from .constraints import AssembledConstraints, ConstraintSet, MarkerRows, assemble_constraints, positions_of
from .equilibrium import (
    EquilibriumState,
    ShapeMatching,
    default_force_tol,
    static_solve_attached,
    static_solve_unattached,
)
from .fem import assemble, rigid_modes
from .linalg import KnownNullspaceMatrix, SingularSystemError, build_woodbury, factorize, solve_singular, woodbury_solve
from .material import IDENTITY_S, MaterialParams, PlasticityError, clamp_field, identity_field
from .polar import PolarError, best_rotation
from .tetmesh import TetMesh

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("max_iter", "icp_error_met", "eta_small")


class EquilibriumError(RuntimeError):
    """Gauss-Newton step requested at a state that is not an equilibrium."""


class DivergenceError(RuntimeError):
    """SPD clamping kept firing; the optimization is numerically diverging."""


@dataclass
class SolveConfig:
    alpha: float = 1e9
    beta: float = 1e8
    laplacian_weight: float = 1.0
    spd_floor: float = 0.01
    max_outer_iterations: int = 20
    icp_stop: float = 1e-3  # meters
    eta_min: float = 0.01
    eta_max: float = 1.5
    eta_tol: float = 1e-3
    stages: tuple = ("attachments", "landmarks", "icp")
    initial_guess: bool = True
    initial_iterations: int = 10
    force_rtol: float = 1e-9
    max_newton_iterations: int = 100
    divergence_patience: int = 3
    free_rigid: bool = True  # unattached: eliminate the rigid pose from each linearized step

    def __post_init__(self):
        for name in ("spd_floor", "icp_stop", "eta_min", "eta_max", "eta_tol", "force_rtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0 or self.beta < 0 or self.laplacian_weight <= 0:
            raise ValueError("weights must be nonnegative (laplacian weight positive)")
        order = [s for s in ("attachments", "landmarks", "icp") if s in self.stages]
        if list(self.stages) != order:
            raise ValueError("stages must be ordered attachments -> landmarks -> icp")

    def to_dict(self):
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(d["stages"])
        return cls(**d)


@dataclass
class IterationRecord:
    stage: str
    iteration: int
    objective: float
    eta: float
    marker_error_mean: float
    marker_error_max: float
    icp_error_mean: float
    icp_error_max: float
    clamped_tets: int
    equilibrium_residual: float
    force_tol: float
    wall_time: float


@dataclass
class SolveReport:
    iterations: list = field(default_factory=list)
    stage_results: list = field(default_factory=list)  # (stage, reason, iterations)
    termination_reason: str | None = None
    e_init: dict = field(default_factory=dict)
    e_final: dict = field(default_factory=dict)
    total_time: float = 0.0

    def to_dict(self):
        return {
            "iterations": [asdict(r) for r in self.iterations],
            "stage_results": [list(r) for r in self.stage_results],
            "termination_reason": self.termination_reason,
            "e_init": self.e_init,
            "e_final": self.e_final,
            "total_time": self.total_time,
        }


class FitProblem:
    """Mesh, material, constraints and the factorizations reused across iterations."""

    def __init__(self, mesh: TetMesh, params: MaterialParams, cset: ConstraintSet, config: SolveConfig | None = None,
                 stabilizer: ShapeMatching | None = None):
        self.mesh = mesh
        self.params = params
        self.config = config or SolveConfig()
        self.cset = replace(cset, alpha=self.config.alpha, beta=self.config.beta)
        self.attached = self.cset.attached
        if self.attached and len(self.cset.attachments) < 3:
            raise ValueError("attached meshes need at least three attachments")
        self.lap = lapmod.build(mesh)
        self._base = None
        self.force_tol = default_force_tol(mesh, params, self.config.force_rtol)
        if not self.attached:
            self.stabilizer = stabilizer or ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
            self.t = np.zeros(3)
            self.R = np.eye(3)
        else:
            self.stabilizer = None
        self.springs = self.cset.attachment_rows(mesh)

    @property
    def base(self):
        if self._base is None:
            self._base = lapmod.base_matrix(self.lap, self.config.laplacian_weight)
        return self._base

    def equilibrium(self, s, x0) -> EquilibriumState:
        kw = dict(force_tol=self.force_tol, max_iter=self.config.max_newton_iterations)
        if self.attached:
            return static_solve_attached(self.mesh, self.params, s, self.springs, x0, **kw)
        return static_solve_unattached(self.mesh, self.params, s, self.t, self.R, self.stabilizer, x0, **kw)

    def smoothness(self, s) -> float:
        return 0.5 * self.config.laplacian_weight * lapmod.smoothness(self.lap, s)

    def objective(self, s, x, rows: MarkerRows) -> float:
        return self.smoothness(s) + rows.energy(x)

    def rows(self, x, stage) -> AssembledConstraints:
        return assemble_constraints(self.mesh, self.cset, x, stage)

    def net_force(self, s, x):
        st = assemble(self.mesh, self.params, x, s, order=1)
        g = st.grad_x
        if self.attached:
            g = g + self.springs.gradient(x)
        return -g


# -- direction ----------------------------------------------------------------------


def weighted_jacobian_transpose(problem: FitProblem, s, x, rows: MarkerRows, check: bool = True):
    """``Z^T = J^T A^T sqrt(C)`` (6m, 3k) via adjoint solves, never forming ``J``.

    Returns ``Z^T`` and the weighted residual ``rho = sqrt(C)(A x + b)``.
    """
    mesh, params = problem.mesh, problem.params
    st = assemble(mesh, params, x, s, order=2)
    K = st.K
    g = st.grad_x
    if problem.attached:
        K = (K + problem.springs.hessian()).tocsr()
        g = g + problem.springs.gradient(x)
    residual = float(np.linalg.norm(g))
    if check and residual > 10.0 * problem.force_tol:
        raise EquilibriumError(f"|f_net| = {residual:.3e} exceeds tolerance {problem.force_tol:.3e}")
    Aw, bw = rows.weighted()
    rho = Aw @ x + bw
    if rows.count == 0:
        return np.zeros((6 * mesh.n_tets, 0)), rho
    rhs = Aw.T.toarray()
    if problem.attached:
        W = factorize(K).solve(rhs)
    else:
        # dx/ds must keep the stabilizer's centroid and rotation fixed:
        # J = P J_perp with P = I - Psi (G Psi)^{-1} G, J_perp = -K^+ M.
        psi = rigid_modes(x)
        G = problem.stabilizer.gauge_rows(x)
        rhs = rhs - G.T @ np.linalg.solve((G @ psi).T, psi.T @ rhs)
        Kn = KnownNullspaceMatrix(K, psi, tol=1e-6)
        W = solve_singular(Kn, Kn.project_range(rhs))
        # M's columns lie in range(K) at an equilibrium; the adjoint form needs K^+ = K^+ proj
    Zt = -(st.M.T @ W)
    if not problem.attached and problem.config.free_rigid:
        # The pose is re-fit after every step, so eliminate it from the linear model:
        # minimizing over dx = J ds + Psi theta leaves the residual projected off span(Aw Psi).
        Q = _rigid_basis(Aw @ rigid_modes(x))
        Zt = Zt - (Zt @ Q) @ Q.T
        rho = rho - Q @ (Q.T @ rho)
    return Zt, rho


def _rigid_basis(B, rtol: float = 1e-10) -> np.ndarray:
    u, sv, _ = np.linalg.svd(B, full_matrices=False)
    keep = sv > rtol * max(sv.max(initial=0.0), 1e-300)
    return u[:, keep]


def gauss_newton_direction(problem: FitProblem, s, x, rows: MarkerRows, check: bool = True):
    """Minimizer of the linearized objective over ds (Woodbury solve of H ds = -g)."""
    Zt, rho = weighted_jacobian_transpose(problem, s, x, rows, check=check)
    w = problem.config.laplacian_weight
    Ls = lapmod.apply(problem.lap, s)
    grad = w * lapmod.apply(problem.lap, Ls) + Zt @ rho
    if not np.any(grad):
        return np.zeros_like(grad), grad
    zhat = np.vstack([Zt.T, problem.lap.nullspace.T])
    op = build_woodbury(problem.base, zhat)
    return -woodbury_solve(op, grad), grad


def reduced_direction(problem: FitProblem, s, x, rows: MarkerRows, check: bool = True):
    """Gauss-Newton step for a spatially constant update of s (6 unknowns)."""
    Zt, rho = weighted_jacobian_transpose(problem, s, x, rows, check=check)
    m = problem.mesh.n_tets
    Zc = Zt.reshape(m, 6, -1).sum(axis=0).T  # (3k, 6)
    grad = Zc.T @ rho
    if not np.any(grad):
        return np.zeros(6 * m), grad
    step, *_ = np.linalg.lstsq(Zc.T @ Zc, -grad, rcond=1e-12)
    return np.tile(step, m), grad


# -- line search ----------------------------------------------------------------------


def brent_line_search(phi, eta_max: float = 1.5, xatol: float = 1e-3, phi0: float | None = None):
    """Bounded Brent minimization of phi on [0, eta_max]; returns (eta, phi(eta)).

    Returns eta = 0 when no trial improves on phi(0).
    """
    phi0 = phi(0.0) if phi0 is None else phi0
    res = so.minimize_scalar(phi, bounds=(0.0, eta_max), method="bounded", options={"xatol": xatol})
    eta, val = float(res.x), float(res.fun)
    if not np.isfinite(val) or val >= phi0:
        return 0.0, phi0
    return eta, val


class _Trial:
    __slots__ = ("s", "eq", "value", "clamped")

    def __init__(self, s, eq, value, clamped):
        self.s, self.eq, self.value, self.clamped = s, eq, value, clamped


def line_search(problem: FitProblem, s, ds, x, rows: MarkerRows, phi0: float):
    """Brent search over eta for s + eta ds with x(eta) re-solved to equilibrium.

    Returns (eta, trial) where trial holds the clamped s, equilibrium and value,
    or (0, None) if no step improves the objective.
    """
    if not np.any(ds):
        return 0.0, None
    cfg = problem.config
    cache = {}
    penalty = abs(phi0) * 1e6 + 1.0

    def phi(eta):
        eta = float(eta)
        if eta in cache:
            return cache[eta].value
        s_eta, flags = clamp_field(s + eta * ds, cfg.spd_floor)
        try:
            eq = problem.equilibrium(s_eta, x)
        except (PlasticityError, PolarError, SingularSystemError) as exc:
            log.debug("trial eta=%.4f failed: %s", eta, exc)
            cache[eta] = _Trial(s_eta, None, penalty, flags)
            return penalty
        if eq.converged and not problem.attached and cfg.free_rigid:
            eq = _with_pose(problem, eq, rigid_fit(problem, eq.x, rows))
        value = problem.objective(s_eta, eq.x, rows) if eq.converged else penalty
        cache[eta] = _Trial(s_eta, eq, value, flags)
        return value

    eta, val = brent_line_search(phi, cfg.eta_max, cfg.eta_tol, phi0)
    if eta == 0.0:
        return 0.0, None
    best = min((e for e in cache if cache[e].eq is not None), key=lambda e: cache[e].value)
    return best, cache[best]


# -- rigid block update for unattached meshes -----------------------------------------------


def rigid_fit(problem: FitProblem, x, rows: MarkerRows):
    """x moved rigidly to best fit the correspondences of ``rows`` (weighted Kabsch).

    Returns x unchanged if there are too few markers or the fit would not help.
    """
    if rows.count < 3:
        return x
    src = (rows.A @ x).reshape(-1, 3)
    dst = -rows.b.reshape(-1, 3)
    Q, c = best_rotation(src, dst, rows.c)
    x_new = (x.reshape(-1, 3) @ Q.T + c).reshape(-1)
    return x_new if rows.energy(x_new) <= rows.energy(x) else x


def _with_pose(problem: FitProblem, eq: EquilibriumState, x) -> EquilibriumState:
    return replace(eq, x=x, translation=problem.stabilizer.translation(x), rotation=problem.stabilizer.rotation(x))


def rigid_update(problem: FitProblem, x, rows: MarkerRows):
    """Move x rigidly to best fit the current correspondences; update (t, R)."""
    x_new = rigid_fit(problem, x, rows)
    if x_new is not x:
        problem.t = problem.stabilizer.translation(x_new)
        problem.R = problem.stabilizer.rotation(x_new)
    return x_new


# -- driver ---------------------------------------------------------------------------


def _stage_rows_available(cset: ConstraintSet, stage: str) -> bool:
    q, r, t = cset.counts
    return {"attachments": t > 0, "landmarks": q > 0, "icp": r > 0}[stage]


def _stop_errors(problem: FitProblem, x, stage: str, assembled: AssembledConstraints):
    """Errors checked by the stopping test: ICP point-to-surface, else the active rows."""
    if stage == "icp":
        return problem.cset.icp_distances(problem.mesh, x)
    kinds = np.array(assembled.objective.kinds)
    errs = assembled.objective.errors(x)
    want = "landmark" if stage == "landmarks" else "attachment"
    return errs[kinds == want] if kinds.size else errs


def _stats(v):
    v = np.asarray(v)
    return (float(v.mean()), float(v.max())) if v.size else (0.0, 0.0)


def initial_guess(problem: FitProblem, x0=None, report: SolveReport | None = None):
    """Fit one constant plastic field (plus rigid pose when unattached).

    Uses the landmarks if there are any, otherwise the ICP markers, together with
    the attachments.  Returns (s, equilibrium).
    """
    mesh, cfg = problem.mesh, problem.config
    s = identity_field(mesh.n_tets)
    x0 = mesh.rest_positions if x0 is None else x0
    q, r, t = problem.cset.counts
    if q == 0 and t < 3 and r < 3:
        log.warning("initial guess is under-constrained; keeping identity plastic field")
        return s, problem.equilibrium(s, x0)
    stage = "landmarks" if q > 0 else ("icp" if r > 0 else "attachments")
    eq = problem.equilibrium(s, x0)
    x = eq.x
    t0 = time.perf_counter()
    for it in range(cfg.initial_iterations):
        assembled = problem.rows(x, stage)
        rows = assembled.objective
        if not problem.attached:
            x = rigid_update(problem, x, rows)
            eq = replace(eq, x=x, translation=problem.t, rotation=problem.R)
            assembled = problem.rows(x, stage)
            rows = assembled.objective
        phi0 = problem.objective(s, x, rows)
        try:
            ds, _ = reduced_direction(problem, s, x, rows)
        except SingularSystemError as exc:
            log.warning("initial guess direction failed: %s", exc)
            break
        eta, trial = line_search(problem, s, ds, x, rows, phi0)
        if trial is None:
            break
        s, eq, x = trial.s, trial.eq, trial.eq.x
        if not problem.attached:
            problem.t, problem.R = eq.translation, eq.rotation
        if report is not None:
            errs = _stop_errors(problem, x, stage, assembled)
            icp = problem.cset.icp_distances(mesh, x)
            report.iterations.append(IterationRecord(
                "initial", it, trial.value, eta, *_stats(errs), *_stats(icp), int(trial.clamped.sum()),
                eq.residual_norm, eq.force_tol, time.perf_counter() - t0,
            ))
        if eta < cfg.eta_min or trial.value > (1.0 - 1e-6) * phi0:
            break
    if not problem.attached:
        rows = problem.rows(x, stage).objective
        x = rigid_update(problem, x, rows)
        eq = replace(eq, x=x, translation=problem.t, rotation=problem.R)
    return s, eq


def run_stage(problem: FitProblem, stage: str, s, eq: EquilibriumState, report: SolveReport, t_start: float):
    cfg = problem.config
    x = eq.x
    reason = "max_iter"
    clamp_streak = 0
    it = 0
    for it in range(1, cfg.max_outer_iterations + 1):
        assembled = problem.rows(x, stage)
        rows = assembled.objective
        phi0 = problem.objective(s, x, rows)
        if it == 1:
            # the stage may start out converged (e.g. attachments already met)
            errs = _stop_errors(problem, x, stage, assembled)
            if errs.size and errs.max() < cfg.icp_stop:
                icp = problem.cset.icp_distances(problem.mesh, x)
                report.iterations.append(IterationRecord(
                    stage, it, phi0, 0.0, *_stats(errs), *_stats(icp), 0, eq.residual_norm, eq.force_tol,
                    time.perf_counter() - t_start,
                ))
                reason = "icp_error_met"
                break
        ds, _ = gauss_newton_direction(problem, s, x, rows)
        eta, trial = line_search(problem, s, ds, x, rows, phi0)
        if trial is not None:
            s, eq, x = trial.s, trial.eq, trial.eq.x
            if not problem.attached:
                problem.t, problem.R = eq.translation, eq.rotation
            clamp_streak = clamp_streak + 1 if trial.clamped.any() else 0
            if trial.clamped.any():
                log.warning("SPD clamping in %d tets (stage %s, iteration %d)", trial.clamped.sum(), stage, it)
        if not problem.attached:
            x = rigid_update(problem, x, problem.rows(x, stage).objective)
            eq = replace(eq, x=x, translation=problem.t, rotation=problem.R)
        fresh = problem.rows(x, stage)
        errs = _stop_errors(problem, x, stage, fresh)
        icp = problem.cset.icp_distances(problem.mesh, x)
        report.iterations.append(IterationRecord(
            stage, it, problem.objective(s, x, fresh.objective), eta, *_stats(errs), *_stats(icp),
            0 if trial is None else int(trial.clamped.sum()), eq.residual_norm, eq.force_tol,
            time.perf_counter() - t_start,
        ))
        if clamp_streak >= cfg.divergence_patience:
            raise DivergenceError(
                f"SPD clamping in {cfg.divergence_patience} consecutive iterations; "
                "restart with different weights"
            )
        if errs.size and errs.max() < cfg.icp_stop:
            reason = "icp_error_met"
            break
        if eta < cfg.eta_min:
            reason = "eta_small"
            break
    report.stage_results.append((stage, reason, it))
    return s, eq, reason


def fit(mesh: TetMesh, params: MaterialParams, cset: ConstraintSet, config: SolveConfig | None = None,
        s0=None, x0=None):
    """Staged Gauss-Newton fit.  Returns (s, equilibrium, report)."""
    problem = FitProblem(mesh, params, cset, config)
    cfg = problem.config
    report = SolveReport()
    t_start = time.perf_counter()
    icp0 = problem.cset.icp_distances(mesh, mesh.rest_positions if x0 is None else x0)
    report.e_init = dict(zip(("mean", "max"), _stats(icp0)))
    if s0 is not None:
        s = np.asarray(s0, dtype=float).copy()
        eq = problem.equilibrium(s, mesh.rest_positions if x0 is None else x0)
    elif cfg.initial_guess:
        s, eq = initial_guess(problem, x0, report)
    else:
        s = identity_field(mesh.n_tets)
        eq = problem.equilibrium(s, mesh.rest_positions if x0 is None else x0)
    stages = [st for st in cfg.stages if _stage_rows_available(problem.cset, st)]
    reason = "eta_small"
    for stage in stages:
        s, eq, reason = run_stage(problem, stage, s, eq, report, t_start)
    if not stages:
        report.stage_results.append(("none", reason, 0))
    report.termination_reason = reason
    icp = problem.cset.icp_distances(mesh, eq.x)
    report.e_final = dict(zip(("mean", "max"), _stats(icp)))
    report.total_time = time.perf_counter() - t_start
    return s, eq, report


__all__ = [
    "SolveConfig", "SolveReport", "IterationRecord", "FitProblem", "fit", "initial_guess", "run_stage",
    "gauss_newton_direction", "reduced_direction", "weighted_jacobian_transpose", "line_search",
    "brent_line_search", "rigid_update", "EquilibriumError", "DivergenceError", "TERMINATION_REASONS",
    "IDENTITY_S", "positions_of",
]
