"""Ground-truth plastic deformation cases and recovery scoring.

A case prescribes a smooth plastic field s*, solves the forward equilibrium x*
(quasi-statically; the optimizer only ever sees equilibria), and samples
landmarks and ICP markers from the deformed surface.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..constraints import Constraint, ConstraintSet, MarkerRows
from ..equilibrium import EquilibriumState, ShapeMatching, static_solve_attached, static_solve_unattached
from ..material import MaterialParams, PlasticityError, fp_from_s, s_from_fp
from ..optimizer import SolveConfig, fit
from ..polar import polar
from ..tetmesh import MaterialPoint, TetMesh, embed_points, min_dihedral_report


def _vertex_point(mesh: TetMesh, v: int) -> MaterialPoint:
    t, a = np.argwhere(mesh.tets == v)[0]
    w = np.zeros(4)
    w[a] = 1.0
    return MaterialPoint(int(t), w)


def tet_centroids(mesh: TetMesh) -> np.ndarray:
    return mesh.vertices_rest[mesh.tets].mean(axis=1)


# -- field recipes --------------------------------------------------------------------


def constant_field(mesh: TetMesh, fp) -> np.ndarray:
    return np.tile(s_from_fp(np.asarray(fp, dtype=float)), mesh.n_tets)


def smooth_field(mesh: TetMesh, amplitude: float = 0.3, seed: int = 0) -> np.ndarray:
    """Low-frequency trigonometric perturbation of the identity over rest positions."""
    rng = np.random.default_rng(seed)
    c = tet_centroids(mesh)
    lo, hi = mesh.vertices_rest.min(0), mesh.vertices_rest.max(0)
    u = (c - lo) / np.maximum(hi - lo, 1e-12)  # in [0, 1]^3
    fields = np.zeros((mesh.n_tets, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            k = rng.normal(size=3)
            phase = rng.uniform(0, 2 * np.pi)
            scale = amplitude if i == j else 0.5 * amplitude
            val = scale * np.sin(np.pi * u @ k * 0.5 + phase)
            fields[:, i, j] = val
            fields[:, j, i] = val
    fields += np.eye(3)
    return np.concatenate([s_from_fp(f) for f in fields])


def band_stretch_field(mesh: TetMesh, axis: int = 1, stretch: float = 2.0, along: int = 0,
                       center: float = 0.5, half_width: float = 0.25, ramp: float = 0.1) -> np.ndarray:
    """Stretch ``axis`` by ``stretch`` inside a band along ``along``, smoothly ramped to identity."""
    c = tet_centroids(mesh)
    lo, hi = mesh.vertices_rest.min(0)[along], mesh.vertices_rest.max(0)[along]
    u = (c[:, along] - lo) / (hi - lo)
    d = np.abs(u - center) - half_width
    w = np.clip(0.5 - d / (2 * ramp), 0.0, 1.0)
    w = w * w * (3 - 2 * w)  # smoothstep
    out = np.tile(np.array([1.0, 0, 0, 1, 0, 1]), (mesh.n_tets, 1))
    col = {0: 0, 1: 3, 2: 5}[axis]
    out[:, col] = 1.0 + (stretch - 1.0) * w
    return out.reshape(-1)


def band_weights(mesh: TetMesh, along: int = 0, center: float = 0.5, half_width: float = 0.25) -> np.ndarray:
    """Boolean per-tet mask of the band's fully stretched interior."""
    c = tet_centroids(mesh)
    lo, hi = mesh.vertices_rest.min(0)[along], mesh.vertices_rest.max(0)[along]
    u = (c[:, along] - lo) / (hi - lo)
    return np.abs(u - center) <= half_width


def check_field_spd(s, floor: float = 0.0) -> None:
    ev = np.linalg.eigvalsh(np.stack([fp_from_s(v) for v in np.asarray(s).reshape(-1, 6)]))
    if ev.min() <= floor:
        raise PlasticityError(f"field recipe is not SPD: min eigenvalue {ev.min():.3e}")


# -- cases ----------------------------------------------------------------------------


@dataclass
class SyntheticCase:
    mesh: TetMesh
    params: MaterialParams
    s_true: np.ndarray
    x_true: np.ndarray
    constraints: ConstraintSet
    marker_vertices: np.ndarray
    noise: float = 0.0
    attached: bool = True
    equilibrium: EquilibriumState | None = None
    meta: dict = field(default_factory=dict)


def rotation_about(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def end_vertices(mesh: TetMesh, axis: int = 0, side: str = "min", tol: float = 1e-9) -> np.ndarray:
    X = mesh.vertices_rest
    ref = X[:, axis].min() if side == "min" else X[:, axis].max()
    return np.flatnonzero(np.abs(X[:, axis] - ref) <= tol * max(1.0, abs(ref)) + tol)


def make_synthetic(
    mesh: TetMesh,
    s_true,
    params: MaterialParams | None = None,
    n_markers: int | None = None,
    noise: float = 0.0,
    attached: bool = True,
    attachment_vertices=None,
    attachment_targets=None,
    rigid=(np.eye(3), np.zeros(3)),
    landmark_fraction: float = 0.5,
    alpha: float = 1e9,
    beta: float = 1e8,
    seed: int = 0,
) -> SyntheticCase:
    """Forward-solve x* for s* and sample markers from the deformed surface.

    Attached cases pin ``attachment_vertices`` (default: the min-x face) to
    ``attachment_targets`` (default: rest positions).  Unattached cases use the
    surface-vertex stabilizer with the rigid motion ``rigid = (R, t)``.
    ``landmark_fraction`` of the markers become landmarks, the rest ICP markers;
    every marker also appears as an ICP marker so the final stage sees all of them.
    """
    params = params or MaterialParams()
    s_true = np.asarray(s_true, dtype=float).reshape(-1)
    check_field_spd(s_true)
    rng = np.random.default_rng(seed)
    x0 = mesh.rest_positions
    attachments = []
    if attached:
        av = end_vertices(mesh) if attachment_vertices is None else np.asarray(attachment_vertices)
        targets = mesh.vertices_rest[av] if attachment_targets is None else np.asarray(attachment_targets, float)
        attachments = [Constraint(_vertex_point(mesh, int(v)), p) for v, p in zip(av, targets)]
        cs = ConstraintSet(attachments=attachments, alpha=alpha, beta=beta)
        springs = cs.attachment_rows(mesh)
        eq = _forward_attached(mesh, params, s_true, springs, x0)
    else:
        R, t = rigid
        stab = ShapeMatching.from_vertices(mesh, mesh.surface_vertices)
        eq = static_solve_unattached(mesh, params, s_true, t, R, stab, x0, force_tol=_tight_tol(mesh, params))
    if not eq.converged:
        raise RuntimeError(f"forward equilibrium failed (|f| = {eq.residual_norm:.3e})")
    x_true = eq.x
    sv = mesh.surface_vertices
    if attached:
        sv = np.setdiff1d(sv, [a for a in (end_vertices(mesh) if attachment_vertices is None else attachment_vertices)])
    if n_markers is not None and n_markers < sv.size:
        sv = np.sort(rng.choice(sv, size=n_markers, replace=False))
    P = x_true.reshape(-1, 3)[sv]
    n_lm = int(round(landmark_fraction * sv.size))
    lm_idx = np.sort(rng.choice(sv.size, size=n_lm, replace=False)) if n_lm else np.zeros(0, int)
    landmarks = [Constraint(_vertex_point(mesh, int(sv[i])), P[i]) for i in lm_idx]
    icp = P + (rng.normal(scale=noise, size=P.shape) if noise > 0 else 0.0)
    cset = ConstraintSet(attachments=attachments, landmarks=landmarks, icp_targets=icp, alpha=alpha, beta=beta)
    return SyntheticCase(mesh, params, s_true, x_true, cset, sv, noise, attached, eq)


def _tight_tol(mesh, params):
    d = mesh.bbox_diagonal()
    return 1e-11 * params.young_modulus * d * d


def _forward_attached(mesh, params, s, springs: MarkerRows, x0):
    """Continuation in the plastic field from identity for a robust forward solve."""
    ident = np.tile([1.0, 0, 0, 1, 0, 1], mesh.n_tets)
    x = x0
    eq = None
    for a in np.linspace(0.25, 1.0, 4):
        eq = static_solve_attached(mesh, params, ident + a * (s - ident), springs, x,
                                   force_tol=_tight_tol(mesh, params), max_iter=200)
        x = eq.x
    return eq


# -- scoring --------------------------------------------------------------------------


def field_error(s_fit, s_true) -> np.ndarray:
    """Per-tet ``|S_fit - S*|_F / |S*|_F`` of the symmetric polar factors (rotation gauge removed)."""
    a = np.asarray(s_fit).reshape(-1, 6)
    b = np.asarray(s_true).reshape(-1, 6)
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        Sa = polar(fp_from_s(a[i]))[1]
        Sb = polar(fp_from_s(b[i]))[1]
        out[i] = np.linalg.norm(Sa - Sb) / np.linalg.norm(Sb)
    return out


def recover_and_score(case: SyntheticCase, config: SolveConfig | None = None) -> dict:
    config = config or SolveConfig()
    s, eq, report = fit(case.mesh, case.params, case.constraints, config)
    mesh = case.mesh
    icp = case.constraints.icp_distances(mesh, eq.x)
    vert_err = np.linalg.norm(eq.x.reshape(-1, 3)[case.marker_vertices] - case.x_true.reshape(-1, 3)[case.marker_vertices], axis=1)
    fe = field_error(s, case.s_true)
    return {
        "s": s,
        "equilibrium": eq,
        "report": report,
        "icp_error_mean": float(icp.mean()) if icp.size else 0.0,
        "icp_error_max": float(icp.max()) if icp.size else 0.0,
        "marker_error_mean": float(vert_err.mean()),
        "marker_error_max": float(vert_err.max()),
        "field_error_mean": float(fe.mean()),
        "field_error_max": float(fe.max()),
        "bbox_diagonal": mesh.bbox_diagonal(),
        "min_dihedral": float(min_dihedral_report(mesh, eq.x).min_angles.min()),
    }


__all__ = [
    "SyntheticCase", "make_synthetic", "recover_and_score", "field_error", "constant_field", "smooth_field",
    "band_stretch_field", "band_weights", "rotation_about", "end_vertices", "tet_centroids", "check_field_spd",
    "embed_points",
]
