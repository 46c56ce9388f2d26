"""Tetrahedral mesh geometry.

Rest-shape precomputation, deformation gradients, boundary-surface queries,
barycentric embedding of points and per-tet quality reports.  Vertex position
arrays are accepted either flat (3n,) or shaped (n, 3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

DEGENERATE_VOLUME = 1e-18

# Outward-oriented faces of a positively oriented tet, indexed by the
# opposite vertex.
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    """Raised for malformed or unsupported tet meshes."""


@dataclass(frozen=True)
class MaterialPoint:
    """A point fixed in material space: a tet index plus 4 barycentric weights."""

    tet_index: int
    barycentric: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.barycentric, dtype=float)
        if w.shape != (4,):
            raise ValueError("barycentric must have 4 entries")
        if np.any(w < -1e-12) or np.any(w > 1 + 1e-12) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"invalid barycentric weights {w}")
        object.__setattr__(self, "barycentric", w)


@dataclass(frozen=True)
class SurfacePoint:
    triangle_index: int
    barycentric: np.ndarray
    position: np.ndarray


@dataclass
class TetMesh:
    """Rest geometry of a tetrahedral mesh.

    Attributes
    ----------
    vertices_rest : (n, 3) array
        Rest positions in meters.
    tets : (m, 4) int array
        Vertex indices, oriented so every rest volume is positive.
    rest_shape_inverse : (m, 3, 3) array
        Inverse of the rest edge matrix ``[x1-x0, x2-x0, x3-x0]``.
    rest_volume : (m,) array
    surface_triangles : (k, 3) int array
        Boundary triangles, outward oriented.
    surface_tet : (k,) int array
        Tet owning each boundary triangle.
    """

    vertices_rest: np.ndarray
    tets: np.ndarray
    rest_shape_inverse: np.ndarray = field(repr=False)
    rest_volume: np.ndarray = field(repr=False)
    surface_triangles: np.ndarray = field(repr=False)
    surface_tet: np.ndarray = field(repr=False)
    face_adjacency: np.ndarray = field(repr=False)
    shape_gradients: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices_rest.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @property
    def rest_positions(self) -> np.ndarray:
        """Flat (3n,) copy of the rest positions."""
        return self.vertices_rest.reshape(-1).copy()

    @property
    def surface_vertices(self) -> np.ndarray:
        return np.unique(self.surface_triangles)

    def bbox_diagonal(self, x=None) -> float:
        p = self.vertices_rest if x is None else as_points(x)
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))

    @classmethod
    def from_arrays(cls, vertices, tets) -> "TetMesh":
        """Build a mesh, reorienting inverted tets and validating connectivity."""
        vertices = np.array(vertices, dtype=float).reshape(-1, 3)
        tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        n = vertices.shape[0]
        if tets.size == 0:
            raise MeshError("mesh has no tetrahedra")
        if tets.min() < 0 or tets.max() >= n:
            raise MeshError(f"tet indices out of range [0, {n})")
        if np.any(np.sort(tets, axis=1)[:, 1:] == np.sort(tets, axis=1)[:, :-1]):
            raise MeshError("tet with repeated vertex index")

        edges = _edge_matrices(vertices, tets)
        vol = np.linalg.det(edges) / 6.0
        bad = np.flatnonzero(np.abs(vol) < DEGENERATE_VOLUME)
        if bad.size:
            raise MeshError(f"degenerate tets (|V0| < {DEGENERATE_VOLUME:g} m^3): {bad.tolist()[:20]}")
        flip = vol < 0
        if np.any(flip):
            tets = tets.copy()
            tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
            edges = _edge_matrices(vertices, tets)
            vol = np.linalg.det(edges) / 6.0

        dm_inv = np.linalg.inv(edges)
        grads = np.empty((tets.shape[0], 4, 3))
        grads[:, 1:, :] = dm_inv
        grads[:, 0, :] = -dm_inv.sum(axis=1)

        tris, owner, adjacency = _surface_and_adjacency(tets)
        m = tets.shape[0]
        if m > 1:
            graph = sp.coo_matrix(
                (np.ones(adjacency.shape[0]), (adjacency[:, 0], adjacency[:, 1])), shape=(m, m)
            )
            ncomp, _ = connected_components(graph, directed=False)
            if ncomp != 1:
                raise MeshError(f"mesh has {ncomp} face-connected components; exactly one is required")
        return cls(
            vertices_rest=vertices,
            tets=tets,
            rest_shape_inverse=dm_inv,
            rest_volume=vol,
            surface_triangles=tris,
            surface_tet=owner,
            face_adjacency=adjacency,
            shape_gradients=grads,
        )


def as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, 3)


def _edge_matrices(points, tets):
    p = points[tets]
    return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)


def _surface_and_adjacency(tets):
    m = tets.shape[0]
    faces = tets[:, TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(m), 4)
    key = np.sort(faces, axis=1)
    order = np.lexsort(key.T[::-1])
    key_sorted = key[order]
    same_as_next = np.all(key_sorted[1:] == key_sorted[:-1], axis=1)
    if np.any(same_as_next[1:] & same_as_next[:-1]):
        raise MeshError("non-manifold mesh: a face is shared by more than two tets")
    pair_start = np.flatnonzero(same_as_next)
    interior = np.zeros(len(order), dtype=bool)
    interior[pair_start] = True
    interior[pair_start + 1] = True
    adjacency = np.stack([owner[order[pair_start]], owner[order[pair_start + 1]]], axis=1)
    boundary = np.sort(order[~interior])
    return faces[boundary], owner[boundary], adjacency


def deformation_gradients(mesh: TetMesh, x) -> np.ndarray:
    """Per-tet deformation gradients ``F = D_s D_m^{-1}``, shape (m, 3, 3)."""
    p = as_points(x)[mesh.tets]
    return np.einsum("tai,taj->tij", p, mesh.shape_gradients)


def deformation_gradient(mesh: TetMesh, x, tet: int) -> np.ndarray:
    p = as_points(x)[mesh.tets[tet]]
    return np.einsum("ai,aj->ij", p, mesh.shape_gradients[tet])


def signed_volumes(mesh: TetMesh, x) -> np.ndarray:
    return np.linalg.det(_edge_matrices(as_points(x), mesh.tets)) / 6.0


def surface_volume(mesh: TetMesh, x=None) -> float:
    """Enclosed volume from the boundary triangles (divergence theorem)."""
    p = mesh.vertices_rest if x is None else as_points(x)
    a, b, c = (p[mesh.surface_triangles[:, i]] for i in range(3))
    return float(np.einsum("ti,ti->t", a, np.cross(b, c)).sum() / 6.0)


# -- closest points -------------------------------------------------------------


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p, all broadcastable (..., 3).

    Returns the closest points and their barycentric weights (..., 3).
    Region classification follows Ericson, Real-Time Collision Detection 5.1.5.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, a, b, c)))
    shape = p.shape[:-1]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    bary = np.zeros(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def assign(mask, w):
        nonlocal done
        mask = mask & ~done
        bary[mask] = w[mask] if w.ndim > 1 else w
        done = done | mask

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
        assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
        assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, 0 * v], axis=-1))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, 0 * w, w], axis=-1))
        u = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([0 * u, 1 - u, u], axis=-1))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(shape, dtype=bool), np.stack([1 - v - w, v, w], axis=-1))
    q = bary[..., :1] * a + bary[..., 1:2] * b + bary[..., 2:] * c
    return q, bary


def closest_surface_points(mesh: TetMesh, x, z, chunk: int = 256) -> list[SurfacePoint]:
    """Exhaustive nearest point on the deformed boundary for each row of z."""
    p = as_points(x)
    z = np.asarray(z, dtype=float).reshape(-1, 3)
    tri = mesh.surface_triangles
    a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
    out = []
    for start in range(0, z.shape[0], chunk):
        zc = z[start:start + chunk, None, :]
        q, w = closest_points_on_triangles(zc, a[None], b[None], c[None])
        d2 = np.sum((q - zc) ** 2, axis=-1)
        best = np.argmin(d2, axis=1)
        for i, k in enumerate(best):
            out.append(SurfacePoint(int(k), w[i, k].copy(), q[i, k].copy()))
    return out


def closest_surface_point(mesh: TetMesh, x, z) -> SurfacePoint:
    return closest_surface_points(mesh, x, np.asarray(z).reshape(1, 3))[0]


def surface_point_to_material(mesh: TetMesh, sp_: SurfacePoint) -> MaterialPoint:
    """Express a boundary-triangle point as a material point of its owner tet."""
    tet = int(mesh.surface_tet[sp_.triangle_index])
    verts = mesh.surface_triangles[sp_.triangle_index]
    w = np.zeros(4)
    for local, v in enumerate(mesh.tets[tet]):
        hit = np.flatnonzero(verts == v)
        if hit.size:
            w[local] = sp_.barycentric[hit[0]]
    w = np.clip(w, 0.0, 1.0)
    return MaterialPoint(tet, w / w.sum())


# -- embedding ------------------------------------------------------------------


def tet_barycentrics(mesh: TetMesh, points, x=None) -> np.ndarray:
    """Barycentric coordinates of every point in every tet, shape (P, m, 4)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if x is None:
        v, dm_inv = mesh.vertices_rest, mesh.rest_shape_inverse
    else:
        v = as_points(x)
        dm_inv = np.linalg.inv(_edge_matrices(v, mesh.tets))
    x0 = v[mesh.tets[:, 0]]
    rel = pts[:, None, :] - x0[None]
    l123 = np.einsum("tij,ptj->pti", dm_inv, rel)
    return np.concatenate([1.0 - l123.sum(axis=-1, keepdims=True), l123], axis=-1)


def embed_points(mesh: TetMesh, points, chunk: int = 64) -> list[MaterialPoint]:
    """Map rest-space points to material points.

    Points inside the mesh land in a containing tet; points outside are clamped to
    the nearest tet (the embedding reproduces the closest point on that tet).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    v = mesh.vertices_rest
    corners = v[mesh.tets]
    result = []
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        lam = tet_barycentrics(mesh, block)
        worst = lam.min(axis=-1)
        for i, p in enumerate(block):
            k = int(np.argmax(worst[i]))
            scale = max(1.0, float(np.abs(p).max()))
            if worst[i, k] >= -1e-12 * scale:
                w = np.clip(lam[i, k], 0.0, None)
                result.append(MaterialPoint(k, w / w.sum()))
                continue
            f = TET_FACES
            q, w = closest_points_on_triangles(
                p[None, None], corners[:, f[:, 0]], corners[:, f[:, 1]], corners[:, f[:, 2]]
            )
            d2 = np.sum((q - p) ** 2, axis=-1)
            t, face = np.unravel_index(np.argmin(d2), d2.shape)
            bary = np.zeros(4)
            bary[f[face]] = np.clip(w[t, face], 0.0, None)
            result.append(MaterialPoint(int(t), bary / bary.sum()))
    return result


def transform_embedded(mesh: TetMesh, x, embedded) -> np.ndarray:
    """Positions of material points under vertex positions x, shape (P, 3)."""
    p = as_points(x)
    if not embedded:
        return np.zeros((0, 3))
    idx = np.array([e.tet_index for e in embedded])
    w = np.stack([e.barycentric for e in embedded])
    return np.einsum("pa,pai->pi", w, p[mesh.tets[idx]])


# -- quality --------------------------------------------------------------------

_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def dihedral_angles(mesh: TetMesh, x=None) -> np.ndarray:
    """All six interior dihedral angles per tet in degrees, shape (m, 6)."""
    p = (mesh.vertices_rest if x is None else as_points(x))[mesh.tets]
    normals = []
    for f in TET_FACES:
        n = np.cross(p[:, f[1]] - p[:, f[0]], p[:, f[2]] - p[:, f[0]])
        normals.append(n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300))
    angles = np.empty((p.shape[0], 6))
    for e, (i, j) in enumerate(_EDGES):
        k, l = (q for q in range(4) if q not in (i, j))
        cosang = np.clip(np.einsum("ti,ti->t", normals[k], normals[l]), -1.0, 1.0)
        angles[:, e] = 180.0 - np.degrees(np.arccos(cosang))
    return angles


@dataclass
class DihedralReport:
    min_angles: np.ndarray
    inverted: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray

    def rows(self):
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


def min_dihedral_report(mesh: TetMesh, x=None, bin_edges=None) -> DihedralReport:
    """Histogram of per-tet minimum dihedral angles; inverted/flat tets count as 0 degrees."""
    if bin_edges is None:
        bin_edges = np.linspace(0.0, 90.0, 19)
    bin_edges = np.asarray(bin_edges, dtype=float)
    xx = mesh.vertices_rest if x is None else x
    vol = signed_volumes(mesh, xx)
    scale = np.abs(mesh.rest_volume)
    inverted = vol <= 1e-12 * scale
    mins = dihedral_angles(mesh, xx).min(axis=1)
    mins = np.where(inverted, 0.0, mins)
    counts, _ = np.histogram(mins, bins=bin_edges)
    return DihedralReport(mins, inverted, bin_edges, counts)
