"""Small reference meshes used by tests, presets and the synthetic generator."""
from __future__ import annotations

import itertools

import numpy as np

from .tetmesh import TetMesh


def unit_tet() -> TetMesh:
    return TetMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


def regular_tet(edge: float = 1.0) -> TetMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    v *= edge / (2 * np.sqrt(2))
    return TetMesh.from_arrays(v, [[0, 1, 2, 3]])


def two_tets() -> TetMesh:
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]]
    return TetMesh.from_arrays(v, [[0, 1, 2, 3], [1, 2, 3, 4]])


def cube5(size: float = 1.0) -> TetMesh:
    """Unit cube split into a central tet and four corner tets."""
    v = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=float) * size
    # corner index = 4x + 2y + z
    tets = [[0, 4, 2, 1], [6, 4, 2, 7], [5, 4, 1, 7], [3, 2, 1, 7], [4, 2, 1, 7]]
    return TetMesh.from_arrays(v, tets)


def box(nx: int, ny: int, nz: int, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TetMesh:
    """Axis-aligned box with every cell split into 6 tets sharing its main diagonal."""
    xs = np.linspace(0, size[0], nx + 1) + origin[0]
    ys = np.linspace(0, size[1], ny + 1) + origin[1]
    zs = np.linspace(0, size[2], nz + 1) + origin[2]
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        for perm in itertools.permutations(range(3)):
            corner = [0, 0, 0]
            path = [vid(i, j, k)]
            for axis in perm:
                corner[axis] = 1
                path.append(vid(i + corner[0], j + corner[1], k + corner[2]))
            tets.append(path)
    return TetMesh.from_arrays(verts, tets)


def beam(length: float = 0.1, width: float = 0.02, cells=(10, 2, 2)) -> TetMesh:
    """Beam along x, centred on the x axis."""
    return box(*cells, size=(length, width, width), origin=(0.0, -width / 2, -width / 2))


def cube(size: float = 0.05, cells: int = 3) -> TetMesh:
    h = size / 2
    return box(cells, cells, cells, size=(size, size, size), origin=(-h, -h, -h))
