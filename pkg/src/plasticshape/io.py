"""File formats for problems and results.

TetGen ``.node``::

    <#points> <dim=3> <#attributes> <#boundary markers (0/1)>
    <index> <x> <y> <z> [attributes...] [marker]

TetGen ``.ele``::

    <#tets> <nodes per tet=4> <#attributes>
    <index> <n0> <n1> <n2> <n3> [attributes...]

``#`` starts a comment.  Indices are 0- or 1-based; the base is taken from the
first point index and applied to the ``.ele`` node references.

Marker files are JSON lines.  The first record declares the length unit, every
other record is one constraint::

    {"units": "mm"}
    {"kind": "attachment", "position": [x, y, z], "target": [x, y, z], "weight": 1.0}
    {"kind": "attachment", "tet": 12, "barycentric": [.25, .25, .25, .25], "target": [...]}
    {"kind": "landmark", "position": [x, y, z], "target": [x, y, z]}
    {"kind": "icp", "target": [x, y, z], "weight": 2.0}

``position`` is a rest-space point embedded into its containing tet.  All
coordinates are converted to meters at load time.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import Constraint, ConstraintSet
from .material import MaterialParams
from .optimizer import SolveConfig
from .tetmesh import MaterialPoint, TetMesh, embed_points

UNITS = {"m": 1.0, "mm": 1e-3}


class FormatError(ValueError):
    """Malformed input file; carries the path and 1-based line/column."""

    def __init__(self, path, line: int | None, message: str, column: int | None = None):
        self.path = str(path)
        self.line = line
        self.column = column
        where = self.path
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")


def _records(path):
    """Yield (line number, tokens, column offsets) of non-blank, non-comment lines."""
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0]
            toks, cols = [], []
            pos = 0
            for tok in text.split():
                pos = text.index(tok, pos)
                toks.append(tok)
                cols.append(pos + 1)
                pos += len(tok)
            if toks:
                yield lineno, toks, cols


def _number(path, lineno, tok, col, kind=float):
    try:
        v = kind(tok)
    except ValueError:
        raise FormatError(path, lineno, f"expected {'integer' if kind is int else 'number'}, got {tok!r}", col) from None
    if kind is float and not np.isfinite(v):
        raise FormatError(path, lineno, f"non-finite coordinate {tok!r}", col)
    return v


def read_node(path):
    """Return (vertices (n, 3), index base)."""
    it = _records(path)
    try:
        lineno, toks, cols = next(it)
    except StopIteration:
        raise FormatError(path, None, "empty .node file") from None
    if len(toks) < 2:
        raise FormatError(path, lineno, "header needs '<#points> <dim> [<#attributes> <#markers>]'")
    n = _number(path, lineno, toks[0], cols[0], int)
    dim = _number(path, lineno, toks[1], cols[1], int)
    nattr = _number(path, lineno, toks[2], cols[2], int) if len(toks) > 2 else 0
    nmark = _number(path, lineno, toks[3], cols[3], int) if len(toks) > 3 else 0
    if dim != 3:
        raise FormatError(path, lineno, f"only 3D meshes are supported (dim = {dim})", cols[1])
    if n <= 0:
        raise FormatError(path, lineno, "no points declared", cols[0])
    width = 4 + nattr + nmark
    verts = np.empty((n, 3))
    base = None
    for k in range(n):
        try:
            lineno, toks, cols = next(it)
        except StopIteration:
            raise FormatError(path, None, f"expected {n} points, found {k}") from None
        if len(toks) != width:
            raise FormatError(path, lineno, f"expected {width} fields, found {len(toks)}")
        idx = _number(path, lineno, toks[0], cols[0], int)
        if base is None:
            if idx not in (0, 1):
                raise FormatError(path, lineno, f"first point index must be 0 or 1, got {idx}", cols[0])
            base = idx
        if idx != k + base:
            raise FormatError(path, lineno, f"point index {idx} out of sequence (expected {k + base})", cols[0])
        verts[k] = [_number(path, lineno, toks[j], cols[j]) for j in (1, 2, 3)]
    for lineno, _, _ in it:
        raise FormatError(path, lineno, "trailing data after the declared points")
    return verts, base


def read_ele(path, n_vertices: int, base: int) -> np.ndarray:
    it = _records(path)
    try:
        lineno, toks, cols = next(it)
    except StopIteration:
        raise FormatError(path, None, "empty .ele file") from None
    m = _number(path, lineno, toks[0], cols[0], int)
    npt = _number(path, lineno, toks[1], cols[1], int) if len(toks) > 1 else 4
    nattr = _number(path, lineno, toks[2], cols[2], int) if len(toks) > 2 else 0
    if npt != 4:
        raise FormatError(path, lineno, f"only linear tets are supported ({npt} nodes per tet)", cols[1])
    if m <= 0:
        raise FormatError(path, lineno, "no tetrahedra declared", cols[0])
    tets = np.empty((m, 4), dtype=np.int64)
    for k in range(m):
        try:
            lineno, toks, cols = next(it)
        except StopIteration:
            raise FormatError(path, None, f"expected {m} tets, found {k}") from None
        if len(toks) != 5 + nattr:
            raise FormatError(path, lineno, f"expected {5 + nattr} fields, found {len(toks)}")
        for j in range(4):
            v = _number(path, lineno, toks[1 + j], cols[1 + j], int) - base
            if not 0 <= v < n_vertices:
                raise FormatError(path, lineno, f"node {v + base} does not exist ({n_vertices} points, base {base})",
                                  cols[1 + j])
            tets[k, j] = v
    for lineno, _, _ in it:
        raise FormatError(path, lineno, "trailing data after the declared tets")
    return tets


def read_tetgen(node_path, ele_path) -> TetMesh:
    """Load and validate a TetGen mesh (degenerate tets and split meshes are rejected)."""
    verts, base = read_node(node_path)
    tets = read_ele(ele_path, verts.shape[0], base)
    return TetMesh.from_arrays(verts, tets)


def write_node(path, vertices, base: int = 0) -> None:
    """Positions are written with ``repr`` so a read back is bit-identical."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write(f"{v.shape[0]} 3 0 0\n")
        for i, p in enumerate(v):
            fh.write(f"{i + base} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def write_ele(path, tets, base: int = 0) -> None:
    t = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    with open(path, "w") as fh:
        fh.write(f"{t.shape[0]} 4 0\n")
        for i, row in enumerate(t + base):
            fh.write(f"{i + base} {row[0]} {row[1]} {row[2]} {row[3]}\n")


def write_tetgen(stem, mesh: TetMesh, x=None, base: int = 0) -> tuple[Path, Path]:
    stem = Path(stem)
    node, ele = stem.with_suffix(".node"), stem.with_suffix(".ele")
    write_node(node, mesh.vertices_rest if x is None else x, base)
    write_ele(ele, mesh.tets, base)
    return node, ele


# -- OBJ --------------------------------------------------------------------------------


@dataclass
class ObjFile:
    """Vertex positions plus every other line kept verbatim, for in-place rewriting."""

    vertices: np.ndarray
    lines: list
    vertex_lines: list  # line index of each 'v' record

    def with_vertices(self, vertices) -> "ObjFile":
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        if v.shape != self.vertices.shape:
            raise ValueError("vertex count mismatch")
        lines = list(self.lines)
        for li, p in zip(self.vertex_lines, v):
            lines[li] = f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
        return ObjFile(v, lines, list(self.vertex_lines))


def read_obj(path) -> ObjFile:
    lines = Path(path).read_text().splitlines()
    verts, vlines = [], []
    for i, line in enumerate(lines):
        toks = line.split()
        if toks and toks[0] == "v":
            if len(toks) < 4:
                raise FormatError(path, i + 1, "vertex needs three coordinates")
            col = line.index("v") + 3
            verts.append([_number(path, i + 1, t, col) for t in toks[1:4]])
            vlines.append(i)
    if not verts:
        raise FormatError(path, None, "OBJ has no vertices")
    return ObjFile(np.array(verts), lines, vlines)


def write_obj(path, obj: ObjFile) -> None:
    Path(path).write_text("\n".join(obj.lines) + "\n")


# -- markers ----------------------------------------------------------------------------


@dataclass
class MarkerFile:
    units: str
    attachments: list = field(default_factory=list)  # (MaterialPoint | rest position, target, weight)
    landmarks: list = field(default_factory=list)
    icp: list = field(default_factory=list)  # (target, weight)

    def constraint_set(self, mesh: TetMesh, alpha: float = 1e9, beta: float = 1e8) -> ConstraintSet:
        """Embed rest-space positions into tets and build the constraint set."""
        def build(entries):
            out = []
            pos = [(k, e[0]) for k, e in enumerate(entries) if not isinstance(e[0], MaterialPoint)]
            points = dict(zip([k for k, _ in pos], embed_points(mesh, np.array([p for _, p in pos])))) if pos else {}
            for k, (where, target, w) in enumerate(entries):
                out.append(Constraint(points.get(k, where), target, w))
            return out

        icp_t = np.array([t for t, _ in self.icp]).reshape(-1, 3)
        icp_w = np.array([w for _, w in self.icp])
        return ConstraintSet(attachments=build(self.attachments), landmarks=build(self.landmarks),
                             icp_targets=icp_t, icp_weights=icp_w, alpha=alpha, beta=beta)


def _vec3(path, lineno, rec, key, scale=1.0):
    if key not in rec:
        raise FormatError(path, lineno, f"missing '{key}'")
    try:
        v = np.asarray(rec[key], dtype=float)
    except (TypeError, ValueError):
        raise FormatError(path, lineno, f"'{key}' must be three numbers") from None
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise FormatError(path, lineno, f"'{key}' must be three finite numbers")
    return v * scale


def read_markers(path) -> MarkerFile:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"marker file not found: {path}")
    units = None
    out = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise FormatError(path, lineno, f"invalid JSON: {e.msg}", e.colno) from None
            if not isinstance(rec, dict):
                raise FormatError(path, lineno, "each line must be a JSON object")
            if units is None:
                if "units" not in rec:
                    raise FormatError(path, lineno, "first record must declare units, e.g. {\"units\": \"mm\"}")
                units = rec["units"]
                if units not in UNITS:
                    raise FormatError(path, lineno, f"units must be one of {sorted(UNITS)}, got {units!r}")
                out = MarkerFile(units)
                continue
            scale = UNITS[units]
            kind = rec.get("kind")
            w = rec.get("weight", 1.0)
            if not isinstance(w, (int, float)) or not w > 0 or not np.isfinite(w):
                raise FormatError(path, lineno, f"weight must be a positive number, got {w!r}")
            target = _vec3(path, lineno, rec, "target", scale)
            if kind == "icp":
                out.icp.append((target, float(w)))
            elif kind in ("attachment", "landmark"):
                if "tet" in rec and kind == "attachment":
                    bary = np.asarray(rec.get("barycentric", [0.25] * 4), dtype=float)
                    try:
                        where = MaterialPoint(int(rec["tet"]), bary)
                    except (TypeError, ValueError) as e:
                        raise FormatError(path, lineno, str(e)) from None
                else:
                    where = _vec3(path, lineno, rec, "position", scale)
                (out.attachments if kind == "attachment" else out.landmarks).append((where, target, float(w)))
            else:
                raise FormatError(path, lineno, f"kind must be attachment, landmark or icp, got {kind!r}")
    if units is None:
        raise FormatError(path, None, "marker file is empty (units must be declared)")
    return out


def write_markers(path, cset: ConstraintSet, mesh: TetMesh, units: str = "m") -> None:
    """Write a constraint set as a marker file (material points written as tet + barycentric)."""
    scale = 1.0 / UNITS[units]

    def vec(v):
        return [float(c) * scale for c in v]

    with open(path, "w") as fh:
        fh.write(json.dumps({"units": units}) + "\n")
        for c in cset.attachments:
            fh.write(json.dumps({"kind": "attachment", "tet": int(c.point.tet_index),
                                 "barycentric": [float(b) for b in c.point.barycentric],
                                 "target": vec(c.target), "weight": c.weight}) + "\n")
        for c in cset.landmarks:
            p = mesh.vertices_rest[mesh.tets[c.point.tet_index]].T @ c.point.barycentric
            fh.write(json.dumps({"kind": "landmark", "position": vec(p), "target": vec(c.target),
                                 "weight": c.weight}) + "\n")
        for t, w in zip(cset.icp_targets, cset.icp_weights):
            fh.write(json.dumps({"kind": "icp", "target": vec(t), "weight": float(w)}) + "\n")


# -- configuration ----------------------------------------------------------------------


def read_config(path) -> tuple[MaterialParams, SolveConfig]:
    """JSON with optional ``material`` {young_modulus, poisson_ratio} and ``solver`` sections.

    ``solver.icp_stop_mm`` is accepted as the ICP stop threshold in millimeters.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as e:
        raise FormatError(path, e.lineno, f"invalid JSON: {e.msg}", e.colno) from None
    unknown = set(d) - {"material", "solver"}
    if unknown:
        raise FormatError(path, None, f"unknown config sections: {sorted(unknown)}")
    try:
        params = MaterialParams(**d.get("material", {}))
        solver = dict(d.get("solver", {}))
        if "icp_stop_mm" in solver:
            solver["icp_stop"] = float(solver.pop("icp_stop_mm")) * 1e-3
        config = SolveConfig.from_dict(solver)
    except TypeError as e:
        raise FormatError(path, None, f"bad config key: {e}") from None
    except ValueError as e:
        raise FormatError(path, None, str(e)) from None
    return params, config


def write_config(path, params: MaterialParams, config: SolveConfig) -> None:
    d = {"material": {"young_modulus": params.young_modulus, "poisson_ratio": params.poisson_ratio},
         "solver": config.to_dict()}
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


# -- results ----------------------------------------------------------------------------


def write_field(stem, s) -> tuple[Path, Path]:
    """Plastic field as ``.npy`` (exact) and ``.csv`` (one tet per row)."""
    stem = Path(stem)
    s = np.asarray(s, dtype=float).reshape(-1, 6)
    npy, csv_path = stem.with_suffix(".npy"), stem.with_suffix(".csv")
    np.save(npy, s)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tet", "s1", "s2", "s3", "s4", "s5", "s6"])
        for i, row in enumerate(s):
            w.writerow([i] + [repr(float(v)) for v in row])
    return npy, csv_path


def read_field(path) -> np.ndarray:
    return np.load(path).reshape(-1)


def error_histogram(initial, final, bin_edges_mm=None) -> list[tuple]:
    """Rows (lo_mm, hi_mm, initial count, final count); last bin is open-ended."""
    if bin_edges_mm is None:
        bin_edges_mm = np.array([0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0, np.inf])
    a = np.asarray(initial, dtype=float) * 1e3
    b = np.asarray(final, dtype=float) * 1e3
    ca, _ = np.histogram(a, bins=bin_edges_mm)
    cb, _ = np.histogram(b, bins=bin_edges_mm)
    return [(float(lo), float(hi), int(x), int(y))
            for lo, hi, x, y in zip(bin_edges_mm[:-1], bin_edges_mm[1:], ca, cb)]


def write_error_histogram(path, initial, final) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo_mm", "hi_mm", "initial", "final"])
        w.writerows(error_histogram(initial, final))


def write_dihedral_report(path, rest_report, fitted_report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo_deg", "hi_deg", "rest", "fitted"])
        for (lo, hi, a), (_, _, b) in zip(rest_report.rows(), fitted_report.rows()):
            w.writerow([lo, hi, a, b])
        w.writerow(["inverted", "", int(rest_report.inverted.sum()), int(fitted_report.inverted.sum())])


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"report not found: {path}")
    text = path.read_text()
    if not text.strip():
        raise FormatError(path, None, "report is empty")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(path, e.lineno, f"invalid JSON: {e.msg}", e.colno) from None
    if not isinstance(d, dict) or not d.get("stage_results") and not d.get("iterations"):
        raise FormatError(path, None, "report has no iterations")
    return d
