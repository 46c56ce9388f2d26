import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plasticshape import fixtures, io
from plasticshape.constraints import Constraint, ConstraintSet
from plasticshape.material import MaterialParams
from plasticshape.optimizer import SolveConfig
from plasticshape.tetmesh import MaterialPoint, MeshError, transform_embedded


def test_tetgen_round_trip_is_bit_exact(tmp_path):
    mesh = fixtures.beam()
    x = mesh.rest_positions + 1e-3 * np.random.default_rng(0).normal(size=3 * mesh.n_vertices) / 3
    node, ele = io.write_tetgen(tmp_path / "m", mesh, x)
    back = io.read_tetgen(node, ele)
    assert np.array_equal(back.vertices_rest.reshape(-1), x)
    assert np.array_equal(back.tets, mesh.tets)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, allow_subnormal=True),
                min_size=3, max_size=3))
def test_node_values_survive_text(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("n") / "p.node"
    io.write_node(path, np.array([vals]))
    back, base = io.read_node(path)
    assert np.array_equal(back[0], np.array(vals, dtype=float))


def test_one_based_files(tmp_path):
    (tmp_path / "a.node").write_text(
        "# comment line\n4 3 0 0\n1 0 0 0\n2 1 0 0  # trailing comment\n3 0 1 0\n4 0 0 1\n")
    (tmp_path / "a.ele").write_text("1 4 0\n1 1 2 3 4\n")
    mesh = io.read_tetgen(tmp_path / "a.node", tmp_path / "a.ele")
    assert mesh.n_tets == 1
    np.testing.assert_array_equal(np.sort(mesh.tets[0]), [0, 1, 2, 3])


def test_attributes_and_markers_are_skipped(tmp_path):
    (tmp_path / "a.node").write_text("4 3 1 1\n0 0 0 0 7.5 1\n1 1 0 0 7.5 1\n2 0 1 0 7.5 0\n3 0 0 1 7.5 1\n")
    (tmp_path / "a.ele").write_text("1 4 1\n0 0 1 2 3 9\n")
    assert io.read_tetgen(tmp_path / "a.node", tmp_path / "a.ele").n_vertices == 4


@pytest.mark.parametrize("text,line,col,msg", [
    ("4 3 0 0\n0 0 0 0\n1 1 x 0\n2 0 1 0\n3 0 0 1\n", 3, 5, "expected number"),
    ("4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n", None, None, "expected 4 points"),
    ("4 2 0 0\n", 1, 3, "only 3D"),
    ("4 3 0 0\n0 0 0 0\n2 1 0 0\n2 0 1 0\n3 0 0 1\n", 3, 1, "out of sequence"),
    ("4 3 0 0\n0 0 0 0\n1 1 0 0 9\n2 0 1 0\n3 0 0 1\n", 3, None, "expected 4 fields"),
    ("4 3 0 0\n0 0 0 0\n1 1 0 nan\n2 0 1 0\n3 0 0 1\n", 3, 7, "non-finite"),
])
def test_node_errors_name_line_and_column(tmp_path, text, line, col, msg):
    path = tmp_path / "bad.node"
    path.write_text(text)
    with pytest.raises(io.FormatError, match=msg) as e:
        io.read_node(path)
    assert e.value.line == line
    assert e.value.column == col
    assert str(path) in str(e.value)


def test_ele_reference_out_of_range(tmp_path):
    (tmp_path / "a.node").write_text("4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n")
    (tmp_path / "a.ele").write_text("1 4 0\n0 0 1 2 4\n")
    with pytest.raises(io.FormatError, match="does not exist") as e:
        io.read_tetgen(tmp_path / "a.node", tmp_path / "a.ele")
    assert (e.value.line, e.value.column) == (2, 9)


def test_degenerate_mesh_file_rejected(tmp_path):
    (tmp_path / "a.node").write_text("4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 1 1 0\n")
    (tmp_path / "a.ele").write_text("1 4 0\n0 0 1 2 3\n")
    with pytest.raises(MeshError, match="degenerate"):
        io.read_tetgen(tmp_path / "a.node", tmp_path / "a.ele")


def test_obj_keeps_other_lines_verbatim(tmp_path):
    src = "# exported\nmtllib a.mtl\nv 0 0 0\nv 1 0 0\nvt 0.5 0.5\nv 0 1 0\nf 1/1 2/1 3/1\n"
    (tmp_path / "a.obj").write_text(src)
    obj = io.read_obj(tmp_path / "a.obj")
    np.testing.assert_array_equal(obj.vertices, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    moved = obj.with_vertices(obj.vertices + 0.25)
    io.write_obj(tmp_path / "b.obj", moved)
    out = (tmp_path / "b.obj").read_text().splitlines()
    orig = src.splitlines()
    for a, b in zip(orig, out):
        if not a.startswith("v "):
            assert a == b
    assert np.array_equal(io.read_obj(tmp_path / "b.obj").vertices, obj.vertices + 0.25)


def _write(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_markers_in_millimeters_are_converted(tmp_path):
    mesh = fixtures.cube5(0.05)
    _write(tmp_path / "m.jsonl", [
        {"units": "mm"},
        {"kind": "attachment", "position": [0, 0, 0], "target": [0, 0, 0]},
        {"kind": "attachment", "tet": 1, "barycentric": [1, 0, 0, 0], "target": [50, 50, 0], "weight": 2},
        {"kind": "attachment", "position": [50, 0, 0], "target": [51, 0, 0]},
        {"kind": "landmark", "position": [25, 25, 25], "target": [25, 25, 30]},
        {"kind": "icp", "target": [25, 25, 55], "weight": 0.5},
    ])
    mf = io.read_markers(tmp_path / "m.jsonl")
    cs = mf.constraint_set(mesh)
    assert cs.counts == (1, 1, 3)
    np.testing.assert_allclose(cs.attachments[2].target, [0.051, 0, 0])
    assert cs.attachments[1].weight == 2.0
    np.testing.assert_allclose(cs.icp_targets, [[0.025, 0.025, 0.055]])
    np.testing.assert_allclose(cs.icp_weights, [0.5])
    p = transform_embedded(mesh, mesh.rest_positions, [cs.landmarks[0].point])[0]
    np.testing.assert_allclose(p, [0.025, 0.025, 0.025], atol=1e-15)


@pytest.mark.parametrize("records,msg", [
    ([{"kind": "icp", "target": [0, 0, 0]}], "declare units"),
    ([{"units": "inch"}], "units must be"),
    ([{"units": "m"}, {"kind": "icp", "target": [0, 0]}], "three finite"),
    ([{"units": "m"}, {"kind": "icp", "target": [0, 0, 0], "weight": 0}], "weight"),
    ([{"units": "m"}, {"kind": "landmark", "target": [0, 0, 0]}], "missing 'position'"),
    ([{"units": "m"}, {"kind": "spring", "target": [0, 0, 0]}], "kind must be"),
])
def test_marker_errors(tmp_path, records, msg):
    _write(tmp_path / "m.jsonl", records)
    with pytest.raises(io.FormatError, match=msg):
        io.read_markers(tmp_path / "m.jsonl")


def test_marker_json_syntax_error_has_position(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"units": "m"}\n{"kind": "icp", "target": [0, 0 0]}\n')
    with pytest.raises(io.FormatError) as e:
        io.read_markers(tmp_path / "m.jsonl")
    assert e.value.line == 2 and e.value.column is not None


def test_missing_marker_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.jsonl"):
        io.read_markers(tmp_path / "nope.jsonl")


def test_marker_write_read_round_trip(tmp_path):
    mesh = fixtures.cube5(0.05)
    p = MaterialPoint(2, [0.1, 0.2, 0.3, 0.4])
    cs = ConstraintSet(attachments=[Constraint(p, [0.01, 0.02, 0.03], 3.0)] * 3,
                       landmarks=[Constraint(p, [0.0, 0.0, 0.1])], icp_targets=[[0.1, 0.2, 0.3]])
    io.write_markers(tmp_path / "m.jsonl", cs, mesh, units="m")
    back = io.read_markers(tmp_path / "m.jsonl").constraint_set(mesh)
    assert back.attachments[0].point.tet_index == 2
    np.testing.assert_array_equal(back.attachments[0].target, cs.attachments[0].target)
    np.testing.assert_allclose(
        transform_embedded(mesh, mesh.rest_positions, [back.landmarks[0].point]),
        transform_embedded(mesh, mesh.rest_positions, [p]), atol=1e-15)
    np.testing.assert_array_equal(back.icp_targets, cs.icp_targets)


def test_config_round_trip_and_mm_stop(tmp_path):
    io.write_config(tmp_path / "c.json", MaterialParams(2e5, 0.3), SolveConfig(alpha=1e7))
    params, cfg = io.read_config(tmp_path / "c.json")
    assert params == MaterialParams(2e5, 0.3)
    assert cfg == SolveConfig(alpha=1e7)
    (tmp_path / "d.json").write_text('{"solver": {"icp_stop_mm": 0.5}}')
    assert io.read_config(tmp_path / "d.json")[1].icp_stop == pytest.approx(5e-4)
    (tmp_path / "e.json").write_text('{"solver": {"bogus": 1}}')
    with pytest.raises(io.FormatError):
        io.read_config(tmp_path / "e.json")


def test_field_files(tmp_path):
    s = np.random.default_rng(0).normal(size=6 * 5)
    npy, csv_path = io.write_field(tmp_path / "f", s)
    assert np.array_equal(io.read_field(npy), s)
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "tet,s1,s2,s3,s4,s5,s6"
    assert float(rows[1].split(",")[1]) == s[0]


def test_error_histogram_counts():
    rows = io.error_histogram([0.0001, 0.002, 0.02], [0.0001, 0.0001, 0.0004])
    assert sum(r[2] for r in rows) == 3 and sum(r[3] for r in rows) == 3
    assert rows[0][:2] == (0.0, 0.25) and rows[0][3] == 2
    assert rows[-1][1] == np.inf and rows[-1][2] == 1


def test_empty_report_rejected(tmp_path):
    (tmp_path / "r.json").write_text("")
    with pytest.raises(io.FormatError, match="empty"):
        io.read_report(tmp_path / "r.json")
    (tmp_path / "r.json").write_text('{"iterations": [], "stage_results": []}')
    with pytest.raises(io.FormatError, match="no iterations"):
        io.read_report(tmp_path / "r.json")
