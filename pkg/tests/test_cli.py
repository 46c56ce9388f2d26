import json

import numpy as np
import pytest

from plasticshape import cli, io
from plasticshape.optimizer import TERMINATION_REASONS


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert cli.main(["gen-synthetic", "--preset", "beam", "--out", str(out), "--seed", "0", "--markers", "40"]) == 0
    return out


def _fit_args(d, out, *extra):
    return ["fit", "--mesh", str(d / "mesh.node"), str(d / "mesh.ele"), "--markers", str(d / "markers.jsonl"),
            "--config", str(d / "config.json"), "--out", str(out), *extra]


@pytest.fixture(scope="module")
def fitted(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert cli.main(_fit_args(fixture_dir, out)) == 0
    return out


ARTIFACTS = ["fitted.node", "fitted.ele", "plastic_field.npy", "plastic_field.csv", "report.json",
             "error_histogram.csv", "dihedral.csv"]


def test_gen_synthetic_writes_fixture(fixture_dir):
    for name in ["mesh.node", "mesh.ele", "truth.node", "truth_field.npy", "markers.jsonl", "config.json",
                 "case.json"]:
        assert (fixture_dir / name).is_file()
    case = json.loads((fixture_dir / "case.json").read_text())
    assert case["n_markers"] == 40 and case["attached"]


def test_fit_writes_artifacts(fitted):
    for name in ARTIFACTS:
        assert (fitted / name).is_file(), name
    rep = json.loads((fitted / "report.json").read_text())
    assert rep["termination_reason"] in TERMINATION_REASONS
    assert rep["equilibrium"]["converged"]
    mesh = io.read_tetgen(fitted / "fitted.node", fitted / "fitted.ele")
    assert mesh.n_tets == np.load(fitted / "plastic_field.npy").shape[0]


def test_rerun_is_bitwise_identical(fixture_dir, fitted, tmp_path):
    assert cli.main(_fit_args(fixture_dir, tmp_path)) == 0
    for name in ARTIFACTS:
        assert (tmp_path / name).read_bytes() == (fitted / name).read_bytes(), name


def test_embedded_obj(fixture_dir, tmp_path):
    (tmp_path / "s.obj").write_text("v 0.05 0 0\nv 0.1 0 0\nv 0.05 0.01 0\nvt 0 0\nf 1/1 2/1 3/1\n")
    assert cli.main(_fit_args(fixture_dir, tmp_path / "o", "--embed-obj", str(tmp_path / "s.obj"))) == 0
    obj = io.read_obj(tmp_path / "o" / "embedded.obj")
    assert obj.lines[3:] == ["vt 0 0", "f 1/1 2/1 3/1"]


def test_missing_marker_file(fixture_dir, tmp_path, capsys):
    args = _fit_args(fixture_dir, tmp_path)
    args[args.index("--markers") + 1] = str(tmp_path / "missing.jsonl")
    assert cli.main(args) == cli.EXIT_INVALID
    assert "missing.jsonl" in capsys.readouterr().err


def test_unattached_flag_with_attachments_is_rejected(fixture_dir, tmp_path, capsys):
    assert cli.main(_fit_args(fixture_dir, tmp_path, "--unattached")) == cli.EXIT_INVALID
    assert "attachments" in capsys.readouterr().err


def test_malformed_mesh_is_validation_error(fixture_dir, tmp_path, capsys):
    (tmp_path / "bad.node").write_text("3 3 0 0\n0 0 0 0\n")
    args = _fit_args(fixture_dir, tmp_path / "o")
    args[args.index("--mesh") + 1] = str(tmp_path / "bad.node")
    assert cli.main(args) == cli.EXIT_INVALID
    assert "bad.node" in capsys.readouterr().err


def test_numerical_failure_exit_code(fixture_dir, tmp_path, monkeypatch):
    from plasticshape.optimizer import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("clamping persisted")

    monkeypatch.setattr(cli, "fit", boom)
    assert cli.main(_fit_args(fixture_dir, tmp_path)) == cli.EXIT_NUMERICAL


def test_report_text(fitted, capsys):
    assert cli.main(["report", str(fitted / "report.json")]) == 0
    out = capsys.readouterr().out
    assert "e_init" in out and "e_final" in out and "OK" in out
    assert "termination:" in out


def test_report_flags_max_iter(tmp_path, capsys):
    d = {"iterations": [{"stage": "icp", "iteration": 1}], "stage_results": [["icp", "max_iter", 20]],
         "termination_reason": "max_iter", "e_init": {"mean": 0.01, "max": 0.02},
         "e_final": {"mean": 0.002, "max": 0.004}}
    (tmp_path / "r.json").write_text(json.dumps(d))
    assert cli.main(["report", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert "WARNING" in out and "ABOVE" in out


def test_report_empty_is_error(tmp_path):
    (tmp_path / "r.json").write_text("")
    assert cli.main(["report", str(tmp_path / "r.json")]) == cli.EXIT_INVALID


def test_report_csv(fitted, capsys):
    assert cli.main(["report", str(fitted / "report.json"), "--csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("stage,iteration,objective")
    assert len(lines) > 1


def test_check_derivatives_passes(capsys):
    assert cli.main(["check-derivatives", "--seed", "1", "--trials", "4"]) == 0
    out = capsys.readouterr().out
    for block in ("grad_x", "hess_ss", "d2R_dF2", "sylvester"):
        assert block in out


def test_check_derivatives_fails_on_bad_block(monkeypatch, capsys):
    from plasticshape.validation import fdcheck

    monkeypatch.setattr(fdcheck, "run_material_suite", lambda seed, trials: {"hess_xs": 0.5})
    assert cli.main(["check-derivatives", "--trials", "2"]) == cli.EXIT_NUMERICAL
    assert "FAIL" in capsys.readouterr().out
