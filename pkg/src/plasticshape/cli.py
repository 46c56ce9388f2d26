"""Command-line front end.

    plasticshape fit --mesh beam.node beam.ele --markers markers.jsonl --config config.json --out result/
    plasticshape check-derivatives --seed 0 --trials 100
    plasticshape gen-synthetic --preset beam --out fixture/
    plasticshape report result/report.json

Exit codes: 0 success (any termination reason), 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .equilibrium import EquilibriumState
from .fixtures import beam, box, cube
from .linalg import SingularSystemError
from .material import MaterialParams, PlasticityError
from .optimizer import DivergenceError, EquilibriumError, SolveConfig, TERMINATION_REASONS, fit
from .polar import PolarError
from .tetmesh import TetMesh, embed_points, min_dihedral_report, transform_embedded

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (DivergenceError, SingularSystemError, EquilibriumError, PlasticityError, PolarError,
                    FloatingPointError, np.linalg.LinAlgError)
DERIVATIVE_TOL = 1e-4

log = logging.getLogger("plasticshape")


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- fit --------------------------------------------------------------------------------


def _deterministic_report(report) -> tuple[dict, dict]:
    """Split wall-clock timings out so the main report is reproducible bit for bit."""
    d = report.to_dict()
    timings = {"total_time": d.pop("total_time"), "iteration_wall_time": []}
    for rec in d["iterations"]:
        timings["iteration_wall_time"].append(rec.pop("wall_time"))
    return d, timings


def load_problem(args):
    for p in list(args.mesh) + [args.markers] + ([args.config] if args.config else []):
        if not Path(p).is_file():
            raise FileNotFoundError(f"file not found: {p}")
    mesh = io.read_tetgen(*args.mesh)
    params, config = io.read_config(args.config) if args.config else (MaterialParams(), SolveConfig())
    markers = io.read_markers(args.markers)
    if args.unattached and markers.attachments:
        raise ValueError(f"{args.markers}: --unattached given but the marker file has "
                         f"{len(markers.attachments)} attachments")
    if not args.unattached and len(markers.attachments) < 3:
        raise ValueError(f"{args.markers}: attached fit needs at least 3 attachments "
                         f"(found {len(markers.attachments)}); pass --unattached for free-floating meshes")
    cset = markers.constraint_set(mesh, config.alpha, config.beta)
    return mesh, params, config, cset


def write_outputs(out: Path, mesh: TetMesh, cset, s, eq: EquilibriumState, report, obj=None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = list(io.write_tetgen(out / "fitted", mesh, eq.x))
    written += io.write_field(out / "plastic_field", s)
    rep, timings = _deterministic_report(report)
    rep["equilibrium"] = {"residual_norm": eq.residual_norm, "force_tol": eq.force_tol, "converged": eq.converged,
                          "translation": [float(v) for v in eq.translation],
                          "rotation": [[float(v) for v in r] for r in eq.rotation]}
    io.write_json(out / "report.json", rep)
    io.write_json(out / "timings.json", timings)
    written += [out / "report.json", out / "timings.json"]
    io.write_error_histogram(out / "error_histogram.csv", cset.icp_distances(mesh, mesh.rest_positions),
                             cset.icp_distances(mesh, eq.x))
    io.write_dihedral_report(out / "dihedral.csv", min_dihedral_report(mesh), min_dihedral_report(mesh, eq.x))
    written += [out / "error_histogram.csv", out / "dihedral.csv"]
    if obj is not None:
        embedded = embed_points(mesh, obj.vertices)
        io.write_obj(out / "embedded.obj", obj.with_vertices(transform_embedded(mesh, eq.x, embedded)))
        written.append(out / "embedded.obj")
    return written


def cmd_fit(args) -> int:
    try:
        mesh, params, config, cset = load_problem(args)
        obj = io.read_obj(args.embed_obj) if args.embed_obj else None
    except (OSError, ValueError) as e:
        return _fail(EXIT_INVALID, str(e))
    log.info("mesh: %d vertices, %d tets; markers: %d attachments, %d landmarks, %d icp",
             mesh.n_vertices, mesh.n_tets, len(cset.attachments), len(cset.landmarks), cset.icp_targets.shape[0])
    try:
        s, eq, report = fit(mesh, params, cset, config)
    except NUMERICAL_ERRORS as e:
        return _fail(EXIT_NUMERICAL, f"{type(e).__name__}: {e}")
    try:
        write_outputs(Path(args.out), mesh, cset, s, eq, report, obj)
    except OSError as e:
        return _fail(EXIT_INVALID, str(e))
    print(f"termination: {report.termination_reason}; ICP error mean {report.e_final.get('mean', 0) * 1e3:.3f} mm, "
          f"max {report.e_final.get('max', 0) * 1e3:.3f} mm; wrote {args.out}")
    return EXIT_OK


# -- check-derivatives ------------------------------------------------------------------


def cmd_check_derivatives(args) -> int:
    from .validation import fdcheck

    t0 = time.perf_counter()
    rows = []
    rows += [("material", k, v) for k, v in fdcheck.run_material_suite(args.seed, args.trials).items()]
    rows += [("polar", k, v) for k, v in fdcheck.run_polar_suite(args.seed, max(1, args.trials // 2)).items()]
    rows += [("rest", k, v) for k, v in fdcheck.run_rest_state_check().items()]
    ok = True
    print(f"{'suite':<10}{'block':<14}{'worst rel. error':>18}")
    for suite, block, err in rows:
        bad = not err <= DERIVATIVE_TOL
        ok &= not bad
        print(f"{suite:<10}{block:<14}{err:>18.3e}{'  FAIL' if bad else ''}")
    print(f"{'all blocks within' if ok else 'FAILED: tolerance'} {DERIVATIVE_TOL:g} "
          f"({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK if ok else EXIT_NUMERICAL


# -- gen-synthetic ----------------------------------------------------------------------


def _dragon_analog() -> TetMesh:
    """Genus-0 stand-in for a scanned model: a curled, tapered box."""
    m = box(14, 4, 3, size=(0.14, 0.04, 0.03), origin=(0.0, -0.02, -0.015))
    v = m.vertices_rest.copy()
    u = v[:, 0] / 0.14
    taper = 1.0 - 0.4 * u
    v[:, 1] *= taper
    v[:, 2] *= taper
    v[:, 1] += 0.02 * np.sin(np.pi * u)
    v[:, 2] += 0.01 * (u * u)
    return TetMesh.from_arrays(v, m.tets)


PRESETS = {
    "beam": lambda: beam(),
    "cube": lambda: cube(),
    "dragon-analog": _dragon_analog,
}


def cmd_gen_synthetic(args) -> int:
    from .validation.synthetic import make_synthetic, rotation_about, smooth_field

    mesh = PRESETS[args.preset]()
    s_true = smooth_field(mesh, amplitude=args.amplitude, seed=args.seed)
    rigid = (rotation_about([0, 0, 1], 0.2), np.array([0.01, 0.0, 0.0]))
    try:
        case = make_synthetic(mesh, s_true, n_markers=args.markers, noise=args.noise_mm * 1e-3,
                              attached=not args.unattached, rigid=rigid, seed=args.seed)
    except NUMERICAL_ERRORS + (RuntimeError,) as e:
        return _fail(EXIT_NUMERICAL, f"forward solve failed: {e}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_tetgen(out / "mesh", mesh)
    io.write_tetgen(out / "truth", mesh, case.x_true)
    io.write_field(out / "truth_field", case.s_true)
    io.write_markers(out / "markers.jsonl", case.constraints, mesh, units="mm")
    io.write_config(out / "config.json", case.params, SolveConfig())
    io.write_json(out / "case.json", {
        "preset": args.preset, "seed": args.seed, "noise_mm": args.noise_mm, "amplitude": args.amplitude,
        "attached": not args.unattached, "n_markers": int(case.marker_vertices.size),
        "marker_vertices": [int(v) for v in case.marker_vertices],
        "equilibrium_residual": case.equilibrium.residual_norm,
    })
    flag = " --unattached" if args.unattached else ""
    print(f"wrote {out}: {mesh.n_vertices} vertices, {mesh.n_tets} tets, {case.marker_vertices.size} markers\n"
          f"fit with: plasticshape fit --mesh {out / 'mesh.node'} {out / 'mesh.ele'} "
          f"--markers {out / 'markers.jsonl'} --config {out / 'config.json'} --out <dir>{flag}")
    return EXIT_OK


# -- report -----------------------------------------------------------------------------


def format_report(d: dict, threshold_mm: float = 1.0) -> str:
    lines = []
    e0, e1 = d.get("e_init", {}), d.get("e_final", {})
    lines.append(f"{'':<10}{'mean [mm]':>12}{'max [mm]':>12}")
    lines.append(f"{'e_init':<10}{e0.get('mean', 0) * 1e3:>12.4f}{e0.get('max', 0) * 1e3:>12.4f}")
    ok = e1.get("max", np.inf) * 1e3 <= threshold_mm
    lines.append(f"{'e_final':<10}{e1.get('mean', 0) * 1e3:>12.4f}{e1.get('max', 0) * 1e3:>12.4f}"
                 f"  {'OK' if ok else 'ABOVE'} (threshold {threshold_mm:g} mm)")
    its = d.get("iterations", [])
    lines.append(f"iterations: {len(its)}")
    lines.append("stages:")
    for stage, reason, n in d.get("stage_results", []):
        lines.append(f"  {stage:<12}{reason:<16}{n:>4} iterations")
    reason = d.get("termination_reason")
    lines.append(f"termination: {reason}")
    if reason == "max_iter":
        lines.append("WARNING: iteration limit reached before the stopping criteria were met")
    elif reason not in TERMINATION_REASONS:
        lines.append(f"WARNING: unknown termination reason {reason!r}")
    return "\n".join(lines)


def format_timeline_csv(d: dict) -> str:
    keys = ["stage", "iteration", "objective", "eta", "icp_error_mean", "icp_error_max", "clamped_tets",
            "equilibrium_residual"]
    rows = [",".join(keys)]
    for rec in d.get("iterations", []):
        rows.append(",".join(repr(rec.get(k)) if isinstance(rec.get(k), float) else str(rec.get(k)) for k in keys))
    return "\n".join(rows)


def cmd_report(args) -> int:
    try:
        d = io.read_report(args.report)
    except (OSError, ValueError) as e:
        return _fail(EXIT_INVALID, str(e))
    print(format_timeline_csv(d) if args.csv else format_report(d, args.threshold_mm))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plasticshape", description=__doc__.split("\n")[0] or None,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a plastic strain field to markers")
    f.add_argument("--mesh", nargs=2, metavar=("NODE", "ELE"), required=True, help="TetGen .node and .ele files")
    f.add_argument("--markers", required=True, help="JSON-lines marker file")
    f.add_argument("--config", help="JSON config with 'material' and 'solver' sections")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--unattached", action="store_true", help="free-floating mesh (no attachments)")
    f.add_argument("--embed-obj", help="surface OBJ to carry along with the deformation")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("check-derivatives", help="finite-difference checks of all derivative blocks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trials", type=int, default=100)
    c.set_defaults(func=cmd_check_derivatives)

    g = sub.add_parser("gen-synthetic", help="write a ground-truth fixture")
    g.add_argument("--preset", choices=sorted(PRESETS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--markers", type=int, default=None, help="number of surface markers (default: all)")
    g.add_argument("--noise-mm", type=float, default=0.0, help="Gaussian noise on ICP targets [mm]")
    g.add_argument("--amplitude", type=float, default=0.2, help="plastic field perturbation amplitude")
    g.add_argument("--unattached", action="store_true")
    g.set_defaults(func=cmd_gen_synthetic)

    r = sub.add_parser("report", help="summarize a report.json")
    r.add_argument("report")
    r.add_argument("--threshold-mm", type=float, default=1.0)
    r.add_argument("--csv", action="store_true", help="print the iteration timeline as CSV")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
