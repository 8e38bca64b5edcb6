"""Command-line harness for the stiffness-driven deformation experiments.

Subcommands cover the three study stages plus plumbing:

* ``cohort-stats``: stiffness histogram and exceedance fractions from a cohort
  CSV or a directory of elastogram volumes.
* ``synth-cohort``: generate a synthetic cohort (volumes + cohort CSV).
* ``build-model``: elastogram volume -> mesh-free model archive.
* ``retract``: settle a hoisted model and write landmark positions.
* ``compare``: one elastogram vs the constant-atlas twin -> comparison row.
* ``cohort-run``: the comparison over a whole cohort, skipping bad cases.
* ``validate-beam``: cantilever benchmark against analytic theory and FEA.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 solver
non-convergence. All outputs are deterministic for a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from elastosim.beam import (
    BeamSpec,
    axis_samples,
    build_beam_phantom,
    convergence_error,
    fea_baseline,
    simulate_beam,
    theory_curve,
    write_beam_convergence_csv,
)
from elastosim.experiment import (
    CohortCase,
    RetractionConfig,
    RetractorSpec,
    SyntheticCohortSpec,
    compare_case,
    default_landmarks,
    default_retractor,
    run_cohort_retractions,
    simulate_retraction,
    synth_cohort,
    write_comparison_csv,
    young_material_field,
)
from elastosim.meshfree import build_model, load_model, save_model
from elastosim.solver import (
    IndefiniteSystemError,
    NonConvergenceError,
    displace_landmarks,
    write_landmarks_csv,
)
from elastosim.volume import (
    CohortRecord,
    RoiMask,
    VolumeFormatError,
    cohort_stats,
    load_cohort_csv,
    load_volume,
    mean_shear_modulus,
    shear_to_young,
    stiffness_histogram,
    write_cohort_csv,
    write_volume,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with code 1 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be NX,NY,NZ integers, got {text!r}")
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError(f"dims must be 3 positive integers, got {text!r}")
    return parts


def _point(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"point must be X,Y,Z floats, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"point must be 3 comma-separated floats, got {text!r}")
    return parts


def _add_model_flags(p: argparse.ArgumentParser, nodes: int = 300, k: int = 8):
    p.add_argument("--nodes", type=int, default=nodes, help=f"DOF node count (default {nodes})")
    p.add_argument("--k", type=int, default=k, help=f"shape-function support size (default {k})")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--sim-nu", type=float, default=0.45,
                   help="Poisson ratio used in assembly (default 0.45)")
    p.add_argument("--conversion-nu", type=float, default=0.5,
                   help="Poisson ratio for the E = 2G(1+nu) conversion (default 0.5)")
    p.add_argument("--density", type=float, default=1060.0,
                   help="tissue density in kg/m^3 (default 1060)")
    p.add_argument("--alpha", type=float, default=0.1,
                   help="mass-proportional damping (default 0.1)")
    p.add_argument("--beta", type=float, default=0.01,
                   help="stiffness-proportional damping (default 0.01)")


def _add_solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--support-k", type=float, default=0.05,
                   help="abdomen support spring stiffness in N/mm (default 0.05)")
    p.add_argument("--mass-kg", type=float, default=None,
                   help="hoisted mass in kg (default: masked volume x density)")
    p.add_argument("--h-ms", type=float, default=50.0,
                   help="implicit time step in milliseconds (default 50)")
    p.add_argument("--v-tol", type=float, default=1e-6,
                   help="steady-state velocity tolerance in mm/s (default 1e-6)")
    p.add_argument("--max-steps", type=int, default=5000,
                   help="step budget before declaring non-convergence (default 5000)")
    p.add_argument("--cg-tol", type=float, default=1e-6,
                   help="CG relative residual tolerance (default 1e-6)")
    p.add_argument("--cg-max", type=int, default=200,
                   help="CG iteration cap per solve (default 200)")


def _add_comparison_flags(p: argparse.ArgumentParser):
    p.add_argument("--atlas-e-kpa", type=float, default=2.1,
                   help="population atlas Young's modulus in kPa (default 2.1)")
    p.add_argument("--significance-mm", type=float, default=5.0,
                   help="clinical significance threshold in mm (default 5.0)")
    p.add_argument("--voxel-mm", type=float, default=1.64,
                   help="reference imaging voxel size in mm (default 1.64)")


def _add_retractor_flags(p: argparse.ArgumentParser):
    p.add_argument("--tool-center", type=_point, default=None, metavar="X,Y,Z",
                   help="retractor center in mm (default: +x pole of the mask)")
    p.add_argument("--diameter", type=float, default=10.0,
                   help="retractor diameter in mm (default 10)")


def _add_synth_flags(p: argparse.ArgumentParser):
    p.add_argument("--median-kpa", type=float, default=2.8,
                   help="log-normal median of mean shear G in kPa (default 2.8)")
    p.add_argument("--log-sd", type=float, default=0.45,
                   help="log-normal sd of mean shear G (default 0.45)")
    p.add_argument("--heterogeneity", type=float, default=0.0,
                   help="within-volume stiffness variation fraction (default 0)")
    p.add_argument("--dims", type=_dims, default=(32, 26, 16), metavar="NX,NY,NZ",
                   help="synthetic volume grid (default 32,26,16)")


def _load_volume_cases(dir_path: Path) -> list[CohortCase]:
    """Read every `<case>.json` elastogram in a directory as a cohort case.

    The tissue mask is recovered as the strictly positive voxels, matching how
    the synthetic generator zeroes everything outside the organ.
    """
    if not dir_path.is_dir():
        raise VolumeFormatError(f"not a directory: {dir_path}")
    headers = sorted(dir_path.glob("*.json"))
    if not headers:
        raise VolumeFormatError(f"no volume headers (*.json) in {dir_path}")
    cases = []
    for header in headers:
        vol = load_volume(header)
        mask = RoiMask(dims=vol.dims, flags=vol.data > 0)
        g = mean_shear_modulus(vol, mask)
        record = CohortRecord(id=header.stem, mean_shear_G=g, young_E=shear_to_young(g))
        cases.append(CohortCase(record=record, volume=vol, mask=mask))
    return cases


def _retraction_config(args) -> RetractionConfig:
    retractor = None
    if args.tool_center is not None:
        retractor = RetractorSpec(diameter=args.diameter, center=args.tool_center)
    return RetractionConfig(
        n_nodes=args.nodes,
        k=args.k,
        seed=args.seed,
        atlas_e_kpa=args.atlas_e_kpa,
        significance_mm=args.significance_mm,
        conversion_nu=args.conversion_nu,
        sim_nu=args.sim_nu,
        density=args.density,
        abdomen_k=args.support_k,
        liver_mass_kg=args.mass_kg,
        retractor=retractor,
        alpha=args.alpha,
        beta=args.beta,
        h=args.h_ms / 1000.0,
        v_tol=args.v_tol,
        max_steps=args.max_steps,
        cg_tol=args.cg_tol,
        cg_max=args.cg_max,
        voxel_ref_mm=args.voxel_mm,
    )


def cmd_cohort_stats(args) -> int:
    if args.csv is not None:
        records = load_cohort_csv(args.csv)
    else:
        records = [c.record for c in _load_volume_cases(Path(args.volumes))]
    edges, counts = stiffness_histogram(records, bin_width=args.bin_width)
    frac_plus1, frac_double = cohort_stats(records, atlas_E=args.atlas_e_kpa)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    hist_path = out / "cohort_hist.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(count)])

    median_e = float(np.median([r.young_E for r in records]))
    stats_path = out / "cohort_stats.csv"
    with open(stats_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "median_E_kPa",
                         "frac_E_above_atlas_plus_1kPa", "frac_E_above_double_atlas"])
        writer.writerow([len(records), repr(median_e), repr(frac_plus1), repr(frac_double)])

    print(f"{len(records)} records -> {hist_path}, {stats_path}")
    print(f"median E {median_e:.3f} kPa; {frac_plus1:.1%} above atlas+1 kPa; "
          f"{frac_double:.1%} above 2x atlas")
    return EXIT_OK


def cmd_synth_cohort(args) -> int:
    spec = SyntheticCohortSpec(
        n=args.n,
        seed=args.seed,
        median_kpa=args.median_kpa,
        log_sd=args.log_sd,
        heterogeneity=args.heterogeneity,
    )
    cases = synth_cohort(spec, dims=args.dims, voxel_mm=args.voxel_mm)
    out = Path(args.out)
    for case in cases:
        write_volume(case.volume, out / f"{case.record.id}.json")
    csv_path = write_cohort_csv([c.record for c in cases], out / "cohort.csv")
    print(f"wrote {len(cases)} volumes and {csv_path}")
    return EXIT_OK


def cmd_build_model(args) -> int:
    vol = load_volume(args.volume)
    mask = RoiMask(dims=vol.dims, flags=vol.data > 0)
    field = young_material_field(
        vol, mask,
        conversion_nu=args.conversion_nu,
        sim_nu=args.sim_nu,
        density=args.density,
    )
    model = build_model(
        field,
        n_nodes=args.nodes,
        k=args.k,
        alpha=args.alpha,
        beta=args.beta,
        seed=args.seed,
    )
    path = save_model(model, Path(args.out))
    print(f"{model.n_nodes} nodes / {model.n_dofs} DOFs, "
          f"mass {model.total_mass_kg * 1000:.1f} g -> {path}")
    return EXIT_OK


def cmd_retract(args) -> int:
    model = load_model(args.model)
    if args.tool_center is not None:
        retractor = RetractorSpec(diameter=args.diameter, center=args.tool_center)
    else:
        pole = default_retractor(model.field)
        retractor = RetractorSpec(diameter=args.diameter, center=pole.center)
    state = simulate_retraction(
        model, retractor,
        liver_mass_kg=args.mass_kg,
        abdomen_k=args.support_k,
        h=args.h_ms / 1000.0,
        v_tol=args.v_tol,
        max_steps=args.max_steps,
        cg_max=args.cg_max,
        cg_tol=args.cg_tol,
    )
    marks = default_landmarks(model, retractor)
    moved = displace_landmarks(model, state, marks)
    out = Path(args.out)
    rest_path = write_landmarks_csv(marks, out / "landmarks_rest.csv")
    moved_path = write_landmarks_csv(moved, out / "landmarks.csv")
    shift = max(float(np.linalg.norm(b - a)) for (_, a), (_, b) in zip(marks, moved))
    print(f"settled at t={state.t:.2f} s; largest landmark shift {shift:.3f} mm")
    print(f"wrote {rest_path} and {moved_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    vol = load_volume(args.volume)
    mask = RoiMask(dims=vol.dims, flags=vol.data > 0)
    g = mean_shear_modulus(vol, mask)
    case = CohortCase(
        record=CohortRecord(
            id=Path(args.volume).stem,
            mean_shear_G=g,
            young_E=shear_to_young(g, args.conversion_nu),
        ),
        volume=vol,
        mask=mask,
    )
    report = compare_case(case, _retraction_config(args))
    path = write_comparison_csv([report], Path(args.out) / "comparison.csv")
    print(f"{report.case_id}: mean {report.mean_volume_diff:.3f} mm, "
          f"at tool {report.at_tool_diff:.3f} mm, "
          f"significant={'true' if report.significant else 'false'} -> {path}")
    return EXIT_OK


def cmd_cohort_run(args) -> int:
    if args.cohort is not None:
        cases = _load_volume_cases(Path(args.cohort))
    else:
        spec = SyntheticCohortSpec(
            n=args.synth_n,
            seed=args.seed,
            median_kpa=args.median_kpa,
            log_sd=args.log_sd,
            heterogeneity=args.heterogeneity,
        )
        cases = synth_cohort(spec, dims=args.dims, voxel_mm=args.voxel_mm)
    result = run_cohort_retractions(cases, _retraction_config(args))
    path = write_comparison_csv(result.reports, Path(args.out) / "comparison.csv")
    n_sig = sum(1 for r in result.reports if r.significant)
    print(f"{len(result.reports)} cases compared, {len(result.skipped)} skipped -> {path}")
    print(f"significant at tool: {n_sig}/{len(result.reports)}")
    for case_id, reason in result.skipped:
        print(f"skipped {case_id}: {reason}")
    return EXIT_OK


def cmd_validate_beam(args) -> int:
    slender = args.slender
    resolution = args.resolution if args.resolution is not None else (0.625 if slender else 1.64)
    if slender:
        spec = BeamSpec(L=50.0, w=10.0, h_beam=2.5, E=12.0, q_load=6e-8, resolution=resolution)
    else:
        spec = BeamSpec(L=50.0, w=10.0, h_beam=10.0, E=12.0, q_load=1e-4, resolution=resolution)
    n_nodes = args.nodes if args.nodes is not None else (2441 if slender else 500)

    theory = theory_curve(spec, axis_samples(spec))
    fea = fea_baseline(spec)
    phantom = build_beam_phantom(spec, n_nodes=n_nodes, k=args.k, seed=args.seed)
    mesh = simulate_beam(phantom)
    err_fea = convergence_error(fea, theory)
    err_mesh = convergence_error(mesh, theory)
    path = write_beam_convergence_csv(theory, fea, mesh, Path(args.out) / "beam_convergence.csv")

    label = "slender" if slender else "benchmark"
    print(f"{label} beam at {resolution} mm: analytic tip {theory.tip_deflection:.4f} mm")
    print(f"FEA        max_abs {err_fea['max_abs']:.5f} mm, rms {err_fea['rms']:.5f} mm")
    print(f"mesh-free  max_abs {err_mesh['max_abs']:.5f} mm, rms {err_mesh['rms']:.5f} mm "
          f"({n_nodes} nodes, k={args.k})")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="elastosim",
        description="Stiffness-driven soft-tissue deformation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("cohort-stats",
                       help="histogram + exceedance fractions for a stiffness cohort")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--csv", help="cohort CSV (id,G_kPa,E_kPa)")
    src.add_argument("--volumes", help="directory of elastogram volumes (*.json + *.raw)")
    p.add_argument("--bin-width", type=float, default=1.0,
                   help="histogram bin width in kPa (default 1.0)")
    p.add_argument("--atlas-e-kpa", type=float, default=2.1,
                   help="population atlas Young's modulus in kPa (default 2.1)")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_cohort_stats)

    p = sub.add_parser("synth-cohort", help="generate a synthetic stiffness cohort")
    p.add_argument("--n", type=int, default=120, help="number of cases (default 120)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    _add_synth_flags(p)
    p.add_argument("--voxel-mm", type=float, default=1.64,
                   help="voxel pitch in mm (default 1.64)")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_synth_cohort)

    p = sub.add_parser("build-model", help="build a mesh-free model from an elastogram")
    p.add_argument("--volume", required=True, help="elastogram volume header (.json)")
    _add_model_flags(p)
    p.add_argument("--out", default="model.esm", help="model archive path (default model.esm)")
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("retract", help="hoist a model and write landmark positions")
    p.add_argument("--model", required=True, help="model archive from build-model")
    _add_retractor_flags(p)
    _add_solver_flags(p)
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_retract)

    p = sub.add_parser("compare",
                       help="one elastogram vs its constant-atlas twin -> comparison.csv")
    p.add_argument("--volume", required=True, help="elastogram volume header (.json)")
    _add_model_flags(p)
    _add_retractor_flags(p)
    _add_solver_flags(p)
    _add_comparison_flags(p)
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cohort-run",
                       help="measured-vs-atlas comparison over a whole cohort")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--cohort", help="directory of elastogram volumes")
    src.add_argument("--synth-n", type=int, default=3,
                     help="synthesize this many cases instead (default 3)")
    _add_synth_flags(p)
    _add_model_flags(p)
    _add_retractor_flags(p)
    _add_solver_flags(p)
    _add_comparison_flags(p)
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_cohort_run)

    p = sub.add_parser("validate-beam",
                       help="cantilever benchmark: analytic theory vs FEA vs mesh-free")
    p.add_argument("--resolution", type=float, default=None,
                   help="voxel/element edge in mm (default 1.64; 0.625 with --slender)")
    p.add_argument("--slender", action="store_true",
                   help="thin-beam variant (h=2.5 mm) where bending theory is exact")
    p.add_argument("--nodes", type=int, default=None,
                   help="mesh-free node count (default 500; 2441 with --slender)")
    p.add_argument("--k", type=int, default=6,
                   help="shape-function support size (default 6)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.set_defaults(func=cmd_validate_beam)

    return parser


def cli_main(argv=None) -> int:
    """Parse arguments, dispatch, and map failures onto the exit-code contract."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (NonConvergenceError, IndefiniteSystemError) as exc:
        print(f"elastosim: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (VolumeFormatError, ValueError, OSError) as exc:
        print(f"elastosim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


main = cli_main
