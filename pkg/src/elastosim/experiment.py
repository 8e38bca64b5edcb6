"""Retraction experiments on synthetic stiffness volumes.

This module wires the full pipeline together: generate a cohort of
elastogram-like stiffness volumes on ellipsoidal masks, build a mesh-free
model per case, hoist a retractor region against gravity to steady state,
and compare the per-case (measured-stiffness) deformation against the same
run with a single population atlas stiffness.  The headline quantity is the
displacement difference at the retractor: when it exceeds the clinical
significance threshold, atlas-based guidance would misplace landmarks.

Patient scans are not distributable, so cohorts here are synthetic and the
statistics demonstrate the machinery rather than reproduce clinical rates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from elastosim.meshfree import MaterialField, MeshFreeModel, build_model
from elastosim.solver import (
    LoadCase,
    NonConvergenceError,
    SimState,
    displace_landmarks,
    run_to_steady_state,
)
from elastosim.volume import (
    CohortRecord,
    RoiMask,
    VoxelVolume,
    mean_shear_modulus,
    shear_to_young,
)

GRAVITY_MM_S2 = (0.0, 0.0, -9810.0)
STANDARD_G_M_S2 = 9.81  # hoist force per kg, in N


@dataclass(frozen=True)
class RetractorSpec:
    """Hook retractor contact: where it grabs the surface and where it pulls.

    The application region is either an explicit node set or all nodes
    within ``radius`` (default ``diameter / 2``) of ``center``.

    Attributes:
        diameter: contact diameter in mm.
        center: contact point on the tissue surface in mm, or None when
            ``nodes`` is given.
        direction: unit hoist direction.
        nodes: explicit node indices overriding the center/radius mapping.
        radius: region radius in mm; defaults to half the diameter.
    """

    diameter: float = 10.0
    center: tuple[float, float, float] | None = None
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    nodes: frozenset[int] | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError(f"retractor diameter must be > 0, got {self.diameter}")
        direction = np.asarray(self.direction, dtype=float)
        if direction.shape != (3,) or abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("hoist direction must be a unit 3-vector (within 1e-9)")
        object.__setattr__(self, "direction", tuple(direction))
        if self.nodes is not None:
            nodes = frozenset(int(i) for i in self.nodes)
            if not nodes:
                raise ValueError("explicit application region must be nonempty")
            object.__setattr__(self, "nodes", nodes)
        elif self.center is None:
            raise ValueError("retractor needs either a center or explicit nodes")
        else:
            center = np.asarray(self.center, dtype=float)
            if center.shape != (3,):
                raise ValueError("retractor center must be a 3-vector")
            object.__setattr__(self, "center", tuple(center))
        if self.radius is not None and self.radius <= 0:
            raise ValueError(f"region radius must be > 0, got {self.radius}")

    @property
    def region_radius(self) -> float:
        return self.radius if self.radius is not None else self.diameter / 2.0

    def map_region(self, node_positions: np.ndarray) -> np.ndarray:
        """Node indices the retractor grabs, sorted ascending.

        Raises:
            ValueError: the region maps to no node.
        """
        if self.nodes is not None:
            region = np.array(sorted(self.nodes), dtype=int)
            if region.max(initial=-1) >= len(node_positions):
                raise ValueError("application region references nodes beyond the model")
            return region
        d = np.linalg.norm(node_positions - np.asarray(self.center), axis=1)
        region = np.flatnonzero(d <= self.region_radius)
        if len(region) == 0:
            raise ValueError(
                f"no node within {self.region_radius} mm of retractor center "
                f"{self.center}; application region is empty"
            )
        return region


@dataclass(frozen=True)
class ComparisonReport:
    """Displacement differences between a measured-stiffness run and its atlas twin.

    Attributes:
        case_id: cohort case label.
        per_landmark: (label, |d_measured - d_atlas| in mm) per landmark.
        mean_volume_diff: mean node displacement difference over all nodes, mm.
        at_tool_diff: max node displacement difference over the application
            region, mm.
        significant: True iff at_tool_diff exceeds the clinical threshold.
        threshold_mm: the significance threshold used.
        voxel_ref_mm: imaging voxel size the differences are judged against.
    """

    case_id: str
    per_landmark: tuple
    mean_volume_diff: float
    at_tool_diff: float
    significant: bool
    threshold_mm: float = 5.0
    voxel_ref_mm: float = 1.64

    def __post_init__(self):
        marks = tuple((str(label), float(d)) for label, d in self.per_landmark)
        if any(d < 0 for _, d in marks):
            raise ValueError("landmark differences must be >= 0")
        if self.mean_volume_diff < 0 or self.at_tool_diff < 0:
            raise ValueError("displacement differences must be >= 0")
        if self.significant != (self.at_tool_diff > self.threshold_mm):
            raise ValueError("significant flag must equal at_tool_diff > threshold")
        object.__setattr__(self, "per_landmark", marks)


@dataclass(frozen=True)
class SyntheticCohortSpec:
    """Log-normal stiffness cohort parameters.

    Attributes:
        n: number of cases.
        seed: RNG seed; fixes records, masks, and volumes.
        median_kpa: median of the log-normal mean shear modulus G.
        log_sd: standard deviation of log G.
        heterogeneity: spatial variation amplitude within each volume, as a
            fraction of the case's G; 0 gives constant volumes.
    """

    n: int
    seed: int = 0
    median_kpa: float = 2.8
    log_sd: float = 0.45
    heterogeneity: float = 0.0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"cohort size must be >= 0, got {self.n}")
        if self.median_kpa <= 0:
            raise ValueError(f"median stiffness must be > 0, got {self.median_kpa}")
        if self.log_sd < 0:
            raise ValueError(f"log-sd must be >= 0, got {self.log_sd}")
        if not 0.0 <= self.heterogeneity < 1.0:
            raise ValueError(
                f"heterogeneity must lie in [0, 1), got {self.heterogeneity}"
            )


@dataclass(frozen=True)
class CohortCase:
    """One synthetic scan: stiffness record, elastogram volume, tissue mask."""

    record: CohortRecord
    volume: VoxelVolume
    mask: RoiMask


def ellipsoid_mask(
    dims: tuple[int, int, int],
    voxel_mm: float,
    semi_axes_mm: tuple[float, float, float],
    center_mm: tuple[float, float, float] | None = None,
) -> RoiMask:
    """Mask of voxels whose centers fall inside an axis-aligned ellipsoid."""
    nx, ny, nz = dims
    if center_mm is None:
        center_mm = (nx * voxel_mm / 2.0, ny * voxel_mm / 2.0, nz * voxel_mm / 2.0)
    vol = VoxelVolume(
        dims=dims,
        spacing_mm=(voxel_mm,) * 3,
        kind="elastogram_shear_kPa",
        data=np.zeros(nx * ny * nz, dtype=np.float32),
    )
    rel = (vol.voxel_centers() - np.asarray(center_mm)) / np.asarray(semi_axes_mm)
    flags = (rel**2).sum(axis=1) <= 1.0
    return RoiMask(dims=dims, flags=flags)


def _smooth_pattern(centers: np.ndarray, extent_mm: np.ndarray, rng) -> np.ndarray:
    """Smooth zero-ish-mean spatial pattern normalized to max |value| = 1."""
    acc = np.zeros(len(centers))
    for _ in range(3):
        freq = rng.integers(1, 3, size=3)  # 1 or 2 periods per axis
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        waves = np.sin(2.0 * np.pi * freq * centers / extent_mm + phase)
        acc += rng.uniform(0.3, 1.0) * waves.prod(axis=1)
    peak = np.abs(acc).max()
    return acc / peak if peak > 0 else acc


def _exact_mean_volume(
    dims: tuple[int, int, int],
    voxel_mm: float,
    mask: RoiMask,
    values: np.ndarray,
    target_mean: float,
) -> VoxelVolume:
    """Elastogram whose float64 masked mean equals target_mean almost exactly.

    Values are stored as float32; a multiplicative rescale plus a one-voxel
    trim pins the mean to within a few 1e-11 relative despite the rounding.
    """
    data = np.zeros(int(np.prod(dims)), dtype=np.float32)
    flat = np.flatnonzero(mask.flags)
    data[flat] = values.astype(np.float32)
    current = float(data[flat].astype(np.float64).mean())
    data[flat] = (data[flat].astype(np.float64) * (target_mean / current)).astype(
        np.float32
    )
    total = data[flat].astype(np.float64).sum()
    want = target_mean * len(flat)
    data[flat[0]] = np.float32(data[flat[0]].astype(np.float64) + (want - total))
    return VoxelVolume(
        dims=dims,
        spacing_mm=(voxel_mm,) * 3,
        kind="elastogram_shear_kPa",
        data=data,
    )


def synth_cohort(
    spec: SyntheticCohortSpec,
    dims: tuple[int, int, int] = (32, 26, 16),
    voxel_mm: float = 1.64,
) -> list[CohortCase]:
    """Generate a deterministic cohort of stiffness volumes on ellipsoidal masks.

    Each case draws a mean shear modulus G from the log-normal distribution,
    jitters the ellipsoid shape, optionally adds smooth spatial variation,
    and enforces that the masked mean of the stored volume equals G within
    1e-9 relative so the record and the volume never disagree.
    """
    master = np.random.default_rng(spec.seed)
    # One child stream per case so records and masks do not depend on the
    # heterogeneity setting (patterns draw extra numbers only when enabled).
    case_seeds = master.integers(0, 2**63 - 1, size=spec.n, dtype=np.uint64)
    extent = np.array(dims, dtype=float) * voxel_mm
    cases = []
    for i in range(spec.n):
        rng = np.random.default_rng(int(case_seeds[i]))
        g = spec.median_kpa * np.exp(spec.log_sd * rng.standard_normal())
        axes = rng.uniform(0.72, 0.92, size=3) * extent / 2.0
        mask = ellipsoid_mask(dims, voxel_mm, tuple(axes))
        if spec.heterogeneity > 0:
            vol_probe = VoxelVolume(
                dims=dims,
                spacing_mm=(voxel_mm,) * 3,
                kind="elastogram_shear_kPa",
                data=np.zeros(int(np.prod(dims)), dtype=np.float32),
            )
            centers = vol_probe.voxel_centers()[mask.flags]
            pattern = _smooth_pattern(centers, extent, rng)
            values = g * (1.0 + spec.heterogeneity * pattern)
        else:
            values = np.full(mask.n_selected, g)
        volume = _exact_mean_volume(dims, voxel_mm, mask, values, g)
        record = CohortRecord(
            id=f"case_{i:03d}", mean_shear_G=g, young_E=shear_to_young(g)
        )
        cases.append(CohortCase(record=record, volume=volume, mask=mask))
    return cases


def stiff_inclusion_case(
    contrast: float,
    dims: tuple[int, int, int] = (32, 26, 16),
    voxel_mm: float = 1.64,
    atlas_e_kpa: float = 2.1,
    inclusion_radius_mm: float = 9.0,
    conversion_nu: float = 0.5,
) -> CohortCase:
    """Atlas-stiffness ellipsoid with a spherical inclusion at contrast x atlas.

    The inclusion sits under the default retractor site (the +x pole), so
    raising the contrast stiffens exactly the region the tool displaces.
    contrast = 1 reproduces the constant atlas volume.
    """
    if contrast <= 0:
        raise ValueError(f"inclusion contrast must be > 0, got {contrast}")
    g_atlas = atlas_e_kpa / (2.0 * (1.0 + conversion_nu))
    extent = np.array(dims, dtype=float) * voxel_mm
    axes = 0.85 * extent / 2.0
    mask = ellipsoid_mask(dims, voxel_mm, tuple(axes))
    probe = VoxelVolume(
        dims=dims,
        spacing_mm=(voxel_mm,) * 3,
        kind="elastogram_shear_kPa",
        data=np.zeros(int(np.prod(dims)), dtype=np.float32),
    )
    centers = probe.voxel_centers()
    site = np.array([extent[0] / 2.0 + axes[0], extent[1] / 2.0, extent[2] / 2.0])
    inside = np.linalg.norm(centers - site, axis=1) <= inclusion_radius_mm
    data = np.zeros(len(centers), dtype=np.float32)
    data[mask.flags] = np.float32(g_atlas)
    data[mask.flags & inside] = np.float32(g_atlas * contrast)
    volume = VoxelVolume(
        dims=dims, spacing_mm=(voxel_mm,) * 3, kind="elastogram_shear_kPa", data=data
    )
    g_mean = mean_shear_modulus(volume, mask)
    record = CohortRecord(
        id=f"inclusion_{contrast:g}x",
        mean_shear_G=g_mean,
        young_E=shear_to_young(g_mean, conversion_nu),
    )
    return CohortCase(record=record, volume=volume, mask=mask)


def young_material_field(
    volume: VoxelVolume,
    mask: RoiMask,
    conversion_nu: float = 0.5,
    sim_nu: float = 0.45,
    density: float = 1060.0,
) -> MaterialField:
    """Material field with Young's modulus converted voxelwise from shear.

    The conversion uses the incompressible-limit ratio E = 2 G (1 + nu) with
    nu = 0.5 (the imaging-side assumption); the simulation itself then runs
    at a numerically safe sim_nu < 0.5.
    """
    if volume.kind != "elastogram_shear_kPa":
        raise ValueError(f"expected an elastogram volume, got kind={volume.kind!r}")
    factor = 2.0 * (1.0 + conversion_nu)
    young = VoxelVolume(
        dims=volume.dims,
        spacing_mm=volume.spacing_mm,
        kind="elastogram_shear_kPa",  # same container; values are E in kPa
        data=(volume.data.astype(np.float64) * factor).astype(np.float32),
    )
    return MaterialField(volume=young, mask=mask, nu=sim_nu, density=density)


def default_retractor(field_or_mask, voxel_mm: float | None = None) -> RetractorSpec:
    """Retractor at the +x pole of the mask, hoisting straight up.

    Accepts a MaterialField or a (mask, volume) source of voxel centers.
    """
    if isinstance(field_or_mask, MaterialField):
        centers = field_or_mask.masked_centers()
    else:
        volume, mask = field_or_mask
        centers = volume.voxel_centers()[mask.flags]
    pole = centers[np.argmax(centers[:, 0])]
    return RetractorSpec(center=tuple(pole))


def inferior_support_springs(
    model: MeshFreeModel, abdomen_k: float
) -> tuple[tuple[int, float, np.ndarray], ...]:
    """Springs anchoring the inferior third of the nodes at their rest spots.

    Stands in for the abdomen's elastic resistance under the liver; the
    anchor at the rest position means zero force in the rest state.
    """
    z = model.dofs.nodes[:, 2]
    cut = z.min() + (z.max() - z.min()) / 3.0
    picked = np.flatnonzero(z <= cut)
    return tuple((int(i), float(abdomen_k), model.dofs.nodes[i].copy()) for i in picked)


def retraction_load_case(
    model: MeshFreeModel,
    retractor: RetractorSpec,
    liver_mass_kg: float | None = None,
    abdomen_k: float = 0.05,
) -> LoadCase:
    """Gravity, hoist loads totaling the liver weight, and abdomen springs.

    Raises:
        ValueError: empty application region.
    """
    region = retractor.map_region(model.dofs.nodes)
    mass_kg = model.total_mass_kg if liver_mass_kg is None else float(liver_mass_kg)
    total_n = mass_kg * STANDARD_G_M_S2
    per_node = total_n / len(region) * np.asarray(retractor.direction)
    return LoadCase(
        gravity=GRAVITY_MM_S2,
        point_loads=tuple((int(i), per_node.copy()) for i in region),
        support_springs=inferior_support_springs(model, abdomen_k),
    )


def simulate_retraction(
    model: MeshFreeModel,
    retractor: RetractorSpec,
    liver_mass_kg: float | None = None,
    abdomen_k: float = 0.05,
    h: float = 0.05,
    v_tol: float = 1e-6,
    max_steps: int = 5000,
    cg_max: int = 200,
    cg_tol: float = 1e-6,
) -> SimState:
    """Hoist the retractor region against gravity and settle to steady state.

    The hoisting force equals the liver weight (mass x 9.81 N/kg), split
    equally over the application-region nodes; gravity acts on every node
    and spring supports under the inferior third resist rigid sinking.

    Raises:
        ValueError: empty application region.
        NonConvergenceError: no steady state within max_steps.
    """
    loads = retraction_load_case(model, retractor, liver_mass_kg, abdomen_k)
    return run_to_steady_state(
        model, loads, h=h, max_steps=max_steps, v_tol=v_tol, N_max=cg_max, tol=cg_tol
    )


def compare_placements(
    model_measured: MeshFreeModel,
    state_measured: SimState,
    model_atlas: MeshFreeModel,
    state_atlas: SimState,
    landmarks: list[tuple[str, np.ndarray]],
    retractor: RetractorSpec,
    significance_mm: float = 5.0,
    case_id: str = "case",
    voxel_ref_mm: float = 1.64,
) -> ComparisonReport:
    """Quantify how far atlas-stiffness guidance lands from the measured run.

    Both models must share the DOF layout (the atlas twin is built from the
    measured model's geometry), so displacement fields subtract nodewise.

    Raises:
        ValueError: models with different node layouts.
    """
    if not np.array_equal(model_measured.dofs.nodes, model_atlas.dofs.nodes):
        raise ValueError("runs must share the node layout to be comparable")
    dq = state_measured.q.reshape(-1, 3) - state_atlas.q.reshape(-1, 3)
    node_diff = np.linalg.norm(dq, axis=1)
    region = retractor.map_region(model_measured.dofs.nodes)

    per_landmark = []
    if landmarks:
        moved_m = displace_landmarks(model_measured, state_measured, landmarks)
        moved_a = displace_landmarks(model_atlas, state_atlas, landmarks)
        for (label, _), (_, pm), (_, pa) in zip(landmarks, moved_m, moved_a):
            per_landmark.append((label, float(np.linalg.norm(pm - pa))))

    at_tool = float(node_diff[region].max())
    return ComparisonReport(
        case_id=case_id,
        per_landmark=tuple(per_landmark),
        mean_volume_diff=float(node_diff.mean()),
        at_tool_diff=at_tool,
        significant=bool(at_tool > significance_mm),
        threshold_mm=significance_mm,
        voxel_ref_mm=voxel_ref_mm,
    )


def default_landmarks(
    model: MeshFreeModel, retractor: RetractorSpec
) -> list[tuple[str, np.ndarray]]:
    """Three probe points: at the tool, deep in the volume, and inferior."""
    nodes = model.dofs.nodes
    if retractor.nodes is not None:
        tool = nodes[sorted(retractor.nodes)[0]]
    else:
        tool = nodes[np.argmin(np.linalg.norm(nodes - np.asarray(retractor.center), axis=1))]
    centroid = nodes[np.argmin(np.linalg.norm(nodes - nodes.mean(axis=0), axis=1))]
    inferior = nodes[np.argmin(nodes[:, 2])]
    return [
        ("tool", tool.copy()),
        ("interior", centroid.copy()),
        ("inferior", inferior.copy()),
    ]


@dataclass(frozen=True)
class RetractionConfig:
    """Knobs shared by per-case retraction comparisons.

    liver_mass_kg None derives the mass from the masked volume and density;
    retractor None places the default +x pole retractor per case.
    """

    n_nodes: int = 300
    k: int = 8
    seed: int = 0
    atlas_e_kpa: float = 2.1
    significance_mm: float = 5.0
    conversion_nu: float = 0.5
    sim_nu: float = 0.45
    density: float = 1060.0
    abdomen_k: float = 0.05
    liver_mass_kg: float | None = None
    retractor: RetractorSpec | None = None
    alpha: float = 0.1
    beta: float = 0.01
    h: float = 0.05
    v_tol: float = 1e-6
    max_steps: int = 5000
    cg_tol: float = 1e-6
    cg_max: int = 200
    voxel_ref_mm: float = 1.64


@dataclass(frozen=True)
class CohortRunResult:
    """Per-case comparison reports plus the cases that had to be skipped."""

    reports: tuple
    skipped: tuple


def compare_case(case: CohortCase, config: RetractionConfig) -> ComparisonReport:
    """Run one cohort case measured-vs-atlas and report the differences."""
    field = young_material_field(
        case.volume,
        case.mask,
        conversion_nu=config.conversion_nu,
        sim_nu=config.sim_nu,
        density=config.density,
    )
    model = build_model(
        field,
        n_nodes=config.n_nodes,
        k=config.k,
        alpha=config.alpha,
        beta=config.beta,
        seed=config.seed,
    )
    atlas = model.with_constant_young(config.atlas_e_kpa)
    retractor = (
        default_retractor(field) if config.retractor is None else config.retractor
    )
    kwargs = dict(
        liver_mass_kg=config.liver_mass_kg,
        abdomen_k=config.abdomen_k,
        h=config.h,
        v_tol=config.v_tol,
        max_steps=config.max_steps,
        cg_max=config.cg_max,
        cg_tol=config.cg_tol,
    )
    state_m = simulate_retraction(model, retractor, **kwargs)
    state_a = simulate_retraction(atlas, retractor, **kwargs)
    landmarks = default_landmarks(model, retractor)
    return compare_placements(
        model,
        state_m,
        atlas,
        state_a,
        landmarks,
        retractor,
        significance_mm=config.significance_mm,
        case_id=case.record.id,
        voxel_ref_mm=config.voxel_ref_mm,
    )


def run_cohort_retractions(
    cases: list[CohortCase], config: RetractionConfig | None = None
) -> CohortRunResult:
    """Compare every cohort case against its atlas twin, skipping failures.

    Cases whose model build or simulation fails are recorded in ``skipped``
    (id and reason) instead of aborting the run, mirroring how unusable
    scans drop out of a clinical cohort.

    Raises:
        ValueError: empty cohort, or every case failed.
    """
    if not cases:
        raise ValueError("cohort is empty")
    config = RetractionConfig() if config is None else config
    reports = []
    skipped = []
    for case in cases:
        try:
            reports.append(compare_case(case, config))
        except (ValueError, NonConvergenceError) as exc:
            skipped.append((case.record.id, str(exc)))
    if not reports:
        raise ValueError(f"all {len(cases)} cohort cases failed; first: {skipped[0][1]}")
    return CohortRunResult(reports=tuple(reports), skipped=tuple(skipped))


def write_comparison_csv(reports, path: str | Path) -> Path:
    """Write per-case comparison rows: case,mean_volume_diff_mm,at_tool_diff_mm,significant."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "mean_volume_diff_mm", "at_tool_diff_mm", "significant"])
        for r in reports:
            writer.writerow(
                [r.case_id, repr(r.mean_volume_diff), repr(r.at_tool_diff),
                 "true" if r.significant else "false"]
            )
    return path


def load_comparison_csv(path: str | Path) -> list[dict]:
    """Read rows written by write_comparison_csv back into dicts."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"comparison CSV not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["case", "mean_volume_diff_mm", "at_tool_diff_mm", "significant"]:
            raise ValueError(f"unexpected comparison CSV header in {path}")
        for row in reader:
            rows.append(
                {
                    "case": row["case"],
                    "mean_volume_diff_mm": float(row["mean_volume_diff_mm"]),
                    "at_tool_diff_mm": float(row["at_tool_diff_mm"]),
                    "significant": row["significant"] == "true",
                }
            )
    return rows
