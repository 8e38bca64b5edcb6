"""Tests for synthetic cohorts, retraction runs, and measured-vs-atlas reports."""

import numpy as np
import pytest
from conftest import make_field
from hypothesis import given, settings
from hypothesis import strategies as st

from elastosim.experiment import (
    CohortCase,
    CohortRunResult,
    ComparisonReport,
    RetractionConfig,
    RetractorSpec,
    SyntheticCohortSpec,
    compare_case,
    compare_placements,
    default_landmarks,
    default_retractor,
    ellipsoid_mask,
    inferior_support_springs,
    load_comparison_csv,
    retraction_load_case,
    run_cohort_retractions,
    simulate_retraction,
    stiff_inclusion_case,
    synth_cohort,
    write_comparison_csv,
    young_material_field,
)
from elastosim.meshfree import build_model
from elastosim.solver import LoadCase, SimState, run_to_steady_state
from elastosim.volume import CohortRecord, RoiMask, VoxelVolume, mean_shear_modulus, shear_to_young


def small_model(young=2.1, n_nodes=24, k=6, seed=0):
    field = make_field(dims=(6, 5, 4), spacing=(2.0, 2.0, 2.0), young=young)
    return build_model(field, n_nodes=n_nodes, k=k, seed=seed)


def tiny_case(g=0.7, dims=(10, 9, 8), voxel_mm=2.0):
    """Constant-G ellipsoid case small enough for fast simulation."""
    extent = np.array(dims) * voxel_mm
    mask = ellipsoid_mask(dims, voxel_mm, tuple(0.85 * extent / 2.0))
    data = np.zeros(int(np.prod(dims)), dtype=np.float32)
    data[mask.flags] = np.float32(g)
    vol = VoxelVolume(dims=dims, spacing_mm=(voxel_mm,) * 3,
                      kind="elastogram_shear_kPa", data=data)
    record = CohortRecord(id="tiny", mean_shear_G=float(mean_shear_modulus(vol, mask)),
                          young_E=shear_to_young(g))
    return CohortCase(record=record, volume=vol, mask=mask)


class TestRetractorSpec:
    def test_default_radius_is_half_diameter(self):
        spec = RetractorSpec(center=(0.0, 0.0, 0.0))
        assert spec.diameter == 10.0
        assert spec.region_radius == 5.0

    def test_explicit_radius_wins(self):
        spec = RetractorSpec(center=(0.0, 0.0, 0.0), radius=2.0)
        assert spec.region_radius == 2.0

    def test_rejects_nonpositive_diameter(self):
        with pytest.raises(ValueError, match="diameter"):
            RetractorSpec(diameter=0.0, center=(0.0, 0.0, 0.0))

    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValueError, match="unit 3-vector"):
            RetractorSpec(center=(0.0, 0.0, 0.0), direction=(0.0, 0.0, 2.0))

    def test_accepts_unit_direction_components(self):
        spec = RetractorSpec(center=(0.0, 0.0, 0.0), direction=(0.6, 0.8, 0.0))
        assert np.linalg.norm(spec.direction) == pytest.approx(1.0)

    def test_requires_center_or_nodes(self):
        with pytest.raises(ValueError, match="center or explicit nodes"):
            RetractorSpec()

    def test_rejects_empty_node_set(self):
        with pytest.raises(ValueError, match="nonempty"):
            RetractorSpec(nodes=frozenset())

    def test_map_region_by_center(self):
        nodes = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
        spec = RetractorSpec(center=(0.0, 0.0, 0.0))
        np.testing.assert_array_equal(spec.map_region(nodes), [0, 1])

    def test_map_region_explicit_nodes(self):
        nodes = np.zeros((5, 3))
        spec = RetractorSpec(nodes=frozenset({4, 1}))
        np.testing.assert_array_equal(spec.map_region(nodes), [1, 4])

    def test_map_region_rejects_out_of_range_nodes(self):
        spec = RetractorSpec(nodes=frozenset({7}))
        with pytest.raises(ValueError, match="beyond the model"):
            spec.map_region(np.zeros((3, 3)))

    def test_empty_region_raises(self):
        nodes = np.zeros((4, 3))
        spec = RetractorSpec(center=(100.0, 0.0, 0.0))
        with pytest.raises(ValueError, match="application region is empty"):
            spec.map_region(nodes)

    @given(r1=st.floats(0.5, 10.0), r2=st.floats(0.5, 10.0))
    @settings(max_examples=30)
    def test_region_grows_with_radius(self, r1, r2):
        rng = np.random.default_rng(0)
        nodes = rng.uniform(-10, 10, size=(40, 3))
        lo, hi = sorted([r1, r2])
        spec_lo = RetractorSpec(center=(0.0, 0.0, 0.0), radius=lo)
        spec_hi = RetractorSpec(center=(0.0, 0.0, 0.0), radius=hi)
        try:
            small = set(spec_lo.map_region(nodes).tolist())
        except ValueError:
            small = set()
        try:
            large = set(spec_hi.map_region(nodes).tolist())
        except ValueError:
            large = set()
        assert small <= large


class TestComparisonReport:
    def test_flag_must_match_threshold(self):
        with pytest.raises(ValueError, match="significant flag"):
            ComparisonReport(case_id="c", per_landmark=(), mean_volume_diff=0.1,
                             at_tool_diff=6.0, significant=False)

    def test_rejects_negative_differences(self):
        with pytest.raises(ValueError, match=">= 0"):
            ComparisonReport(case_id="c", per_landmark=(), mean_volume_diff=-0.1,
                             at_tool_diff=0.0, significant=False)
        with pytest.raises(ValueError, match=">= 0"):
            ComparisonReport(case_id="c", per_landmark=(("a", -1.0),),
                             mean_volume_diff=0.0, at_tool_diff=0.0, significant=False)

    def test_boundary_is_not_significant(self):
        rep = ComparisonReport(case_id="c", per_landmark=(), mean_volume_diff=0.0,
                               at_tool_diff=5.0, significant=False)
        assert not rep.significant


class TestSyntheticCohortSpec:
    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError, match="cohort size"):
            SyntheticCohortSpec(n=-1)
        with pytest.raises(ValueError, match="median"):
            SyntheticCohortSpec(n=1, median_kpa=0.0)
        with pytest.raises(ValueError, match="log-sd"):
            SyntheticCohortSpec(n=1, log_sd=-0.1)
        with pytest.raises(ValueError, match="heterogeneity"):
            SyntheticCohortSpec(n=1, heterogeneity=1.0)


class TestSynthCohort:
    def test_empty_cohort(self):
        assert synth_cohort(SyntheticCohortSpec(n=0, seed=3)) == []

    def test_deterministic_given_seed(self):
        spec = SyntheticCohortSpec(n=4, seed=9, heterogeneity=0.3)
        a = synth_cohort(spec)
        b = synth_cohort(spec)
        for ca, cb in zip(a, b):
            assert ca.record == cb.record
            assert np.array_equal(ca.volume.data, cb.volume.data)
            assert np.array_equal(ca.mask.flags, cb.mask.flags)

    def test_seed_changes_cohort(self):
        a = synth_cohort(SyntheticCohortSpec(n=4, seed=1))
        b = synth_cohort(SyntheticCohortSpec(n=4, seed=2))
        assert any(ca.record.mean_shear_G != cb.record.mean_shear_G
                   for ca, cb in zip(a, b))

    def test_masked_mean_matches_record(self):
        for het in (0.0, 0.35):
            cases = synth_cohort(SyntheticCohortSpec(n=6, seed=5, heterogeneity=het))
            for case in cases:
                mean = mean_shear_modulus(case.volume, case.mask)
                assert abs(mean - case.record.mean_shear_G) <= 1e-9 * case.record.mean_shear_G

    def test_records_independent_of_heterogeneity(self):
        flat = synth_cohort(SyntheticCohortSpec(n=5, seed=5, heterogeneity=0.0))
        wavy = synth_cohort(SyntheticCohortSpec(n=5, seed=5, heterogeneity=0.5))
        for cf, cw in zip(flat, wavy):
            assert cf.record == cw.record
            assert np.array_equal(cf.mask.flags, cw.mask.flags)

    def test_median_near_target_for_large_cohort(self):
        cases = synth_cohort(SyntheticCohortSpec(n=120, seed=11))
        med = np.median([c.record.mean_shear_G for c in cases])
        assert abs(med - 2.8) <= 0.15 * 2.8

    def test_young_conversion_on_records(self):
        for case in synth_cohort(SyntheticCohortSpec(n=3, seed=2)):
            assert case.record.young_E == pytest.approx(3.0 * case.record.mean_shear_G)

    def test_masked_values_stay_positive(self):
        cases = synth_cohort(SyntheticCohortSpec(n=4, seed=8, heterogeneity=0.9))
        for case in cases:
            assert np.all(case.volume.data[case.mask.flags] > 0)

    def test_outside_mask_is_zero(self):
        case = synth_cohort(SyntheticCohortSpec(n=1, seed=4))[0]
        assert np.all(case.volume.data[~case.mask.flags] == 0.0)


class TestStiffInclusion:
    def test_unit_contrast_is_constant_atlas(self):
        case = stiff_inclusion_case(1.0)
        vals = case.volume.data[case.mask.flags]
        assert np.all(vals == np.float32(0.7))
        assert case.record.mean_shear_G == pytest.approx(0.7, rel=1e-6)

    def test_contrast_raises_inclusion_only(self):
        base = stiff_inclusion_case(1.0)
        bumped = stiff_inclusion_case(4.0)
        lo = np.float32(0.7)
        hi = np.float32(0.7 * 4.0)
        vals = bumped.volume.data[bumped.mask.flags]
        assert set(np.unique(vals)) == {lo, hi}
        assert (vals == hi).sum() > 0
        assert bumped.record.mean_shear_G > base.record.mean_shear_G

    def test_rejects_nonpositive_contrast(self):
        with pytest.raises(ValueError, match="contrast"):
            stiff_inclusion_case(0.0)


class TestYoungMaterialField:
    def test_converts_shear_to_young_voxelwise(self):
        case = tiny_case(g=0.7)
        field = young_material_field(case.volume, case.mask)
        masked = field.volume.data[case.mask.flags]
        np.testing.assert_allclose(masked, 3.0 * 0.7, rtol=1e-6)
        assert field.nu == 0.45
        assert field.density == 1060.0

    def test_rejects_non_elastogram(self):
        case = tiny_case()
        wrong = VoxelVolume(dims=case.volume.dims, spacing_mm=case.volume.spacing_mm,
                            kind="anatomical_intensity", data=case.volume.data)
        with pytest.raises(ValueError, match="elastogram"):
            young_material_field(wrong, case.mask)


class TestRetractionLoadCase:
    def test_hoist_totals_liver_weight(self):
        model = small_model()
        retr = RetractorSpec(nodes=frozenset(range(4)))
        loads = retraction_load_case(model, retr, liver_mass_kg=0.02)
        total = np.sum([f for _, f in loads.point_loads], axis=0)
        np.testing.assert_allclose(total, [0.0, 0.0, 0.02 * 9.81], rtol=1e-12)

    def test_mass_defaults_to_model_mass(self):
        model = small_model()
        retr = RetractorSpec(nodes=frozenset(range(4)))
        loads = retraction_load_case(model, retr)
        total_z = sum(f[2] for _, f in loads.point_loads)
        assert total_z == pytest.approx(model.total_mass_kg * 9.81, rel=1e-12)

    def test_springs_sit_on_inferior_third_at_rest(self):
        model = small_model()
        springs = inferior_support_springs(model, 0.25)
        assert springs
        z = model.dofs.nodes[:, 2]
        cut = z.min() + (z.max() - z.min()) / 3.0
        picked = {i for i, _, _ in springs}
        assert picked == set(np.flatnonzero(z <= cut).tolist())
        for i, k, anchor in springs:
            assert k == 0.25
            np.testing.assert_array_equal(anchor, model.dofs.nodes[i])

    def test_gravity_points_down(self):
        model = small_model()
        loads = retraction_load_case(model, RetractorSpec(nodes=frozenset({0})))
        assert loads.gravity == (0.0, 0.0, -9810.0)

    def test_empty_region_raises(self):
        model = small_model()
        far = RetractorSpec(center=(500.0, 0.0, 0.0))
        with pytest.raises(ValueError, match="application region is empty"):
            retraction_load_case(model, far)


class TestSimulateRetraction:
    def test_rigid_support_limit(self):
        model = small_model()
        retr = RetractorSpec(nodes=frozenset(range(3)))
        region = retr.map_region(model.dofs.nodes)
        per_node = model.total_mass_kg * 9.81 / len(region)
        springs = tuple((int(i), 1e9, model.dofs.nodes[i].copy())
                        for i in range(model.n_nodes))
        loads = LoadCase(
            gravity=(0.0, 0.0, -9810.0),
            point_loads=tuple((int(i), np.array([0.0, 0.0, per_node])) for i in region),
            support_springs=springs,
        )
        state = run_to_steady_state(model, loads, h=0.05, max_steps=2000,
                                    v_tol=1e-9, N_max=2000, tol=1e-10)
        assert np.abs(state.q).max() < 1e-6

    def test_uniform_stiffness_scaling_halves_displacement(self):
        case = tiny_case()
        field = young_material_field(case.volume, case.mask)
        model = build_model(field, n_nodes=40, k=6, seed=0)
        retr = default_retractor(field)
        tight = dict(h=5.0, v_tol=1e-10, max_steps=2000,
                     cg_max=4 * model.n_dofs, cg_tol=1e-12)
        atlas = model.with_constant_young(2.1)
        doubled = model.with_constant_young(4.2)
        qa = simulate_retraction(atlas, retr, abdomen_k=0.05, **tight).q
        # Uniform scaling doubles every elastic element, springs included.
        qd = simulate_retraction(doubled, retr, abdomen_k=0.10, **tight).q
        assert np.abs(2.0 * qd - qa).max() <= 1e-6 * np.abs(qa).max()

    def test_reaches_quiet_velocities(self):
        case = tiny_case()
        field = young_material_field(case.volume, case.mask)
        model = build_model(field, n_nodes=40, k=6, seed=0)
        state = simulate_retraction(model, default_retractor(field))
        assert np.abs(state.qdot).max() < 1e-6


class TestComparePlacements:
    def test_identical_runs_report_zero(self):
        model = small_model()
        state = SimState.rest(model.n_dofs)
        retr = RetractorSpec(nodes=frozenset({1, 2}))
        rep = compare_placements(model, state, model, state, [], retr, case_id="same")
        assert rep.mean_volume_diff == 0.0
        assert rep.at_tool_diff == 0.0
        assert not rep.significant
        assert rep.per_landmark == ()

    def test_six_mm_offset_at_region_node_is_significant(self):
        model = small_model()
        qa = np.zeros(model.n_dofs)
        qb = np.zeros(model.n_dofs)
        qb[3 * 2 + 2] = 6.0  # node 2, z component
        retr = RetractorSpec(nodes=frozenset({2, 3}))
        rep = compare_placements(
            model, SimState(q=qa, qdot=np.zeros_like(qa), t=0.0),
            model, SimState(q=qb, qdot=np.zeros_like(qb), t=0.0),
            [], retr,
        )
        assert rep.at_tool_diff == pytest.approx(6.0)
        assert rep.significant
        assert rep.mean_volume_diff == pytest.approx(6.0 / model.n_nodes)

    def test_offset_outside_region_moves_mean_not_tool(self):
        model = small_model()
        qa = np.zeros(model.n_dofs)
        qb = np.zeros(model.n_dofs)
        qb[3 * 5 + 0] = 2.0  # node 5 is not in the region
        retr = RetractorSpec(nodes=frozenset({0}))
        rep = compare_placements(
            model, SimState(q=qa, qdot=np.zeros_like(qa), t=0.0),
            model, SimState(q=qb, qdot=np.zeros_like(qb), t=0.0),
            [], retr,
        )
        assert rep.at_tool_diff == 0.0
        assert rep.mean_volume_diff > 0.0

    def test_rejects_mismatched_layouts(self):
        a = small_model(seed=0)
        b = small_model(seed=1)
        state_a = SimState.rest(a.n_dofs)
        state_b = SimState.rest(b.n_dofs)
        with pytest.raises(ValueError, match="share the node layout"):
            compare_placements(a, state_a, b, state_b, [],
                               RetractorSpec(nodes=frozenset({0})))

    def test_landmark_differences_reported(self):
        case = tiny_case()
        field = young_material_field(case.volume, case.mask)
        model = build_model(field, n_nodes=40, k=6, seed=0)
        retr = default_retractor(field)
        marks = default_landmarks(model, retr)
        qb = np.zeros(model.n_dofs)
        qb[0::3] = 1.0  # rigid +x shift of every node
        rep = compare_placements(
            model, SimState.rest(model.n_dofs),
            model, SimState(q=qb, qdot=np.zeros_like(qb), t=0.0),
            marks, retr,
        )
        assert [label for label, _ in rep.per_landmark] == ["tool", "interior", "inferior"]
        for _, d in rep.per_landmark:
            assert d == pytest.approx(1.0, rel=1e-9)


class TestInclusionOrdering:
    def test_at_tool_exceeds_volume_mean(self):
        rep = compare_case(stiff_inclusion_case(3.0), RetractionConfig())
        assert rep.at_tool_diff > rep.mean_volume_diff

    def test_contrast_monotone_and_crosses_threshold(self):
        reports = [compare_case(stiff_inclusion_case(c), RetractionConfig())
                   for c in (1.0, 2.0, 4.0)]
        diffs = [r.at_tool_diff for r in reports]
        assert diffs[0] < diffs[1] < diffs[2]
        assert not reports[0].significant
        assert reports[2].significant


class TestCohortRun:
    def test_atlas_equal_cohort_reports_no_differences(self):
        spec = SyntheticCohortSpec(n=3, seed=2, median_kpa=0.7, log_sd=0.0)
        cases = synth_cohort(spec, dims=(10, 9, 8), voxel_mm=2.0)
        result = run_cohort_retractions(cases, RetractionConfig(n_nodes=40, k=6))
        assert len(result.reports) == 3
        assert result.skipped == ()
        for rep in result.reports:
            assert rep.at_tool_diff <= 1e-6
            assert rep.mean_volume_diff <= 1e-6
            assert not rep.significant

    def test_skips_and_counts_failing_cases(self):
        good = synth_cohort(SyntheticCohortSpec(n=4, seed=2, median_kpa=0.7, log_sd=0.0),
                            dims=(10, 9, 8), voxel_mm=2.0)
        tiny_mask = np.zeros(10 * 9 * 8, dtype=bool)
        tiny_mask[:2] = True
        bad = CohortCase(
            record=CohortRecord(id="bad", mean_shear_G=0.7, young_E=2.1),
            volume=good[0].volume,
            mask=RoiMask(dims=(10, 9, 8), flags=tiny_mask),
        )
        cases = [good[0], bad, good[1], good[2], good[3]]
        result = run_cohort_retractions(cases, RetractionConfig(n_nodes=40, k=6))
        assert len(result.reports) == 4
        assert len(result.skipped) == 1
        assert result.skipped[0][0] == "bad"
        assert [r.case_id for r in result.reports] == [c.record.id for c in cases if c.record.id != "bad"]

    def test_all_failures_raise(self):
        tiny_mask = np.zeros(10 * 9 * 8, dtype=bool)
        tiny_mask[:2] = True
        good = synth_cohort(SyntheticCohortSpec(n=1, seed=2), dims=(10, 9, 8), voxel_mm=2.0)
        bad = CohortCase(
            record=CohortRecord(id="bad", mean_shear_G=0.7, young_E=2.1),
            volume=good[0].volume,
            mask=RoiMask(dims=(10, 9, 8), flags=tiny_mask),
        )
        with pytest.raises(ValueError, match="all 1 cohort cases failed"):
            run_cohort_retractions([bad], RetractionConfig(n_nodes=40, k=6))

    def test_empty_cohort_raises(self):
        with pytest.raises(ValueError, match="empty"):
            run_cohort_retractions([], RetractionConfig())


class TestComparisonCsv:
    def reports(self):
        return [
            ComparisonReport(case_id="case_000", per_landmark=(("tool", 1.0),),
                             mean_volume_diff=0.25, at_tool_diff=1.5, significant=False),
            ComparisonReport(case_id="case_001", per_landmark=(),
                             mean_volume_diff=2.0, at_tool_diff=6.25, significant=True),
        ]

    def test_layout_and_roundtrip(self, tmp_path):
        path = write_comparison_csv(self.reports(), tmp_path / "comparison.csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "case,mean_volume_diff_mm,at_tool_diff_mm,significant"
        assert lines[1] == "case_000,0.25,1.5,false"
        assert lines[2] == "case_001,2.0,6.25,true"
        rows = load_comparison_csv(path)
        assert rows[0]["at_tool_diff_mm"] == 1.5
        assert rows[1]["significant"] is True

    def test_byte_identical_rewrites(self, tmp_path):
        a = write_comparison_csv(self.reports(), tmp_path / "a.csv").read_bytes()
        b = write_comparison_csv(self.reports(), tmp_path / "b.csv").read_bytes()
        assert a == b

    def test_load_rejects_other_headers(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("foo,bar\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            load_comparison_csv(p)
