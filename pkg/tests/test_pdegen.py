"""Tests for the finite-difference solvers and dataset generation."""

import json
from pathlib import Path

import numpy as np
import pytest

from mfhogp import numerics, pdegen
from mfhogp.errors import (
    ConvergenceFailure,
    DimensionMismatch,
    InvalidCounts,
    IoFailure,
    MfhogpError,
    SolverDiverged,
)


class TestAlignment:
    def test_identical_grids_copy_exactly(self):
        values = numerics.RngStream(0).standard_normal(9, 7)
        np.testing.assert_array_equal(pdegen.align_field(values, (9, 7)), values)

    def test_refinement_preserves_coincident_nodes(self):
        values = numerics.RngStream(1).standard_normal(9, 9)
        out = pdegen.align_field(values, (17, 17))
        np.testing.assert_array_equal(out[::2, ::2], values)

    def test_corners_always_preserved(self):
        values = numerics.RngStream(2).standard_normal(16, 16)
        out = pdegen.align_field(values, (100, 100))
        for a, b in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
            assert out[a, b] == values[a, b]

    def test_rows_sum_to_one(self):
        w = pdegen.interp_matrix(16, 128)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_downsampling_allowed(self):
        values = numerics.RngStream(3).standard_normal(17, 17)
        out = pdegen.align_field(values, (8, 8))
        assert out.shape == (8, 8)

    def test_single_source_node_rejected(self):
        with pytest.raises(DimensionMismatch):
            pdegen.interp_matrix(1, 8)


class TestBurgers:
    def test_initial_row_is_exact_sine(self):
        field = pdegen.solve_burgers(0.05, 16)
        x_out = np.linspace(0.0, 1.0, 128)
        np.testing.assert_array_equal(field.values[0], np.sin(np.pi * x_out / 2.0))
        assert field.values.shape == (128, 128)

    def test_discrete_maximum_principle(self):
        for v in (0.001, 0.01, 0.1):
            field = pdegen.solve_burgers(v, 16)
            assert np.max(np.abs(field.values)) <= np.max(np.abs(field.values[0])) + 1e-6

    def test_more_viscosity_decays_faster(self):
        thick = pdegen.solve_burgers(0.1, 16)
        thin = pdegen.solve_burgers(0.001, 16)
        assert np.linalg.norm(thick.values[-1]) < np.linalg.norm(thin.values[-1])

    def test_dirichlet_walls_after_time_zero(self):
        traj = pdegen.burgers_trajectory(0.01, 16)
        assert traj.shape == (17, 16)
        np.testing.assert_array_equal(traj[1:, 0], 0.0)
        np.testing.assert_array_equal(traj[1:, -1], 0.0)

    def test_antidiffusive_viscosity_fails(self):
        # Negative viscosity destroys the contraction the implicit solve
        # relies on; the solver must raise rather than return garbage.
        with pytest.raises((SolverDiverged, ConvergenceFailure)):
            pdegen.burgers_trajectory(-0.05, 16)

    def test_values_are_finite(self):
        field = pdegen.solve_burgers(0.003, 32)
        assert np.all(np.isfinite(field.values))


class TestPoisson:
    def test_constant_constraints_give_constant_field(self):
        field = pdegen.solve_poisson(0.4, 0.4, 0.4, 0.4, 0.4, 8)
        assert np.max(np.abs(field.values - 0.4)) < 1e-10

    def test_interior_respects_constraint_range(self):
        grid = pdegen.poisson_grid(0.2, 0.8, 0.5, 0.3, 0.66, 8)
        assert grid.min() >= 0.2 - 1e-12
        assert grid.max() <= 0.8 + 1e-12

    def test_center_pinned_exactly(self):
        grid = pdegen.poisson_grid(0.1, 0.9, 0.2, 0.7, 0.55, 8)
        assert grid.shape == (9, 9)
        assert grid[4, 4] == pytest.approx(0.55, abs=1e-12)

    def test_corner_values_follow_assignment_order(self):
        # Sides are assigned left, right, top, bottom; corners keep the
        # last write, i.e. the top/bottom values.
        grid = pdegen.poisson_grid(0.2, 0.3, 0.8, 0.6, 0.5, 8)
        assert grid[0, 0] == 0.8 and grid[0, -1] == 0.8
        assert grid[-1, 0] == 0.6 and grid[-1, -1] == 0.6

    def test_finer_mesh_closer_to_reference(self):
        spec = pdegen.make_spec("poisson", (8, 16))
        rng = numerics.RngStream(7)
        params = [rng.uniform(lo, hi) for lo, hi in spec.input_ranges]
        ref = pdegen.solve_instance(spec, params, 64)
        coarse = pdegen.solve_instance(spec, params, 8)
        fine = pdegen.solve_instance(spec, params, 16)
        err = lambda a: float(np.sqrt(np.mean((a - ref) ** 2)))
        assert err(fine) < err(coarse)

    def test_odd_cell_count_rejected(self):
        with pytest.raises(InvalidCounts):
            pdegen.poisson_grid(0.5, 0.5, 0.5, 0.5, 0.5, 7)


class TestHeat:
    def test_insulated_rod_conserves_heat(self):
        traj = pdegen.heat_trajectory(0.0, 0.0, 0.05, 16)
        totals = np.trapezoid(traj, dx=1.0 / 15, axis=1)
        assert np.max(np.abs(totals - totals[0])) / abs(totals[0]) < 1e-6

    def test_insulated_rod_equilibrates_to_step_mean(self):
        traj = pdegen.heat_trajectory(0.0, 0.0, 0.1, 16)
        final = traj[-1]
        assert np.ptp(final) < 1e-3
        assert abs(final.mean() - 0.5) < 0.05

    def test_left_influx_strictly_increases_heat(self):
        traj = pdegen.heat_trajectory(0.7, 0.0, 0.05, 16)
        totals = np.trapezoid(traj, dx=1.0 / 15, axis=1)
        increments = np.diff(totals)
        assert np.all(increments > 0)
        # Exact flux balance: each implicit step adds dt * q_left.
        np.testing.assert_allclose(increments, (5.0 / 16) * 0.7, atol=1e-12)

    def test_right_flux_parameter_removes_heat(self):
        traj = pdegen.heat_trajectory(0.0, -0.4, 0.05, 16)
        totals = np.trapezoid(traj, dx=1.0 / 15, axis=1)
        assert np.all(np.diff(totals) < 0)

    def test_step_initial_condition_sampling(self):
        # 17 nodes put grid points exactly on the jumps, which must take
        # the half-way value 0.5.
        traj = pdegen.heat_trajectory(0.0, 0.0, 0.05, 17)
        x = np.linspace(0.0, 1.0, 17)
        ic = traj[0]
        assert ic[np.isclose(x, 0.25)] == pytest.approx(0.5)
        assert ic[np.isclose(x, 0.75)] == pytest.approx(0.5)
        assert np.all(ic[(x > 0.26) & (x < 0.74)] == 1.0)
        assert np.all(ic[(x < 0.24) | (x > 0.76)] == 0.0)

    def test_output_alignment_shape(self):
        field = pdegen.solve_heat(0.3, -0.2, 0.05, 16)
        assert field.values.shape == (100, 100)
        assert np.all(np.isfinite(field.values))


class TestRefinementMonotonicity:
    @pytest.mark.parametrize(
        "equation,meshes,reference",
        [
            ("burgers", (16, 32, 64), 128),
            ("poisson", (8, 16, 32), 64),
            ("heat", (16, 32, 64), 128),
        ],
    )
    def test_error_nonincreasing_in_fidelity(self, equation, meshes, reference):
        spec = pdegen.make_spec(equation, meshes)
        rng = numerics.RngStream(42)
        for _ in range(5):
            params = [rng.uniform(lo, hi) for lo, hi in spec.input_ranges]
            ref = pdegen.solve_instance(spec, params, reference)
            errs = [
                float(np.sqrt(np.mean((pdegen.solve_instance(spec, params, m) - ref) ** 2)))
                for m in meshes
            ]
            assert all(b <= a for a, b in zip(errs, errs[1:])), errs


class TestSpec:
    def test_meshes_must_strictly_increase(self):
        with pytest.raises(InvalidCounts):
            pdegen.make_spec("poisson", (8, 8))

    def test_output_grid_must_cover_finest_mesh(self):
        with pytest.raises(InvalidCounts):
            pdegen.make_spec("poisson", (8, 16), output_grid=(8, 8))

    def test_unknown_equation_rejected(self):
        with pytest.raises(InvalidCounts):
            pdegen.make_spec("navier-stokes", (8,))

    def test_parameter_count_checked(self):
        spec = pdegen.make_spec("poisson", (8,))
        with pytest.raises(DimensionMismatch):
            pdegen.solve_instance(spec, [0.5, 0.5], 8)

    def test_presets_cover_paper_settings(self):
        assert pdegen.PRESETS["poisson-ii"].counts == (400, 10)
        assert pdegen.PRESETS["poisson-ii"].spec.output_dim == 1024
        assert pdegen.PRESETS["burgers-iii"].counts == (400, 40, 4)
        assert pdegen.PRESETS["burgers-iii"].spec.output_dim == 16384
        assert pdegen.PRESETS["heat-ii"].spec.output_dim == 10000
        assert pdegen.PRESETS["poisson-ii-small"].counts == (100, 10)
        assert pdegen.PRESETS["poisson-ii-small"].test_count == 30
        assert pdegen.PRESETS["poisson-smoke"].spec.output_dim == 64


class TestGenerateDataset:
    def test_burgers_counts_and_dimension(self):
        spec = pdegen.PRESETS["burgers-ii"].spec
        data = pdegen.generate_dataset(
            spec, (400, 4), numerics.RngStream(0), test_count=5
        )
        assert data.counts == (400, 4)
        assert data.output_dim == 16384
        assert data.x_test.shape == (5, 1)
        assert data.y_test.shape == (5, 16384)
        lo, hi = spec.input_ranges[0]
        assert np.all((data.xs[0] >= lo) & (data.xs[0] <= hi))

    def test_nested_inputs_by_construction(self):
        spec = pdegen.make_spec("poisson", (4, 8, 16), output_grid=(16, 16))
        data = pdegen.generate_dataset(
            spec, (10, 5, 2), numerics.RngStream(3), test_count=2
        )
        as_rows = lambda x: {tuple(row) for row in x}
        assert as_rows(data.xs[2]) <= as_rows(data.xs[1]) <= as_rows(data.xs[0])
        data.validate()

    def test_counts_must_strictly_decrease(self):
        spec = pdegen.make_spec("poisson", (4, 8), output_grid=(8, 8))
        with pytest.raises(InvalidCounts):
            pdegen.generate_dataset(spec, (10, 10), numerics.RngStream(0), 2)
        with pytest.raises(InvalidCounts):
            pdegen.generate_dataset(spec, (5, 8), numerics.RngStream(0), 2)

    def test_count_arity_checked(self):
        spec = pdegen.make_spec("poisson", (4, 8), output_grid=(8, 8))
        with pytest.raises(InvalidCounts):
            pdegen.generate_dataset(spec, (10,), numerics.RngStream(0), 2)

    def test_same_seed_reproduces_arrays(self):
        spec = pdegen.PRESETS["poisson-smoke"].spec
        a = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(9), 2)
        b = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(9), 2)
        for xa, xb in zip(a.xs + [a.x_test], b.xs + [b.x_test]):
            np.testing.assert_array_equal(xa, xb)
        for ya, yb in zip(a.ys + [a.y_test], b.ys + [b.y_test]):
            np.testing.assert_array_equal(ya, yb)

    def test_test_set_solved_one_level_above(self):
        spec = pdegen.PRESETS["poisson-smoke"].spec
        data = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(9), 2)
        redone = np.stack(
            [
                pdegen.solve_instance(spec, row, spec.test_mesh)
                for row in data.x_test
            ]
        )
        np.testing.assert_array_equal(data.y_test, redone)
        assert spec.test_mesh == 16


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = pdegen.PRESETS["poisson-smoke"].spec
        data = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(4), 2)
        manifest = pdegen.save_dataset(tmp_path / "ds", data, spec, seed=4)
        loaded, manifest2 = pdegen.load_dataset(tmp_path / "ds")
        assert manifest == manifest2
        for a, b in zip(data.xs, loaded.xs):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(data.ys, loaded.ys):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(data.x_test, loaded.x_test)
        np.testing.assert_array_equal(data.y_test, loaded.y_test)
        np.testing.assert_array_equal(data.parent_maps[1], loaded.parent_maps[1])

    def test_rewrites_are_byte_identical(self, tmp_path):
        spec = pdegen.PRESETS["poisson-smoke"].spec
        for name in ("first", "second"):
            data = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(4), 2)
            pdegen.save_dataset(tmp_path / name, data, spec, seed=4)
        for f in sorted((tmp_path / "first").iterdir()):
            assert f.read_bytes() == (tmp_path / "second" / f.name).read_bytes()

    def test_truncated_blob_detected(self, tmp_path):
        spec = pdegen.PRESETS["poisson-smoke"].spec
        data = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(4), 0)
        pdegen.save_dataset(tmp_path / "ds", data, spec, seed=4)
        blob = tmp_path / "ds" / "y_1.f64"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(IoFailure):
            pdegen.load_dataset(tmp_path / "ds")

    def test_missing_manifest_detected(self, tmp_path):
        with pytest.raises(IoFailure):
            pdegen.load_dataset(tmp_path / "nowhere")

    def test_foreign_manifest_rejected(self, tmp_path):
        d = tmp_path / "ds"
        d.mkdir()
        (d / pdegen.MANIFEST_NAME).write_text(json.dumps({"format": "other"}))
        with pytest.raises(IoFailure):
            pdegen.load_dataset(d)

    def test_blobs_are_little_endian_row_major(self, tmp_path):
        spec = pdegen.PRESETS["poisson-smoke"].spec
        data = pdegen.generate_dataset(spec, (6, 3), numerics.RngStream(4), 0)
        pdegen.save_dataset(tmp_path / "ds", data, spec, seed=4)
        raw = (tmp_path / "ds" / "x_1.f64").read_bytes()
        direct = np.frombuffer(raw, dtype="<f8").reshape(6, 5)
        np.testing.assert_array_equal(direct, data.xs[0])
