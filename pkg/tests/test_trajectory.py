"""Linear velocity trajectories: fitting, evaluation and transport."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from longreg.errors import DegenerateTimes, GridMismatch, ValidationFailure
from longreg.geometry import Grid, Svf, svf_exp, trilinear_sample
from longreg.trajectory import (
    TrajectoryModel,
    evaluate_trajectory,
    fit_trajectory,
    jacobian_map,
    predict_image,
    transport_svf,
)
from longreg.volume_io import Volume
from helpers import centered_grid, index_grid, smooth_field


def linear_series(grid, intercept, slope, times):
    return [Svf(grid, intercept + slope * t) for t in times]


@pytest.fixture
def small_grid():
    return centered_grid((12, 12, 12))


class TestFit:
    def test_exact_linear_recovery(self, small_grid):
        rng = np.random.default_rng(0)
        shape = small_grid.shape
        c = gaussian_filter(rng.normal(size=shape + (3,)), (2, 2, 2, 0))
        v = gaussian_filter(rng.normal(size=shape + (3,)), (2, 2, 2, 0))
        times = [0.0, 0.7, 1.9, 3.2, 4.1]
        model = fit_trajectory(linear_series(small_grid, c, v, times), times)
        assert np.abs(model.slope.values - v).max() < 1e-10
        assert np.abs(model.intercept.values - c).max() < 1e-10
        assert model.residual.data.max() < 1e-10

    def test_lad_matches_ols_on_clean_data(self, small_grid):
        rng = np.random.default_rng(1)
        shape = small_grid.shape
        c = rng.normal(size=shape + (3,)) * 0.1
        v = rng.normal(size=shape + (3,)) * 0.1
        times = [0.0, 1.0, 2.0, 3.0]
        series = linear_series(small_grid, c, v, times)
        ols = fit_trajectory(series, times, method="ols")
        lad = fit_trajectory(series, times, method="lad")
        assert np.abs(ols.slope.values - lad.slope.values).max() < 1e-8
        assert np.abs(ols.intercept.values - lad.intercept.values).max() < 1e-8

    def test_lad_shrugs_off_one_corrupted_field(self, small_grid):
        """One wrecked observation leaves the robust fit at the truth while
        the least-squares fit moves."""
        rng = np.random.default_rng(2)
        shape = small_grid.shape
        c = rng.normal(size=shape + (3,)) * 0.1
        v = rng.normal(size=shape + (3,)) * 0.1
        times = [0.0, 1.0, 2.0, 3.0, 4.0]
        series = linear_series(small_grid, c, v, times)
        series[4] = Svf(small_grid, series[4].values + 25.0)
        lad = fit_trajectory(series, times, method="lad")
        ols = fit_trajectory(series, times, method="ols")
        assert np.abs(lad.slope.values - v).max() < 1e-8
        assert np.abs(lad.intercept.values - c).max() < 1e-8
        assert np.abs(ols.slope.values - v).max() > 0.1

    def test_unknown_method(self, small_grid):
        series = linear_series(small_grid, 0.0 * index_grid(small_grid.shape), 0.0 * index_grid(small_grid.shape), [0.0, 1.0])
        with pytest.raises(ValidationFailure):
            fit_trajectory(series, [0.0, 1.0], method="huber")

    def test_needs_two_timepoints(self, small_grid):
        svf = Svf(small_grid, np.zeros(small_grid.shape + (3,)))
        with pytest.raises(ValidationFailure):
            fit_trajectory([svf], [0.0])

    def test_degenerate_times(self, small_grid):
        svf = Svf(small_grid, np.zeros(small_grid.shape + (3,)))
        with pytest.raises(DegenerateTimes):
            fit_trajectory([svf, svf], [1.0, 1.0])

    def test_times_length_checked(self, small_grid):
        svf = Svf(small_grid, np.zeros(small_grid.shape + (3,)))
        with pytest.raises(ValidationFailure):
            fit_trajectory([svf, svf], [0.0, 1.0, 2.0])

    def test_mixed_grids_rejected(self, small_grid):
        a = Svf(small_grid, np.zeros(small_grid.shape + (3,)))
        other = centered_grid((13, 13, 13))
        b = Svf(other, np.zeros(other.shape + (3,)))
        with pytest.raises(GridMismatch):
            fit_trajectory([a, b], [0.0, 1.0])


class TestEvaluate:
    def test_time_zero_with_zero_intercept(self, small_grid):
        shape = small_grid.shape
        slope = smooth_field(shape, np.random.default_rng(3), scale=0.5)
        model = fit_trajectory(
            linear_series(small_grid, np.zeros(shape + (3,)), slope, [0.0, 1.0]),
            [0.0, 1.0],
        )
        disp = evaluate_trajectory(model, 0.0)
        assert np.all(disp.values == 0.0)

    def test_matches_direct_integration(self, small_grid):
        """Evaluation exponentiates the scaled slope; the intercept is kept
        for inspection only since the template anchors the time origin."""
        shape = small_grid.shape
        rng = np.random.default_rng(4)
        c = smooth_field(shape, rng, scale=0.3)
        v = smooth_field(shape, rng, scale=0.4)
        times = [0.0, 1.0]
        model = fit_trajectory(linear_series(small_grid, c, v, times), times)
        t = 2.5
        direct = svf_exp(Svf(small_grid, v * t), direction=1)
        viamodel = evaluate_trajectory(model, t)
        np.testing.assert_allclose(viamodel.values, direct.values, atol=1e-12)

    def test_backward_direction(self, small_grid):
        shape = small_grid.shape
        v = smooth_field(shape, np.random.default_rng(5), scale=0.5)
        model = fit_trajectory(
            linear_series(small_grid, np.zeros(shape + (3,)), v, [0.0, 1.0]),
            [0.0, 1.0],
        )
        fwd = evaluate_trajectory(model, 1.0, direction=1)
        bwd = evaluate_trajectory(model, 1.0, direction=-1)
        oracle = svf_exp(Svf(small_grid, -v))
        np.testing.assert_allclose(bwd.values, oracle.values, atol=1e-12)
        assert np.abs(fwd.values + bwd.values).max() < 0.2

    def test_one_parameter_subgroup(self):
        """Evaluating at summed times agrees with composing evaluations."""
        shape = (16, 16, 16)
        grid = centered_grid(shape)
        v = smooth_field(shape, np.random.default_rng(6), scale=0.8)
        model = fit_trajectory(
            [Svf(grid, v * 0.0), Svf(grid, v)], [0.0, 1.0]
        )
        d1 = evaluate_trajectory(model, 0.6)
        d2 = evaluate_trajectory(model, 0.9)
        d12 = evaluate_trajectory(model, 1.5)
        composed = d2.values + trilinear_sample(
            d1.values, index_grid(shape) + d2.values, mode="clamp"
        )
        err = np.linalg.norm(composed - d12.values, axis=-1)
        assert err[3:-3, 3:-3, 3:-3].max() < 0.1


class TestPredictAndJacobian:
    def test_predict_at_zero_with_zero_intercept(self, small_grid):
        shape = small_grid.shape
        rng = np.random.default_rng(7)
        template = Volume(small_grid, rng.normal(100.0, 15.0, shape))
        v = smooth_field(shape, rng, scale=0.5)
        model = fit_trajectory(
            linear_series(small_grid, np.zeros(shape + (3,)), v, [0.0, 1.0]),
            [0.0, 1.0],
        )
        predicted = predict_image(template, model, 0.0)
        np.testing.assert_array_equal(predicted.data, template.data)

    def test_predict_moves_content(self, small_grid):
        """A unit +x velocity carries intensity one voxel along x, so the
        predicted image equals the template shifted by one."""
        shape = small_grid.shape
        ramp = index_grid(shape)[..., 0]
        template = Volume(small_grid, ramp)
        vals = np.zeros(shape + (3,))
        vals[..., 0] = 1.0
        model = fit_trajectory(
            [Svf(small_grid, vals * 0.0), Svf(small_grid, vals)], [0.0, 1.0]
        )
        predicted = predict_image(template, model, 1.0)
        interior = (slice(2, -2),) * 3
        np.testing.assert_allclose(
            predicted.data[interior], ramp[interior] - 1.0, atol=2e-3
        )

    def test_jacobian_of_linear_flow(self):
        """A linear velocity a*x integrates to scaling by e^a, whose
        determinant is e^{3a} for an isotropic field."""
        shape = (16, 16, 16)
        grid = centered_grid(shape)
        a = 0.05
        lin = a * (index_grid(shape) - (np.array(shape, float) - 1.0) / 2.0)
        model = fit_trajectory([Svf(grid, lin * 0.0), Svf(grid, lin)], [0.0, 1.0])
        jm = jacobian_map(model, 1.0)
        interior = jm.data[4:-4, 4:-4, 4:-4]
        np.testing.assert_allclose(interior, np.exp(3 * a), atol=1e-3)

    def test_jacobian_identity_at_time_zero(self, small_grid):
        shape = small_grid.shape
        v = smooth_field(shape, np.random.default_rng(9), scale=0.5)
        model = fit_trajectory(
            linear_series(small_grid, np.zeros(shape + (3,)), v, [0.0, 1.0]),
            [0.0, 1.0],
        )
        jm = jacobian_map(model, 0.0)
        np.testing.assert_array_equal(jm.data, np.ones(shape))


class TestTransport:
    def test_identity_warp(self, small_grid):
        shape = small_grid.shape
        v = smooth_field(shape, np.random.default_rng(10), scale=0.7)
        warp = Svf(small_grid, np.zeros(shape + (3,)))
        out = transport_svf(Svf(small_grid, v), warp)
        np.testing.assert_allclose(out.values, v, atol=1e-12)

    def test_translation_warp_resamples(self, small_grid):
        shape = small_grid.shape
        v = smooth_field(shape, np.random.default_rng(11), scale=0.7)
        wvals = np.zeros(shape + (3,))
        wvals[..., 0] = 2.0
        out = transport_svf(Svf(small_grid, v), Svf(small_grid, wvals))
        pts = index_grid(shape)
        pts[..., 0] -= 2.0
        expected = trilinear_sample(v, pts, mode="clamp")
        interior = (slice(3, -3),) * 3
        assert np.abs(out.values - expected)[interior].max() < 5e-3

    def test_scaling_warp_pushforward(self):
        """Conjugation through phi(x) = 1.2 x on a linear field has the
        closed form 1.2 * v(y / 1.2)."""
        shape = (16, 16, 16)
        grid = centered_grid(shape)
        ctr = (np.array(shape, float) - 1.0) / 2.0
        warp = Svf(grid, np.log(1.2) * (index_grid(shape) - ctr))
        d = np.array([[0.03, 0.01, 0.0], [0.0, -0.02, 0.01], [0.005, 0.0, 0.015]])
        c0 = np.array([0.3, -0.2, 0.1])
        world = grid.voxel_to_world(index_grid(shape))
        vlin = c0 + np.einsum("ij,...j->...i", d, world)
        out = transport_svf(Svf(grid, vlin), warp)
        expected = 1.2 * (c0 + np.einsum("ij,...j->...i", d, world / 1.2))
        interior = (slice(2, -2),) * 3
        assert np.abs(out.values - expected)[interior].max() < 5e-3

    def test_population_grid_resample(self, small_grid):
        """With an identity warp on a larger enclosing grid the transport
        reduces to resampling; both grids share integer world points here."""
        shape = small_grid.shape
        v = smooth_field(shape, np.random.default_rng(12), scale=0.5)
        pop = centered_grid((16, 16, 16))
        warp = Svf(pop, np.zeros((16, 16, 16, 3)))
        out = transport_svf(Svf(small_grid, v), warp, population_grid=pop)
        assert out.grid.shape == (16, 16, 16)
        np.testing.assert_allclose(out.values[2:-2, 2:-2, 2:-2], v, atol=1e-12)

    def test_warp_must_sit_on_population_grid(self, small_grid):
        other = centered_grid((13, 13, 13))
        v = Svf(small_grid, np.zeros(small_grid.shape + (3,)))
        w = Svf(small_grid, np.zeros(small_grid.shape + (3,)))
        with pytest.raises(GridMismatch):
            transport_svf(v, w, population_grid=other)
