"""Kernel, GP sampling, exact posterior oracle, and station-world tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sim2real_cnp.fields import (
    SEKernelParams,
    StationWorldConfig,
    generate_station_world,
    gp_posterior_oracle,
    gp_posterior_oracle_sum,
    gram_matrix,
    sample_gp_field,
    se_kernel,
)
from sim2real_cnp.util import ConfigurationError, DegenerateCovarianceError, child_rng


def direct_inversion_posterior(ctx_x, ctx_y, tgt_x, params):
    """Brute-force reference: explicit kernel loops and np.linalg.inv.

    Deliberately avoids Cholesky and vectorised Gram construction so it is an
    independent code path from the production oracle.
    """
    ctx_x = np.atleast_2d(np.asarray(ctx_x, dtype=float))
    tgt_x = np.atleast_2d(np.asarray(tgt_x, dtype=float))
    n, m = ctx_x.shape[0], tgt_x.shape[0]

    def k(a, b):
        return params.signal_std**2 * math.exp(
            -0.5 * float(np.sum((a - b) ** 2)) / params.lengthscale**2
        )

    kcc = np.array([[k(ctx_x[i], ctx_x[j]) for j in range(n)] for i in range(n)])
    kct = np.array([[k(ctx_x[i], tgt_x[j]) for j in range(m)] for i in range(n)])
    kinv = np.linalg.inv(kcc + (params.noise_std**2 + 1e-10 * params.signal_std**2) * np.eye(n))
    means = kct.T @ kinv @ np.asarray(ctx_y, dtype=float)
    variances = np.array(
        [
            params.signal_std**2 - kct[:, j] @ kinv @ kct[:, j] + params.noise_std**2
            for j in range(m)
        ]
    )
    return means, np.sqrt(variances)


class TestSEKernel:
    def test_zero_distance_equals_signal_variance(self):
        p = SEKernelParams(lengthscale=0.25)
        assert se_kernel(0.0, 0.0, p) == 1.0
        p2 = SEKernelParams(lengthscale=0.25, signal_std=2.0)
        assert se_kernel(0.3, 0.3, p2) == 4.0

    def test_distance_of_one_lengthscale(self):
        p = SEKernelParams(lengthscale=0.25)
        assert se_kernel(0.0, 0.25, p) == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_far_field_underflows_to_zero(self):
        p = SEKernelParams(lengthscale=0.05)
        v = se_kernel(0.0, 10.0, p)
        assert 0.0 <= v < 1e-300

    @given(
        x=st.floats(-5, 5),
        x2=st.floats(-5, 5),
        ell=st.floats(0.01, 3.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_symmetry(self, x, x2, ell):
        p = SEKernelParams(lengthscale=ell)
        assert se_kernel(x, x2, p) == se_kernel(x2, x, p)

    def test_gram_matrices_are_positive_semidefinite(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            pts = rng.uniform(-2, 2, size=(20, 1))
            k = gram_matrix(pts, None, SEKernelParams(lengthscale=0.25))
            assert np.linalg.eigvalsh(k).min() >= -1e-8

    def test_invalid_params_rejected(self):
        with pytest.raises(ConfigurationError):
            SEKernelParams(lengthscale=0.0)
        with pytest.raises(ConfigurationError):
            SEKernelParams(lengthscale=1.0, noise_std=-0.1)


class TestSampleGPField:
    def test_single_point_sample_variance(self):
        # 99% interval for the sample variance of 10000 standard normals
        # is well inside [0.94, 1.06].
        p = SEKernelParams(lengthscale=0.25, noise_std=0.0)
        rng = np.random.default_rng(2024)
        draws = np.array(
            [sample_gp_field(p, np.array([0.3]), rng).latent_values[0] for _ in range(10000)]
        )
        assert 0.94 <= draws.var() <= 1.06

    def test_two_point_correlation_matches_kernel(self):
        p = SEKernelParams(lengthscale=0.25, noise_std=0.0)
        rng = np.random.default_rng(7)
        coords = np.array([0.0, 0.25])
        draws = np.array(
            [sample_gp_field(p, coords, rng).latent_values for _ in range(10000)]
        )
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr - math.exp(-0.5)) < 0.03

    def test_same_seed_is_bitwise_identical(self):
        p = SEKernelParams(lengthscale=0.3, noise_std=0.1)
        coords = np.linspace(-2, 2, 17)
        a = sample_gp_field(p, coords, np.random.default_rng(5))
        b = sample_gp_field(p, coords, np.random.default_rng(5))
        assert np.array_equal(a.latent_values, b.latent_values)
        assert np.array_equal(a.observed_values, b.observed_values)

    def test_zero_noise_observed_equals_latent(self):
        p = SEKernelParams(lengthscale=0.3, noise_std=0.0)
        f = sample_gp_field(p, np.linspace(0, 1, 9), np.random.default_rng(1))
        assert np.array_equal(f.observed_values, f.latent_values)

    def test_degenerate_covariance_names_a_pair(self):
        p = SEKernelParams(lengthscale=0.25)
        coords = np.array([0.1, np.nan, 0.3])
        with pytest.raises(DegenerateCovarianceError, match="coordinate"):
            sample_gp_field(p, coords, np.random.default_rng(0))


class TestPosteriorOracle:
    def test_empty_context_is_prior_predictive(self):
        p = SEKernelParams(lengthscale=0.25, noise_std=0.05)
        res = gp_posterior_oracle(np.zeros((0, 1)), np.zeros(0), np.array([[0.7]]), p)
        assert res.means[0] == 0.0
        assert res.stds[0] == pytest.approx(math.sqrt(1.0025), abs=1e-12)

    def test_one_point_posterior_hand_values(self):
        # Exact 1-point formulas: mean = y / (1 + noise^2),
        # var = noise^2 + 1 - 1/(1 + noise^2), for signal_std 1 at distance 0.
        p = SEKernelParams(lengthscale=0.25, noise_std=0.05)
        res = gp_posterior_oracle(np.array([[0.0]]), np.array([1.0]), np.array([[0.0]]), p)
        assert res.means[0] == pytest.approx(1.0 / 1.0025, abs=1e-9)
        assert res.stds[0] ** 2 == pytest.approx(0.0025 + 1 - 1 / 1.0025, abs=1e-9)
        # the rounded values quoted alongside the formulas
        assert res.means[0] == pytest.approx(0.99751, abs=1e-5)
        assert res.stds[0] ** 2 == pytest.approx(0.0049938, abs=1e-6)

    def test_matches_direct_inversion_on_random_tasks(self):
        # Acceptance-grade: 100 random tasks of <= 10 points, relative error
        # against the brute-force implementation below 1e-10.
        rng = np.random.default_rng(42)
        p = SEKernelParams(lengthscale=0.25, noise_std=0.05)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 11))
            m = int(rng.integers(1, 6))
            ctx_x = rng.uniform(-2, 2, size=(n, 1))
            ctx_y = rng.standard_normal(n)
            tgt_x = rng.uniform(-2, 2, size=(m, 1))
            res = gp_posterior_oracle(ctx_x, ctx_y, tgt_x, p)
            means, stds = direct_inversion_posterior(ctx_x, ctx_y, tgt_x, p)
            rel_m = np.max(np.abs(res.means - means) / np.maximum(np.abs(means), 1e-6))
            rel_s = np.max(np.abs(res.stds - stds) / stds)
            worst = max(worst, float(rel_m), float(rel_s))
        assert worst < 1e-10

    def test_posterior_mean_approaches_context_value(self):
        p = SEKernelParams(lengthscale=0.25, noise_std=1e-6)
        res = gp_posterior_oracle(
            np.array([[0.4]]), np.array([0.8]), np.array([[0.4]]), p
        )
        assert res.means[0] == pytest.approx(0.8, abs=1e-6)

    def test_mean_log_density_matches_manual(self):
        p = SEKernelParams(lengthscale=0.25, noise_std=0.05)
        ctx_x = np.array([[0.0], [0.5]])
        ctx_y = np.array([1.0, -0.2])
        tgt_x = np.array([[0.2], [0.9]])
        tgt_y = np.array([0.4, 0.1])
        res = gp_posterior_oracle(ctx_x, ctx_y, tgt_x, p, target_values=tgt_y)
        manual = np.mean(
            [
                -0.5 * math.log(2 * math.pi * s**2) - (y - mu) ** 2 / (2 * s**2)
                for mu, s, y in zip(res.means, res.stds, tgt_y)
            ]
        )
        assert res.mean_log_density == pytest.approx(manual, abs=1e-12)

    def test_sum_kernel_reduces_to_single(self):
        p = SEKernelParams(lengthscale=0.25, noise_std=0.05)
        ctx_x = np.array([[0.0], [0.5]])
        ctx_y = np.array([1.0, -0.2])
        tgt_x = np.array([[0.2]])
        a = gp_posterior_oracle(ctx_x, ctx_y, tgt_x, p)
        b = gp_posterior_oracle_sum(ctx_x, ctx_y, tgt_x, [p], p.noise_std)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.stds, b.stds)


@pytest.fixture(scope="module")
def small_world():
    cfg = StationWorldConfig(n_stations=60, n_times=4)
    return generate_station_world(cfg, child_rng(123, "world")), cfg


class TestStationWorld:
    def test_invariant_rejects_bad_lengthscale_order(self):
        with pytest.raises(ConfigurationError):
            StationWorldConfig(
                sim_grid_spacing=0.05,
                short_component=SEKernelParams(lengthscale=0.06, signal_std=0.1),
            )

    def test_gap_off_station_values_equal_long_field(self):
        cfg = StationWorldConfig(
            n_stations=40,
            n_times=3,
            short_component=SEKernelParams(lengthscale=0.01, signal_std=0.0),
            station_noise_std=0.0,
        )
        world = generate_station_world(cfg, child_rng(9, "world"))
        assert np.array_equal(world.station_values, world.station_long)

    def test_gap_on_station_values_differ_from_long_field(self, small_world):
        world, _ = small_world
        assert not np.allclose(world.station_values, world.station_long)

    def test_min_station_separation_holds(self, small_world):
        world, cfg = small_world
        d = np.linalg.norm(
            world.station_points[:, None] - world.station_points[None, :], axis=-1
        )
        np.fill_diagonal(d, np.inf)
        assert d.min() >= cfg.station_separation

    def test_default_min_separation_is_fifth_of_grid_spacing(self):
        # The densest default world packs stations down to about a fifth of
        # the sim grid spacing; verified via the minimum pairwise distance.
        cfg = StationWorldConfig(n_times=2)
        world = generate_station_world(cfg, child_rng(77, "world"))
        d = np.linalg.norm(
            world.station_points[:, None] - world.station_points[None, :], axis=-1
        )
        np.fill_diagonal(d, np.inf)
        assert cfg.sim_grid_spacing / 5 <= d.min() <= 2 * cfg.sim_grid_spacing / 5

    def test_same_seed_identical_world(self):
        cfg = StationWorldConfig(n_stations=30, n_times=2)
        a = generate_station_world(cfg, child_rng(5, "world"))
        b = generate_station_world(cfg, child_rng(5, "world"))
        assert np.array_equal(a.station_points, b.station_points)
        assert np.array_equal(a.sim_fields, b.sim_fields)
        assert np.array_equal(a.station_values, b.station_values)
        assert np.array_equal(a.aux_field.values, b.aux_field.values)

    def test_impossible_density_is_a_configuration_error(self):
        cfg = StationWorldConfig(n_stations=600, n_times=2, min_station_separation=0.05)
        with pytest.raises(ConfigurationError):
            generate_station_world(cfg, child_rng(0, "world"))

    def test_aux_grid_is_finer_than_sim_grid(self, small_world):
        world, cfg = small_world
        assert world.aux_field.grid.spacing < cfg.sim_grid_spacing

    def test_sim_fields_lack_station_detail(self, small_world):
        world, _ = small_world
        assert world.sim_fields.shape[1:] == world.sim_grid.shape
        assert np.isfinite(world.sim_fields).all()
