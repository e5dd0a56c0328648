"""Dropout, test-time scaling, rendering strategies, parameter noise,
Concrete dropout, density-based rates, and opacity decay.
"""

import numpy as np
import pytest

from cosplat.coadaptation import RaySlice, enumerate_composites, exact_pixel_mean
from cosplat.core import sigmoid
from cosplat.regularizers import (
    NoiseSpec,
    apply_concrete_mask,
    apply_noise,
    concrete_dropout_mask,
    concrete_mask_p_grad,
    density_based_rates,
    nearest_neighbor_distances,
    opacity_decay,
    render_with_strategy,
    sample_dropout_mask,
    test_time_opacity_scale as tt_opacity_scale,
)
from cosplat.renderer import render

from conftest import front_camera, random_cloud
from test_renderer import flat_color_cloud


class TestDropoutMask:
    def test_p_zero_all_kept(self):
        mask = sample_dropout_mask(100, 0.0, seed=0, iteration=1)
        assert mask.keep.all()

    def test_binomial_concentration(self):
        mask = sample_dropout_mask(100_000, 0.2, seed=1, iteration=1)
        sigma = np.sqrt(0.2 * 0.8 / 100_000)
        assert abs(mask.keep.mean() - 0.8) < 3 * sigma

    def test_determinism_and_iteration_dependence(self):
        a = sample_dropout_mask(1000, 0.5, seed=2, iteration=7)
        b = sample_dropout_mask(1000, 0.5, seed=2, iteration=7)
        c = sample_dropout_mask(1000, 0.5, seed=2, iteration=8)
        assert np.array_equal(a.keep, b.keep)
        assert not np.array_equal(a.keep, c.keep)

    def test_per_gaussian_rates(self):
        p = np.concatenate([np.zeros(500), np.full(500, 0.9)])
        mask = sample_dropout_mask(1000, p, seed=3, iteration=1)
        assert mask.keep[:500].all()
        assert mask.keep[500:].mean() < 0.3


class TestTestTimeScale:
    def test_values(self):
        assert tt_opacity_scale(0.2) == pytest.approx(0.8)
        assert tt_opacity_scale(0.0) == 1.0
        assert tt_opacity_scale(0.5) == 0.5


class TestStrategies:
    def test_p_zero_identity(self, cloud20, cam32):
        plain = render(cloud20, cam32)
        for strategy in "ABC":
            out = render_with_strategy(cloud20, cam32, 0.0, strategy, seed=0)
            assert np.array_equal(out.color, plain.color)

    def test_strategy_c_is_scaled_render(self, cloud20, cam32):
        out_c = render_with_strategy(cloud20, cam32, 0.3, "C", seed=0)
        scaled = render(cloud20, cam32, opacity_scale=0.7)
        assert np.array_equal(out_c.color, scaled.color)
        assert np.array_equal(out_c.alpha, scaled.alpha)

    def test_strategy_a_is_one_masked_render(self, cloud20, cam32):
        out_a = render_with_strategy(cloud20, cam32, 0.4, "A", seed=5)
        mask = sample_dropout_mask(20, 0.4, seed=5, iteration=0)
        ref = render(cloud20, cam32, mask=mask.keep)
        assert np.array_equal(out_a.color, ref.color)

    def test_strategy_b_matches_mask_expectation(self):
        # Single flat-splat scene: pixel color expectation under dropout is
        # computable exactly from the 2^n enumeration.
        rng = np.random.default_rng(6)
        n = 5
        cloud = flat_color_cloud(
            np.column_stack([np.zeros(n), np.zeros(n), np.linspace(-0.5, 0.5, n)]),
            rng.uniform(0.2, 0.5, n), rng.uniform(0, 1, (n, 3)), scale=30.0,
        )
        cam = front_camera(4, 4)
        contrib = render(cloud, cam, with_contributors=True).contributors.at(2, 2)
        ray = RaySlice(
            alphas=np.array([c[1] for c in contrib]),
            colors=np.array([c[3] for c in contrib]),
        )
        p = 0.4
        expected = exact_pixel_mean(ray, 1.0 - p)
        B = 2000
        out_b = render_with_strategy(cloud, cam, p, "B", B_count=B, seed=7)
        # Monte-Carlo standard error from the enumerated second moment.
        colors, weights = enumerate_composites(ray, 1.0 - p)
        var = float(np.mean(weights @ colors**2 - (weights @ colors) ** 2))
        se = np.sqrt(var / B)
        got = float(out_b.color[2, 2].mean())
        assert abs(got - float(np.mean(expected))) <= 3 * se + 1e-12

    def test_invalid_strategy(self, cloud20, cam32):
        with pytest.raises(ValueError):
            render_with_strategy(cloud20, cam32, 0.2, "D")


class TestNoise:
    def test_sigma_zero_identity(self, cloud20):
        for target in ("opacity", "scale", "sh"):
            pert = apply_noise(cloud20, NoiseSpec(target, 0.0), seed=0, iteration=1)
            assert np.allclose(pert.cloud.opacity_logits, cloud20.opacity_logits)
            assert np.allclose(pert.cloud.log_scales, cloud20.log_scales)
            assert np.allclose(pert.cloud.sh_coeffs, cloud20.sh_coeffs)

    def test_does_not_mutate_source(self, cloud20):
        before = cloud20.opacity_logits.copy()
        apply_noise(cloud20, NoiseSpec("opacity", 0.5), seed=1, iteration=3)
        assert np.array_equal(cloud20.opacity_logits, before)

    def test_opacity_clamp_floor(self, cloud20):
        # sigma large enough that some (1 + eps) go negative; activated
        # opacities must clamp to the floor, never zero.
        pert = apply_noise(cloud20, NoiseSpec("opacity", 5.0), seed=2, iteration=1)
        acts = sigmoid(pert.cloud.opacity_logits)
        assert np.all(acts >= 1e-4 - 1e-12)
        assert np.all(acts <= 0.9999 + 1e-12)

    def test_scale_floor(self, cloud20):
        pert = apply_noise(cloud20, NoiseSpec("scale", 5.0), seed=3, iteration=1)
        assert np.all(np.exp(pert.cloud.log_scales) >= 1e-6 - 1e-18)

    def test_position_noise_std(self):
        # Unit-grid cloud: d_nn = 1, so per-axis displacement std ~ sigma.
        side = 5
        grid = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), -1).reshape(-1, 3)
        cloud = flat_color_cloud(grid.astype(float), [0.5] * len(grid), [[0.5] * 3] * len(grid))
        d = nearest_neighbor_distances(cloud)
        assert np.allclose(d, 1.0)
        sigma = 0.3
        disps = []
        for it in range(200):
            pert = apply_noise(cloud, NoiseSpec("position", sigma), seed=4, iteration=it,
                               nn_distances=d)
            disps.append(pert.cloud.positions - cloud.positions)
        std = np.std(np.concatenate(disps))
        mc_se = sigma / np.sqrt(2 * 200 * len(grid) * 3)
        assert abs(std - sigma) < 3 * mc_se + 0.01

    def test_position_noise_single_gaussian_rejected(self):
        cloud = flat_color_cloud([[0.0, 0.0, 0.0]], [0.5], [[0.5] * 3])
        with pytest.raises(ValueError):
            apply_noise(cloud, NoiseSpec("position", 0.1), seed=5, iteration=1)

    def test_invalid_target(self):
        with pytest.raises(ValueError):
            NoiseSpec("color", 0.1)

    def test_mode_property(self):
        assert NoiseSpec("position", 0.1).mode == "additive"
        assert NoiseSpec("opacity", 0.1).mode == "multiplicative"


class TestConcreteDropout:
    def test_midpoint(self):
        # u = 0.5 and p = 0.5 zero out both logit terms -> z = 0.5.
        p = np.array([0.5])
        z = 1.0 / (1.0 + np.exp(-(np.log(p / (1 - p)) + np.log(0.5 / 0.5)) / 0.1))
        assert z[0] == pytest.approx(0.5)

    def test_tau_to_zero_hardens(self):
        rng = np.random.default_rng(8)
        p = np.full(200, 0.3)
        z_soft = concrete_dropout_mask(p, 0.1, seed=9, iteration=1)
        z_hard = concrete_dropout_mask(p, 1e-4, seed=9, iteration=1)
        assert np.all((z_hard < 1e-6) | (z_hard > 1 - 1e-6))
        assert np.all((z_soft >= 0) & (z_soft <= 1))

    def test_mean_matches_drop_probability(self):
        # As tau -> 0 the mask is Bernoulli(p): mean z ~ p.
        p = np.full(50_000, 0.3)
        z = concrete_dropout_mask(p, 1e-3, seed=10, iteration=1)
        sigma = np.sqrt(0.3 * 0.7 / 50_000)
        assert abs(z.mean() - 0.3) < 4 * sigma

    def test_p_gradient_finite_difference(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0.2, 0.8, 50)
        tau = 0.1
        z = concrete_dropout_mask(p, tau, seed=12, iteration=1)
        grad = concrete_mask_p_grad(z, p, tau)
        eps = 1e-6
        z_hi = concrete_dropout_mask(p + eps, tau, seed=12, iteration=1)
        z_lo = concrete_dropout_mask(p - eps, tau, seed=12, iteration=1)
        fd = (z_hi - z_lo) / (2 * eps)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-4

    def test_applied_as_opacity_factor(self, cloud20):
        z = concrete_dropout_mask(np.full(20, 0.5), 0.1, seed=13, iteration=1)
        masked = apply_concrete_mask(cloud20, z)
        got = sigmoid(masked.opacity_logits)
        want = np.clip(sigmoid(cloud20.opacity_logits) * (1.0 - z), 1e-12, None)
        assert np.allclose(got, want, atol=1e-9)


class TestDensityRates:
    def test_two_cluster_ordering(self):
        rng = np.random.default_rng(14)
        tight = rng.normal(0.0, 0.05, (30, 3))
        halo = rng.normal(0.0, 3.0, (30, 3)) + 20.0
        cloud = flat_color_cloud(
            np.vstack([tight, halo]), [0.5] * 60, [[0.5] * 3] * 60
        )
        rates = density_based_rates(cloud, k_neighbors=8)
        # Min-max normalization lets the single densest point dominate, so
        # compare cluster means and the endpoints rather than fixed levels.
        assert rates[:30].mean() > rates[30:].mean()
        assert rates[:30].max() == pytest.approx(0.5)
        assert rates[30:].mean() < 0.25
        assert np.all((rates >= 0.2) & (rates <= 0.5))

    def test_degenerate_uniform(self):
        grid = np.stack(np.meshgrid(*[np.arange(3)] * 3, indexing="ij"), -1).reshape(-1, 3)
        # A perfectly regular grid is not exactly degenerate at the boundary;
        # force degeneracy with two identical-density points instead.
        cloud = flat_color_cloud(
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            [0.5] * 3, [[0.5] * 3] * 3,
        )
        rates = density_based_rates(cloud, k_neighbors=1)
        assert np.allclose(rates, 0.35)

    def test_lo_equals_hi(self, cloud20):
        rates = density_based_rates(cloud20, k_neighbors=4, lo=0.25, hi=0.25)
        assert np.allclose(rates, 0.25)

    def test_k_validated(self, cloud20):
        with pytest.raises(ValueError):
            density_based_rates(cloud20, k_neighbors=20)


class TestOpacityDecay:
    def test_identity_factor(self, cloud20):
        out = opacity_decay(cloud20, 1.0)
        assert np.allclose(out.opacity_logits, cloud20.opacity_logits, atol=1e-12)

    def test_paper_value(self):
        cloud = flat_color_cloud([[0.0, 0.0, 0.0]], [0.5], [[0.5] * 3])
        out = opacity_decay(cloud, 0.995)
        assert sigmoid(out.opacity_logits[0]) == pytest.approx(0.4975, abs=1e-9)

    def test_composition(self, cloud20):
        out = cloud20
        for _ in range(5):
            out = opacity_decay(out, 0.99)
        want = sigmoid(cloud20.opacity_logits) * 0.99**5
        assert np.allclose(sigmoid(out.opacity_logits), want, atol=1e-6)

    def test_factor_validated(self, cloud20):
        for bad in (0.0, 1.1):
            with pytest.raises(ValueError):
                opacity_decay(cloud20, bad)


class TestNoiseGradientChain:
    def test_chain_maps_to_unperturbed_parameters(self, cloud20, cam32):
        # Gradients through a noisy render, chained back to the clean
        # parameters, must match finite differences on the clean parameters
        # with the noise held fixed.
        from cosplat.gradients import render_backward

        spec = NoiseSpec("opacity", 0.3)
        pert = apply_noise(cloud20, spec, seed=15, iteration=2)
        rng = np.random.default_rng(16)
        adj = rng.normal(size=(32, 32, 3))

        grads = pert.chain(render_backward(pert.cloud, cam32, None, 1.0, adj))

        def loss_at(logit_val, idx):
            trial = cloud20.copy()
            trial.opacity_logits[idx] = logit_val
            trial_pert = apply_noise(trial, spec, seed=15, iteration=2)
            return float(np.sum(render(trial_pert.cloud, cam32).color * adj))

        for idx in (0, 7, 13):
            theta = cloud20.opacity_logits[idx]
            eps = 1e-5
            fd = (loss_at(theta + eps, idx) - loss_at(theta - eps, idx)) / (2 * eps)
            assert grads.opacity_logit[idx] == pytest.approx(fd, rel=1e-3, abs=1e-8)
