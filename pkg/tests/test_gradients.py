"""Analytic backward pass vs central finite differences."""

import numpy as np
import pytest

from cosplat.core import logit
from cosplat.gradients import ParamGrads, finite_diff_check, render_backward
from cosplat.renderer import render

from conftest import front_camera, random_cloud


class TestFiniteDifferenceAgreement:
    def test_single_gaussian(self):
        cloud = random_cloud(1, seed=0)
        cam = front_camera(16, 16)
        assert finite_diff_check(cloud, cam, samples=40, seed=0) < 1e-5

    def test_fifty_gaussians(self):
        cloud = random_cloud(50, seed=2, sh_degree=1)
        cam = front_camera(24, 24)
        assert finite_diff_check(cloud, cam, samples=120, seed=1) < 1e-4

    def test_with_mask_and_scale(self):
        cloud = random_cloud(30, seed=3, sh_degree=2)
        cam = front_camera(24, 24)
        mask = np.random.default_rng(5).random(30) < 0.7
        err = finite_diff_check(cloud, cam, samples=80, seed=2, mask=mask, opacity_scale=0.8)
        assert err < 1e-4

    def test_near_degenerate_scale(self):
        cloud = random_cloud(8, seed=4)
        cloud.log_scales[0] = np.log(1e-6)
        cam = front_camera(16, 16)
        err = finite_diff_check(cloud, cam, samples=60, seed=3)
        assert np.isfinite(err)
        assert err < 1e-3


class TestBackwardStructure:
    def test_zero_adjoint_zero_grads(self, cloud20, cam32):
        grads = render_backward(cloud20, cam32, None, 1.0, np.zeros((32, 32, 3)))
        for field in (grads.position, grads.rotation, grads.log_scale,
                      grads.opacity_logit, grads.sh_coeffs):
            assert not field.any()

    def test_masked_out_rows_zero(self, cloud20, cam32):
        rng = np.random.default_rng(6)
        mask = rng.random(20) < 0.5
        adj = rng.normal(size=(32, 32, 3))
        grads = render_backward(cloud20, cam32, mask, 1.0, adj)
        dropped = ~mask
        assert not grads.position[dropped].any()
        assert not grads.opacity_logit[dropped].any()
        assert not grads.sh_coeffs[dropped].any()

    def test_linearity(self, cloud20, cam32):
        rng = np.random.default_rng(7)
        g1 = rng.normal(size=(32, 32, 3))
        g2 = rng.normal(size=(32, 32, 3))
        a, b = 0.3, -1.7
        combo = render_backward(cloud20, cam32, None, 1.0, a * g1 + b * g2)
        p1 = render_backward(cloud20, cam32, None, 1.0, g1)
        p2 = render_backward(cloud20, cam32, None, 1.0, g2)
        assert np.allclose(combo.position, a * p1.position + b * p2.position, atol=1e-9)
        assert np.allclose(combo.sh_coeffs, a * p1.sh_coeffs + b * p2.sh_coeffs, atol=1e-9)

    def test_occluded_gradient_suppressed(self):
        # A 0.99-alpha front plane leaves at most 1% transmittance for the
        # Gaussian behind it.
        from test_renderer import flat_color_cloud

        back_only = flat_color_cloud([[0.0, 0.0, 0.5]], [0.6], [[0.9, 0.1, 0.2]], scale=2.0)
        both = flat_color_cloud(
            [[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]], [0.9999999, 0.6],
            [[0.5, 0.5, 0.5], [0.9, 0.1, 0.2]], scale=2.0,
        )
        both.log_scales[0] = np.log(50.0)  # flat occluder across the viewport
        cam = front_camera(16, 16)
        adj = np.ones((16, 16, 3))
        g_free = render_backward(back_only, cam, None, 1.0, adj)
        g_occ = render_backward(both, cam, None, 1.0, adj)
        free_norm = np.linalg.norm(g_free.sh_coeffs[0])
        occ_norm = np.linalg.norm(g_occ.sh_coeffs[1])
        assert occ_norm <= 0.0101 * free_norm

    def test_all_grads_finite(self, cloud20, cam32):
        rng = np.random.default_rng(8)
        grads = render_backward(cloud20, cam32, None, 1.0, rng.normal(size=(32, 32, 3)))
        assert grads.is_finite()

    def test_samples_validated(self, cloud20, cam32):
        with pytest.raises(ValueError):
            finite_diff_check(cloud20, cam32, samples=0, seed=0)
