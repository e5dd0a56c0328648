"""Scene representation: activations, covariance construction, SH color,
cameras.
"""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cosplat.core import (
    Camera,
    Gaussian,
    GaussianCloud,
    activate_opacity,
    activate_scale,
    covariance_world,
    logit,
    normalize_quaternions,
    quaternions_to_rotations,
    sigmoid,
)
from cosplat.sh import n_coeffs, sh_basis, sh_to_color

from conftest import random_cloud


def make_gaussian(**overrides) -> Gaussian:
    base = dict(
        position=np.zeros(3),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        log_scale=np.zeros(3),
        opacity_logit=0.0,
        sh_coeffs=np.zeros((1, 3)),
    )
    base.update(overrides)
    return Gaussian(**base)


class TestActivations:
    def test_opacity_zero_logit(self):
        assert activate_opacity(make_gaussian()) == 0.5

    def test_opacity_ln3(self):
        assert activate_opacity(make_gaussian(opacity_logit=math.log(3))) == pytest.approx(0.75, abs=1e-12)

    def test_opacity_large_logit_stays_below_one(self):
        val = activate_opacity(make_gaussian(opacity_logit=40.0))
        assert 0.999 < val < 1.0

    def test_scale_positive(self):
        g = make_gaussian(log_scale=np.array([-30.0, 0.0, 5.0]))
        assert np.all(activate_scale(g) > 0)

    @given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
    def test_logit_sigmoid_round_trip(self, p):
        assert sigmoid(logit(p)) == pytest.approx(p, abs=1e-9)


class TestCovarianceWorld:
    def test_identity(self):
        cov = covariance_world(make_gaussian())
        assert np.allclose(cov, np.eye(3))

    def test_axis_scales(self):
        g = make_gaussian(log_scale=np.log([2.0, 1.0, 1.0]))
        assert np.allclose(covariance_world(g), np.diag([4.0, 1.0, 1.0]))

    def test_determinant_and_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.normal(size=4)
            s = rng.uniform(0.2, 2.0, size=3)
            g = make_gaussian(rotation=q / np.linalg.norm(q), log_scale=np.log(s))
            cov = covariance_world(g)
            assert np.allclose(cov, cov.T, atol=1e-9)
            assert np.linalg.det(cov) == pytest.approx(np.prod(s**2), rel=1e-9)
            assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=4)
        s = np.array([0.5, 1.0, 2.0])
        g = make_gaussian(rotation=q / np.linalg.norm(q), log_scale=np.log(s))
        eig = np.sort(np.linalg.eigvalsh(covariance_world(g)))
        assert np.allclose(eig, np.sort(s**2), atol=1e-9)


class TestQuaternions:
    def test_normalize(self):
        q = np.array([[2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
        out = normalize_quaternions(q)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_rotation_is_orthonormal(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(10, 4))
        rots = quaternions_to_rotations(q)
        for r in rots:
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


class TestSHColor:
    def test_zero_coeffs_mid_gray(self):
        color = sh_to_color(np.zeros((1, 3)), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(color, 0.5)

    def test_degree0_red_saturates(self):
        coeffs = np.zeros((1, 3))
        coeffs[0, 0] = 0.5 / 0.28209479177387814
        color = sh_to_color(coeffs, np.array([0.0, 0.0, 1.0]))
        assert color[0] == pytest.approx(1.0, abs=1e-12)

    def test_degree0_view_independent(self):
        rng = np.random.default_rng(6)
        coeffs = rng.normal(size=(1, 3))
        dirs = rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        colors = [sh_to_color(coeffs, d) for d in dirs]
        assert np.allclose(colors, colors[0])

    def test_odd_even_parity(self):
        # Flipping the view direction negates odd-degree basis functions and
        # leaves even-degree ones unchanged.
        rng = np.random.default_rng(7)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        for degree in (1, 2, 3):
            b_pos = sh_basis(d, degree)
            b_neg = sh_basis(-d, degree)
            idx = 0
            for ell in range(degree + 1):
                width = 2 * ell + 1
                sign = (-1) ** ell
                assert np.allclose(b_neg[idx: idx + width], sign * b_pos[idx: idx + width], atol=1e-12)
                idx += width

    def test_degree_over_3_rejected(self):
        with pytest.raises(ValueError):
            sh_to_color(np.zeros((25, 3)), np.array([0.0, 0.0, 1.0]))

    def test_unnormalized_direction_rejected(self):
        with pytest.raises(ValueError):
            sh_to_color(np.zeros((1, 3)), np.array([0.0, 0.0, 2.0]))

    def test_output_clamped(self):
        coeffs = np.full((1, 3), 50.0)
        color = sh_to_color(coeffs, np.array([0.0, 0.0, 1.0]))
        assert np.all(color <= 1.0)
        color = sh_to_color(-coeffs, np.array([0.0, 0.0, 1.0]))
        assert np.all(color >= 0.0)

    def test_coeff_counts(self):
        assert [n_coeffs(d) for d in range(4)] == [1, 4, 9, 16]


class TestCamera:
    def test_look_at_sees_target(self):
        cam = Camera.look_at(np.array([1.0, 2.0, -5.0]), np.zeros(3), width=32, height=32)
        p = cam.world_to_camera @ np.array([0.0, 0.0, 0.0, 1.0])
        assert p[2] > 0
        u = cam.fx * p[0] / p[2] + cam.cx
        v = cam.fy * p[1] / p[2] + cam.cy
        assert abs(u - cam.cx) < 1e-6 and abs(v - cam.cy) < 1e-6

    def test_pose_is_rigid(self):
        cam = Camera.look_at(np.array([3.0, 1.0, -2.0]), np.zeros(3), width=16, height=16)
        r = cam.R
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert np.allclose(cam.center, np.array([3.0, 1.0, -2.0]), atol=1e-9)

    def test_invalid_near_far(self):
        with pytest.raises(ValueError):
            Camera(
                fx=30, fy=30, cx=8, cy=8, width=16, height=16,
                world_to_camera=np.hstack([np.eye(3), np.zeros((3, 1))]),
                near=2.0, far=1.0,
            )


class TestGaussianCloud:
    def test_round_trip_gaussians(self):
        cloud = random_cloud(5, seed=8)
        rebuilt = GaussianCloud.from_gaussians(list(cloud), cloud.sh_degree)
        assert np.allclose(rebuilt.positions, cloud.positions)
        assert np.allclose(rebuilt.sh_coeffs, cloud.sh_coeffs)

    def test_filtered_keeps_order(self):
        cloud = random_cloud(6, seed=9)
        keep = np.array([True, False, True, True, False, True])
        sub = cloud.filtered(keep)
        assert len(sub) == 4
        assert np.allclose(sub.positions, cloud.positions[keep])

    def test_mismatched_lengths_rejected(self):
        cloud = random_cloud(4, seed=10)
        with pytest.raises(ValueError):
            GaussianCloud(
                positions=cloud.positions[:3],
                rotations=cloud.rotations,
                log_scales=cloud.log_scales,
                opacity_logits=cloud.opacity_logits,
                sh_coeffs=cloud.sh_coeffs,
                sh_degree=0,
            )
