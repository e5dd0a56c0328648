"""Shared scene/camera builders for the test suite."""

import numpy as np
import pytest

from cosplat.core import Camera, GaussianCloud, logit


def random_cloud(n: int, seed: int = 0, sh_degree: int = 0,
                 extent: float = 1.0, opacity_range=(0.2, 0.9)) -> GaussianCloud:
    """A well-conditioned random cloud centered at the origin."""
    rng = np.random.default_rng(seed)
    m = (sh_degree + 1) ** 2
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, m, 3))
    sh[:, 0, :] = rng.uniform(-1.2, 1.2, size=(n, 3))
    if m > 1:
        sh[:, 1:, :] = rng.normal(0.0, 0.15, size=(n, m - 1, 3))
    return GaussianCloud(
        positions=rng.uniform(-extent, extent, size=(n, 3)),
        rotations=quats,
        log_scales=np.log(rng.uniform(0.08, 0.3, size=(n, 3)) * extent),
        opacity_logits=logit(rng.uniform(*opacity_range, size=n)),
        sh_coeffs=sh,
        sh_degree=sh_degree,
    )


def front_camera(width: int = 32, height: int = 32, distance: float = 4.0) -> Camera:
    return Camera.look_at(
        np.array([0.0, 0.0, -distance]), np.zeros(3), width=width, height=height
    )


@pytest.fixture
def cloud20():
    return random_cloud(20, seed=1)


@pytest.fixture
def cam32():
    return front_camera(32, 32)
