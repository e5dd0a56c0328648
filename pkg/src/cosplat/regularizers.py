"""Co-adaptation suppression: dropout, parameter noise, Concrete dropout,
density-based dropout rates, and opacity decay.

All sampling is pure given (seed, iteration). Noise perturbs activated values
for the duration of one render and is never written back to the stored
parameters; gradients are chained back to the unperturbed parameters with the
noise treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianCloud, logit, sigmoid
from .gradients import ParamGrads
from .renderer import RenderOutput, render

OPACITY_NOISE_FLOOR = 1e-4
OPACITY_NOISE_CEIL = 0.9999
SCALE_NOISE_FLOOR = 1e-6

NOISE_TARGETS = ("opacity", "scale", "position", "sh")


@dataclass
class DropoutMask:
    """A Bernoulli keep-mask with its sampling provenance."""

    keep: np.ndarray     # (n,) bool
    p: np.ndarray        # scalar or per-Gaussian drop probabilities
    seed: int
    iteration: int

    @property
    def kept_fraction(self) -> float:
        return float(self.keep.mean())


def sample_dropout_mask(n: int, p, seed: int, iteration: int) -> DropoutMask:
    """Sample keep-flags, each i.i.d. Bernoulli(1 - p_i).

    ``p`` may be a scalar or a length-n array of per-Gaussian drop
    probabilities. Deterministic given (seed, iteration).
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p >= 1.0):
        raise ValueError("drop probabilities must be in [0, 1)")
    rng = np.random.default_rng([seed, iteration])
    keep = rng.random(n) >= p
    return DropoutMask(keep=keep, p=p, seed=seed, iteration=iteration)


def test_time_opacity_scale(p: float) -> float:
    """Opacity multiplier 1 - p that matches training-time dropout expectations."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must be in [0, 1)")
    return 1.0 - p


def render_with_strategy(
    cloud: GaussianCloud,
    cam: Camera,
    p: float,
    strategy: str,
    B_count: int = 5,
    seed: int = 0,
) -> RenderOutput:
    """Inference rendering of a dropout-trained model.

    A: one random dropout rendering. B: pixel-wise mean of ``B_count`` random
    dropout renderings (color, alpha and depth all averaged). C: a single pass
    over all Gaussians with opacities scaled by (1 - p).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must be in [0, 1)")
    if strategy not in ("A", "B", "C"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if p == 0.0:
        return render(cloud, cam)
    if strategy == "A":
        mask = sample_dropout_mask(len(cloud), p, seed, 0)
        return render(cloud, cam, mask=mask.keep)
    if strategy == "C":
        return render(cloud, cam, opacity_scale=test_time_opacity_scale(p))
    color = alpha = depth = None
    for k in range(B_count):
        mask = sample_dropout_mask(len(cloud), p, seed, k)
        out = render(cloud, cam, mask=mask.keep)
        if color is None:
            color, alpha, depth = out.color, out.alpha, out.depth
        else:
            color = color + out.color
            alpha = alpha + out.alpha
            depth = depth + out.depth
    return RenderOutput(color=color / B_count, alpha=alpha / B_count, depth=depth / B_count)


@dataclass
class NoiseSpec:
    """What to perturb and how strongly.

    Opacity, scale and SH noise are multiplicative (value * (1 + eps)); position
    noise is additive, scaled by each Gaussian's nearest-neighbor distance.
    """

    target: str
    sigma: float

    def __post_init__(self):
        if self.target not in NOISE_TARGETS:
            raise ValueError(f"noise target must be one of {NOISE_TARGETS}")
        if self.sigma < 0.0:
            raise ValueError("sigma must be >= 0")

    @property
    def mode(self) -> str:
        return "additive" if self.target == "position" else "multiplicative"


@dataclass
class PerturbedCloud:
    """A per-iteration noisy view of a cloud.

    ``cloud`` carries the perturbed parameters for rendering; ``chain`` maps
    gradients computed on the perturbed parameters back onto the originals
    (noise treated as constant).
    """

    cloud: GaussianCloud
    _opacity_factor: Optional[np.ndarray] = None
    _scale_factor: Optional[np.ndarray] = None
    _sh_factor: Optional[np.ndarray] = None

    def chain(self, grads: ParamGrads) -> ParamGrads:
        out = ParamGrads(
            position=grads.position.copy(),
            rotation=grads.rotation.copy(),
            log_scale=grads.log_scale.copy(),
            opacity_logit=grads.opacity_logit.copy(),
            sh_coeffs=grads.sh_coeffs.copy(),
        )
        if self._opacity_factor is not None:
            out.opacity_logit *= self._opacity_factor
        if self._scale_factor is not None:
            out.log_scale *= self._scale_factor
        if self._sh_factor is not None:
            out.sh_coeffs *= self._sh_factor
        return out


def nearest_neighbor_distances(cloud: GaussianCloud) -> np.ndarray:
    """Euclidean distance from each Gaussian center to its nearest neighbor."""
    if len(cloud) < 2:
        raise ValueError("nearest-neighbor distance undefined for a single Gaussian")
    tree = cKDTree(cloud.positions)
    dist, _ = tree.query(cloud.positions, k=2)
    return dist[:, 1]


def apply_noise(
    cloud: GaussianCloud,
    spec: NoiseSpec,
    seed: int,
    iteration: int,
    nn_distances: Optional[np.ndarray] = None,
) -> PerturbedCloud:
    """One iteration's noisy parameter view; stored parameters are untouched.

    Opacity noise: activated opacity * (1 + eps), clamped to
    [1e-4, 0.9999]. Scale noise: activated scale * (1 + eps), floored at 1e-6.
    SH noise: every coefficient * (1 + eps). Position noise: center + eta * d_nn
    per axis, eta ~ N(0, sigma^2), d_nn the nearest-neighbor distance
    (precomputed distances may be passed to amortize the lookup).
    """
    perturbed = cloud.copy()
    if spec.sigma == 0.0:
        return PerturbedCloud(cloud=perturbed)
    rng = np.random.default_rng([seed, iteration])
    n = len(cloud)

    if spec.target == "opacity":
        eps = rng.normal(scale=spec.sigma, size=n)
        o = sigmoid(cloud.opacity_logits)
        o_new = o * (1.0 + eps)
        clamped = (o_new < OPACITY_NOISE_FLOOR) | (o_new > OPACITY_NOISE_CEIL)
        o_new = np.clip(o_new, OPACITY_NOISE_FLOOR, OPACITY_NOISE_CEIL)
        perturbed.opacity_logits = logit(o_new)
        # dL/dl = dL/dl' * sigma'(l)/sigma'(l') * (1 + eps), zero where clamped
        sp = o * (1.0 - o)
        sp_new = o_new * (1.0 - o_new)
        factor = np.where(clamped, 0.0, sp / sp_new * (1.0 + eps))
        return PerturbedCloud(cloud=perturbed, _opacity_factor=factor)

    if spec.target == "scale":
        eps = rng.normal(scale=spec.sigma, size=(n, 3))
        s = np.exp(cloud.log_scales)
        s_new = s * (1.0 + eps)
        floored = s_new < SCALE_NOISE_FLOOR
        s_new = np.maximum(s_new, SCALE_NOISE_FLOOR)
        perturbed.log_scales = np.log(s_new)
        factor = np.where(floored, 0.0, 1.0)  # log-scale shift, gradient unchanged
        return PerturbedCloud(cloud=perturbed, _scale_factor=factor)

    if spec.target == "sh":
        eps = rng.normal(scale=spec.sigma, size=cloud.sh_coeffs.shape)
        perturbed.sh_coeffs = cloud.sh_coeffs * (1.0 + eps)
        return PerturbedCloud(cloud=perturbed, _sh_factor=1.0 + eps)

    # position
    d_nn = nearest_neighbor_distances(cloud) if nn_distances is None else np.asarray(nn_distances)
    eta = rng.normal(scale=spec.sigma, size=(n, 3))
    perturbed.positions = cloud.positions + eta * d_nn[:, None]
    return PerturbedCloud(cloud=perturbed)


def concrete_dropout_mask(p: np.ndarray, tau: float, seed: int, iteration: int) -> np.ndarray:
    """Soft Binary-Concrete keep-noise z in (0, 1) for per-Gaussian drop rates.

    z_i = sigmoid((log p_i - log(1-p_i) + log u_i - log(1-u_i)) / tau) with
    u_i ~ U(0, 1); applied as opacity <- opacity * (1 - z_i). Low temperatures
    saturate toward hard masks.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("per-Gaussian probabilities must be in (0, 1)")
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    rng = np.random.default_rng([seed, iteration])
    u = np.clip(rng.random(p.shape), 1e-12, 1.0 - 1e-12)
    h = np.log(p) - np.log1p(-p) + np.log(u) - np.log1p(-u)
    return sigmoid(h / tau)


def concrete_mask_p_grad(z: np.ndarray, p: np.ndarray, tau: float) -> np.ndarray:
    """Analytic dz/dp for a sampled Concrete mask (u held fixed)."""
    p = np.asarray(p, dtype=np.float64)
    return z * (1.0 - z) / (tau * p * (1.0 - p))


def apply_concrete_mask(cloud: GaussianCloud, z: np.ndarray) -> GaussianCloud:
    """Cloud with activated opacities multiplied by (1 - z); parameters untouched."""
    out = cloud.copy()
    o = sigmoid(cloud.opacity_logits) * (1.0 - np.asarray(z, dtype=np.float64))
    out.opacity_logits = logit(np.clip(o, 1e-12, 1.0 - 1e-12))
    return out


def density_based_rates(
    cloud: GaussianCloud, k_neighbors: int = 8, lo: float = 0.2, hi: float = 0.5
) -> np.ndarray:
    """Per-Gaussian dropout rates mapped from local density.

    Density is the reciprocal of the mean distance to the k nearest neighbors;
    densities are min-max normalized and mapped affinely onto [lo, hi]
    (sparsest -> lo, densest -> hi). Degenerate clouds (all densities equal)
    get the midpoint everywhere.
    """
    n = len(cloud)
    if not 1 <= k_neighbors < n:
        raise ValueError("need cloud size > k_neighbors >= 1")
    tree = cKDTree(cloud.positions)
    dist, _ = tree.query(cloud.positions, k=k_neighbors + 1)
    density = 1.0 / dist[:, 1:].mean(axis=1)
    span = density.max() - density.min()
    if span < 1e-12 * max(1.0, density.max()):
        return np.full(n, 0.5 * (lo + hi))
    norm = (density - density.min()) / span
    return lo + norm * (hi - lo)


def opacity_decay(cloud: GaussianCloud, factor: float) -> GaussianCloud:
    """Cloud with every activated opacity multiplied by ``factor`` (persistent,
    realized as the equivalent logit update)."""
    if not 0.0 < factor <= 1.0:
        raise ValueError("factor must be in (0, 1]")
    out = cloud.copy()
    if factor == 1.0:
        return out
    o = sigmoid(cloud.opacity_logits) * factor
    out.opacity_logits = logit(o)
    return out
