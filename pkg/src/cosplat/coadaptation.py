"""Co-adaptation metrics: Monte-Carlo CA score, exact enumeration oracle,
first-order analytic approximation, and the compositing-weight color variance
metric (CV).

The CA score renders a view K times under independent Bernoulli keep-masks and
averages the per-pixel sample variance (divisor K-1, unbiased) over the pixels
that stay visible (accumulated alpha above threshold) in every rendering. An
empty commonly-visible region is a first-class "undefined" outcome, never a
silent zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Camera, GaussianCloud
from .renderer import TRANSMITTANCE_EPS, render, render_masked_batch

MAX_EXACT_RAY = 20


@dataclass
class CAReport:
    """Result of one CA evaluation on a single view."""

    ca: Optional[float]          # None when the commonly visible region is empty
    defined: bool
    variance_map: np.ndarray     # (H, W) channel-averaged per-pixel variance
    common_mask: np.ndarray      # (H, W) bool, visible in all K renders
    K: int
    drop_ratio: float
    threshold: float
    seed: int

    @property
    def visible_fraction(self) -> float:
        return float(self.common_mask.mean())


def effective_drop_ratio(train_p: float) -> float:
    """Drop ratio used at CA time to compensate training-time dropout.

    A model trained without dropout is evaluated by discarding 50% of the
    Gaussians; a model trained with rate p is evaluated with 1 - (1-p)/2
    (e.g. 60% for p = 0.2) so that comparisons share a consistent scale.
    """
    if not 0.0 <= train_p < 1.0:
        raise ValueError("train_p must be in [0, 1)")
    return 1.0 - (1.0 - train_p) / 2.0


def dropout_masks(n: int, drop_ratio: float, K: int, seed: int) -> np.ndarray:
    """K independent Bernoulli keep-masks; mask k depends only on (seed, k)."""
    out = np.empty((K, n), dtype=bool)
    for k in range(K):
        rng = np.random.default_rng([seed, k])
        out[k] = rng.random(n) >= drop_ratio
    return out


def ca_score(
    cloud: GaussianCloud,
    cam: Camera,
    drop_ratio: float,
    K: int = 10,
    threshold: float = 0.8,
    seed: int = 0,
    opacity_scale: float = 1.0,
) -> CAReport:
    """Monte-Carlo co-adaptation score of one view.

    Args:
        drop_ratio: probability of discarding each Gaussian, in (0, 1).
        K: number of dropout renderings, >= 2.
        threshold: accumulated-alpha visibility threshold, default 0.8.
        opacity_scale: applied to every rendering (test-time dropout scaling
            of the evaluated model, when applicable).
    """
    if not 0.0 < drop_ratio < 1.0:
        raise ValueError("drop_ratio must be in (0, 1)")
    if K < 2:
        raise ValueError("K must be >= 2 (variance needs two samples)")
    masks = dropout_masks(len(cloud), drop_ratio, K, seed)
    colors, alphas = render_masked_batch(cloud, cam, masks, opacity_scale=opacity_scale)
    variance_map = colors.var(axis=0, ddof=1).mean(axis=-1)       # (H, W)
    common_mask = np.all(alphas > threshold, axis=0)
    defined = bool(common_mask.any())
    ca = float(variance_map[common_mask].mean()) if defined else None
    return CAReport(
        ca=ca,
        defined=defined,
        variance_map=variance_map,
        common_mask=common_mask,
        K=K,
        drop_ratio=drop_ratio,
        threshold=threshold,
        seed=seed,
    )


@dataclass
class RaySlice:
    """Front-to-back (color, opacity) pairs along a single ray.

    Colors may be scalars or RGB triples; opacities live in [0, 1).
    """

    colors: np.ndarray   # (n,) or (n, 3)
    alphas: np.ndarray   # (n,)

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.ndim != 1 or self.colors.shape[0] != self.alphas.shape[0]:
            raise ValueError("colors and alphas must share the leading length")
        if np.any(self.alphas < 0.0) or np.any(self.alphas >= 1.0):
            raise ValueError("opacities must lie in [0, 1)")

    def __len__(self) -> int:
        return self.alphas.shape[0]

    def color_matrix(self) -> np.ndarray:
        c = self.colors
        return c[:, None] if c.ndim == 1 else c


def enumerate_composites(ray: RaySlice, keep_prob: float):
    """All 2^n keep-masks of a ray: composited colors and their probabilities.

    Returns:
        (values (2^n, C), probs (2^n,)) with C the number of color channels.
    """
    n = len(ray)
    if n > MAX_EXACT_RAY:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_RAY} entries, got {n}")
    if not 0.0 < keep_prob < 1.0:
        raise ValueError("keep_prob must be in (0, 1)")
    codes = np.arange(2**n, dtype=np.uint32)
    masks = (codes[:, None] >> np.arange(n)[None, :]) & 1         # (2^n, n)
    alphas = ray.alphas[None, :] * masks
    T = np.cumprod(1.0 - alphas, axis=1)
    T = np.concatenate([np.ones((2**n, 1)), T[:, :-1]], axis=1)
    w = alphas * T
    values = w @ ray.color_matrix()
    kept = masks.sum(axis=1)
    probs = keep_prob**kept * (1.0 - keep_prob) ** (n - kept)
    return values, probs


def exact_pixel_mean(ray: RaySlice, keep_prob: float) -> np.ndarray:
    """Exact expected composite color over keep-masks, per channel."""
    values, probs = enumerate_composites(ray, keep_prob)
    return probs @ values


def exact_pixel_variance(ray: RaySlice, keep_prob: float) -> float:
    """Exact channel-averaged variance of the composite over keep-masks."""
    values, probs = enumerate_composites(ray, keep_prob)
    mean = probs @ values
    var = probs @ (values - mean) ** 2
    return float(var.mean())


def exact_pixel_fourth_moment(ray: RaySlice, keep_prob: float) -> np.ndarray:
    """Exact fourth central moment per channel (for variance standard errors)."""
    values, probs = enumerate_composites(ray, keep_prob)
    mean = probs @ values
    return probs @ (values - mean) ** 4


def first_order_ca(ray: RaySlice, p_drop: float) -> float:
    """First-order co-adaptation approximation p(1-p) * sum_i (c_i alpha_i)^2,
    channel-averaged. Exact for a single contributor; accurate for small alphas."""
    if not 0.0 < p_drop < 1.0:
        raise ValueError("p_drop must be in (0, 1)")
    ca = float(np.mean(np.sum((ray.color_matrix() * ray.alphas[:, None]) ** 2, axis=0)))
    return p_drop * (1.0 - p_drop) * ca


def cv_score(cloud: GaussianCloud, cam: Camera, opacity_scale: float = 1.0):
    """Compositing-weight-normalized per-pixel color variance.

    For each pixel with total weight > 0, Var(c) = sum w c^2 / sum w -
    (sum w c / sum w)^2 per channel, channel-averaged; the global CV averages
    over covered pixels.

    Returns:
        (cv, variance map (H, W), covered mask (H, W)).
    """
    out = render(cloud, cam, opacity_scale=opacity_scale, with_contributors=True)
    contrib = out.contributors
    a = contrib.alphas
    t = contrib.transmittances
    w = np.where(t >= TRANSMITTANCE_EPS, a * t, 0.0)              # (P, M)
    colors = contrib.colors                                        # (M, 3)
    sw = w.sum(axis=1)
    covered = sw > 0.0
    denom = np.where(covered, sw, 1.0)
    m1 = (w @ colors) / denom[:, None]
    m2 = (w @ colors**2) / denom[:, None]
    var = np.where(covered[:, None], m2 - m1**2, 0.0).mean(axis=1)
    cv = float(var[covered].mean()) if covered.any() else 0.0
    h, width = cam.height, cam.width
    return cv, var.reshape(h, width), covered.reshape(h, width)
