"""Desk-scale training loop: L1 + D-SSIM photometric loss, adaptive-moment
optimizer with per-group learning rates, round-robin view scheduling, dropout
and noise hooks, and periodic loss/PSNR/CA logging.

Deterministic given the config seed: identical configs produce bit-identical
logs. Parameters of Gaussians dropped in an iteration are untouched by that
iteration's update (the optimizer skips their rows entirely, moments included).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .coadaptation import ca_score, effective_drop_ratio
from .core import Camera, GaussianCloud, normalize_quaternions
from .gradients import ParamGrads, render_backward
from .metrics import psnr, ssim_with_grad
from .regularizers import (
    NoiseSpec,
    apply_noise,
    nearest_neighbor_distances,
    sample_dropout_mask,
    test_time_opacity_scale,
)
from .renderer import render

NN_REFRESH_INTERVAL = 100  # iterations between nearest-neighbor distance refreshes


class DivergenceError(RuntimeError):
    """Raised when the training loss turns non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite training loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    iterations: int = 500
    lr_position: float = 2e-3
    lr_rotation: float = 2e-3
    lr_log_scale: float = 5e-3
    lr_opacity_logit: float = 5e-2
    lr_sh: float = 1e-2
    lambda_ssim: float = 0.2
    dropout_p: float = 0.0
    noise_target: str = "opacity"
    noise_sigma: float = 0.0
    decay_factor: float = 1.0
    ca_interval: int = 200
    ca_k: int = 10
    ca_threshold: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must be in [0, 1]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class LogRecord:
    iteration: int
    train_loss: float
    train_psnr: float
    test_psnr: float
    train_ca: Optional[float]
    test_ca: Optional[float]
    gaussian_count: int


@dataclass
class TrainRun:
    cloud: GaussianCloud
    config: TrainConfig
    log: List[LogRecord] = field(default_factory=list)


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float):
    """(1 - lambda) * mean-L1 + lambda * (1 - SSIM)/2 with its pixel gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("images must share a shape")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    grad = (1.0 - lambda_ssim) * grad
    if lambda_ssim > 0.0:
        s, ds = ssim_with_grad(rendered, target)
        loss += lambda_ssim * (1.0 - s) / 2.0
        grad += lambda_ssim * (-0.5) * ds
    return loss, grad


class _Adam:
    """Adaptive-moment optimizer over the cloud's parameter groups.

    Rows masked out in a step are skipped entirely: no moment decay, no
    update, and a per-row timestep for bias correction.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, cloud: GaussianCloud, config: TrainConfig):
        self.lrs = {
            "positions": config.lr_position,
            "rotations": config.lr_rotation,
            "log_scales": config.lr_log_scale,
            "opacity_logits": config.lr_opacity_logit,
            "sh_coeffs": config.lr_sh,
        }
        self.m = {k: np.zeros_like(getattr(cloud, k)) for k in self.lrs}
        self.v = {k: np.zeros_like(getattr(cloud, k)) for k in self.lrs}
        self.t = np.zeros(len(cloud), dtype=np.int64)

    def step(self, cloud: GaussianCloud, grads: ParamGrads, rows: np.ndarray):
        self.t[rows] += 1
        t = self.t[rows]
        grad_by = {
            "positions": grads.position,
            "rotations": grads.rotation,
            "log_scales": grads.log_scale,
            "opacity_logits": grads.opacity_logit,
            "sh_coeffs": grads.sh_coeffs,
        }
        for name, lr in self.lrs.items():
            g = grad_by[name][rows]
            m = self.m[name]
            v = self.v[name]
            m[rows] = self.BETA1 * m[rows] + (1.0 - self.BETA1) * g
            v[rows] = self.BETA2 * v[rows] + (1.0 - self.BETA2) * g * g
            extra = (1,) * (m.ndim - 1)
            bc1 = 1.0 - self.BETA1 ** t.reshape((-1,) + extra)
            bc2 = 1.0 - self.BETA2 ** t.reshape((-1,) + extra)
            update = lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.EPS)
            param = getattr(cloud, name)
            param[rows] = param[rows] - update
        cloud.rotations[rows] = normalize_quaternions(cloud.rotations[rows])


def _mean_ca(cloud, cams, drop_ratio, k, threshold, seed, opacity_scale) -> Optional[float]:
    vals = []
    for i, cam in enumerate(cams):
        rep = ca_score(
            cloud, cam, drop_ratio, K=k, threshold=threshold, seed=seed + i,
            opacity_scale=opacity_scale,
        )
        if rep.defined:
            vals.append(rep.ca)
    return float(np.mean(vals)) if vals else None


def _mean_psnr(cloud, views, opacity_scale) -> float:
    vals = [psnr(render(cloud, cam, opacity_scale=opacity_scale).color, img) for cam, img in views]
    return float(np.mean(vals))


def train(
    init_cloud: GaussianCloud,
    train_views: Sequence[Tuple[Camera, np.ndarray]],
    test_views: Sequence[Tuple[Camera, np.ndarray]],
    config: TrainConfig,
) -> TrainRun:
    """Fit a cloud to the training views; see the module docstring for the
    per-iteration recipe.

    Raises:
        DivergenceError: when the loss turns NaN/Inf (includes the iteration).
    """
    if len(train_views) < 1:
        raise ValueError("need at least one training view")
    cloud = init_cloud.copy()
    optimizer = _Adam(cloud, config)
    n = len(cloud)
    eval_scale = test_time_opacity_scale(config.dropout_p)
    ca_drop = effective_drop_ratio(config.dropout_p)
    noise = NoiseSpec(config.noise_target, config.noise_sigma) if config.noise_sigma > 0 else None
    nn_dist = None

    run = TrainRun(cloud=cloud, config=config)

    def log_point(iteration: int, loss: float):
        run.log.append(
            LogRecord(
                iteration=iteration,
                train_loss=loss,
                train_psnr=_mean_psnr(cloud, train_views, eval_scale),
                test_psnr=_mean_psnr(cloud, test_views, eval_scale) if test_views else float("nan"),
                train_ca=_mean_ca(
                    cloud, [c for c, _ in train_views], ca_drop, config.ca_k,
                    config.ca_threshold, config.seed, eval_scale,
                ),
                test_ca=_mean_ca(
                    cloud, [c for c, _ in test_views], ca_drop, config.ca_k,
                    config.ca_threshold, config.seed, eval_scale,
                ) if test_views else None,
                gaussian_count=n,
            )
        )

    # Iteration-0 snapshot (pre-training dynamics baseline).
    first_loss, _ = photometric_loss(
        render(cloud, train_views[0][0], opacity_scale=eval_scale).color,
        train_views[0][1],
        config.lambda_ssim,
    )
    log_point(0, first_loss)

    for it in range(1, config.iterations + 1):
        cam, target = train_views[(it - 1) % len(train_views)]

        rows = np.arange(n)
        mask = None
        if config.dropout_p > 0.0:
            mask = sample_dropout_mask(n, config.dropout_p, config.seed, it).keep
            rows = np.nonzero(mask)[0]

        perturbed = None
        render_cloud = cloud
        if noise is not None:
            if noise.target == "position" and (nn_dist is None or it % NN_REFRESH_INTERVAL == 1):
                nn_dist = nearest_neighbor_distances(cloud)
            perturbed = apply_noise(cloud, noise, config.seed, it, nn_distances=nn_dist)
            render_cloud = perturbed.cloud

        out = render(render_cloud, cam, mask=mask)
        loss, dL_dimg = photometric_loss(out.color, target, config.lambda_ssim)
        if not np.isfinite(loss):
            raise DivergenceError(it)

        grads = render_backward(render_cloud, cam, mask, 1.0, dL_dimg)
        if perturbed is not None:
            grads = perturbed.chain(grads)
        if len(rows):
            optimizer.step(cloud, grads, rows)
        for param in (cloud.positions, cloud.rotations, cloud.log_scales,
                      cloud.opacity_logits, cloud.sh_coeffs):
            if not np.all(np.isfinite(param)):
                raise DivergenceError(it)

        if config.decay_factor < 1.0:
            from .regularizers import opacity_decay

            cloud.opacity_logits = opacity_decay(cloud, config.decay_factor).opacity_logits

        if it % config.ca_interval == 0 or it == config.iterations:
            log_point(it, loss)

    run.cloud = cloud
    return run
