"""Forward splatting: EWA projection and front-to-back alpha compositing.

The renderer is exact per pixel (no tile binning) and pure: identical inputs
produce bit-identical images. Dropout masks are realized by filtering the
splat list, which is bit-exact with rendering a physically filtered cloud.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Camera, GaussianCloud, sigmoid
from .sh import sh_basis

ALPHA_MAX = 0.99
LOWPASS = 0.3          # pixels^2, added to the projected covariance diagonal
TRANSMITTANCE_EPS = 1e-4
CULL_MARGIN_SIGMA = 3.0


@dataclass
class Splat2D:
    """A Gaussian projected to screen space."""

    mean2d: np.ndarray        # (2,) pixels
    cov2d: np.ndarray         # (2, 2) pixels^2, includes the low-pass term
    depth: float              # camera-space z
    base_opacity: float
    color: np.ndarray         # (3,)
    source_index: int


@dataclass
class Contributors:
    """Per-pixel compositing records, stored as dense arrays.

    ``alphas[p, m]`` and ``transmittances[p, m]`` refer to the m-th splat in
    depth order at flat pixel p; entries cut by early termination have zero
    weight.
    """

    source_indices: np.ndarray   # (M,) into the cloud, depth order
    colors: np.ndarray           # (M, 3)
    alphas: np.ndarray           # (P, M)
    transmittances: np.ndarray   # (P, M)
    width: int
    height: int

    def at(self, x: int, y: int):
        """Ordered (source_index, alpha, transmittance, color) list at a pixel."""
        p = y * self.width + x
        a = self.alphas[p]
        t = self.transmittances[p]
        live = (a > 0.0) & (t >= TRANSMITTANCE_EPS)
        return [
            (int(self.source_indices[m]), float(a[m]), float(t[m]), self.colors[m].copy())
            for m in np.nonzero(live)[0]
        ]


@dataclass
class RenderOutput:
    """Rendered color, accumulated alpha and expected depth maps."""

    color: np.ndarray            # (H, W, 3)
    alpha: np.ndarray            # (H, W)
    depth: np.ndarray            # (H, W), alpha-weighted, 0 where alpha == 0
    contributors: Optional[Contributors] = None


@dataclass
class _Projection:
    """Vectorized projection of a cloud, in depth-sorted order.

    Carries the intermediates the analytic backward pass needs.
    """

    source_index: np.ndarray   # (M,)
    mean2d: np.ndarray         # (M, 2)
    cov2d: np.ndarray          # (M, 2, 2)
    conic: np.ndarray          # (M, 2, 2) inverse of cov2d
    depth: np.ndarray          # (M,)
    opacity: np.ndarray        # (M,) activated opacity times opacity_scale
    color: np.ndarray          # (M, 3) clamped
    # backward intermediates
    p_cam: np.ndarray          # (M, 3)
    J: np.ndarray              # (M, 2, 3)
    sigma_world: np.ndarray    # (M, 3, 3)
    view_dir: np.ndarray       # (M, 3)
    view_dist: np.ndarray      # (M,)
    basis: np.ndarray          # (M, n_coeffs)
    raw_color: np.ndarray      # (M, 3) pre-clamp
    opacity_scale: float


def _project_cloud(cloud: GaussianCloud, cam: Camera, opacity_scale: float) -> _Projection:
    """Project every Gaussian, cull, and sort by (depth, source index)."""
    from .core import quaternions_to_rotations

    n = len(cloud)
    W = cam.R
    p_cam = cloud.positions @ W.T + cam.t
    z = p_cam[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)

    # Projected means and Jacobians (evaluated even for culled rows; filtered below).
    zs = np.where(in_depth, z, 1.0)
    mean2d = np.stack(
        [cam.fx * p_cam[:, 0] / zs + cam.cx, cam.fy * p_cam[:, 1] / zs + cam.cy], axis=1
    )
    J = np.zeros((n, 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * p_cam[:, 0] / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * p_cam[:, 1] / zs**2

    Rq = quaternions_to_rotations(cloud.rotations)
    s2 = np.exp(2.0 * cloud.log_scales)
    sigma_world = np.einsum("nij,nj,nkj->nik", Rq, s2, Rq)
    M3 = J @ W  # (n, 2, 3)
    cov2d = np.einsum("nij,njk,nlk->nil", M3, sigma_world, M3)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    # Viewport cull with a 3-sigma footprint margin.
    tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = tr + np.sqrt(np.maximum(tr * tr - det, 0.0))
    radius = CULL_MARGIN_SIGMA * np.sqrt(lam_max)
    in_view = (
        (mean2d[:, 0] >= -radius)
        & (mean2d[:, 0] <= cam.width + radius)
        & (mean2d[:, 1] >= -radius)
        & (mean2d[:, 1] <= cam.height + radius)
    )
    keep = in_depth & in_view

    idx = np.nonzero(keep)[0]
    order = np.lexsort((idx, z[idx]))
    idx = idx[order]

    delta = cloud.positions[idx] - cam.center
    dist = np.linalg.norm(delta, axis=1)
    view_dir = delta / dist[:, None]
    basis = sh_basis(view_dir, cloud.sh_degree)
    raw_color = np.einsum("nm,nmc->nc", basis, cloud.sh_coeffs[idx]) + 0.5
    color = np.clip(raw_color, 0.0, 1.0)

    cov_k = cov2d[idx]
    det_k = cov_k[:, 0, 0] * cov_k[:, 1, 1] - cov_k[:, 0, 1] ** 2
    conic = np.empty_like(cov_k)
    conic[:, 0, 0] = cov_k[:, 1, 1] / det_k
    conic[:, 1, 1] = cov_k[:, 0, 0] / det_k
    conic[:, 0, 1] = -cov_k[:, 0, 1] / det_k
    conic[:, 1, 0] = conic[:, 0, 1]

    return _Projection(
        source_index=idx,
        mean2d=mean2d[idx],
        cov2d=cov_k,
        conic=conic,
        depth=z[idx],
        opacity=sigmoid(cloud.opacity_logits[idx]) * opacity_scale,
        color=color,
        p_cam=p_cam[idx],
        J=J[idx],
        sigma_world=sigma_world[idx],
        view_dir=view_dir,
        view_dist=dist,
        basis=basis,
        raw_color=raw_color,
        opacity_scale=float(opacity_scale),
    )


def _select(proj: _Projection, keep_rows: np.ndarray) -> _Projection:
    """Restrict a projection to a subset of its (sorted) rows."""
    return _Projection(
        source_index=proj.source_index[keep_rows],
        mean2d=proj.mean2d[keep_rows],
        cov2d=proj.cov2d[keep_rows],
        conic=proj.conic[keep_rows],
        depth=proj.depth[keep_rows],
        opacity=proj.opacity[keep_rows],
        color=proj.color[keep_rows],
        p_cam=proj.p_cam[keep_rows],
        J=proj.J[keep_rows],
        sigma_world=proj.sigma_world[keep_rows],
        view_dir=proj.view_dir[keep_rows],
        view_dist=proj.view_dist[keep_rows],
        basis=proj.basis[keep_rows],
        raw_color=proj.raw_color[keep_rows],
        opacity_scale=proj.opacity_scale,
    )


def _pixel_centers(cam: Camera) -> np.ndarray:
    xs = np.arange(cam.width, dtype=np.float64) + 0.5
    ys = np.arange(cam.height, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)  # (H*W, 2)


def _falloff(proj: _Projection, pixels: np.ndarray) -> np.ndarray:
    """Gaussian falloff exp(-0.5 d^T conic d) for every (pixel, splat) pair."""
    d = pixels[:, None, :] - proj.mean2d[None, :, :]          # (P, M, 2)
    u = np.einsum("pmi,mij->pmj", d, proj.conic)
    power = -0.5 * np.einsum("pmi,pmi->pm", u, d)
    return np.exp(power)


def _composite_arrays(alpha: np.ndarray, colors: np.ndarray, depths: np.ndarray):
    """Front-to-back compositing of per-pixel alphas sorted by depth.

    Args:
        alpha: (..., P, M) clamped alphas in [0, ALPHA_MAX].
        colors: (M, 3) per-splat colors.
        depths: (M,) camera-space depths.

    Returns:
        (color (..., P, 3), acc_alpha (..., P), depth (..., P), T (..., P, M),
        w (..., P, M)) where T is the transmittance in front of each splat and
        w the compositing weight after early termination.
    """
    one_minus = 1.0 - alpha
    T = np.cumprod(one_minus, axis=-1)
    T = np.concatenate([np.ones(T.shape[:-1] + (1,)), T[..., :-1]], axis=-1)
    w = np.where(T >= TRANSMITTANCE_EPS, alpha * T, 0.0)
    color = w @ colors
    acc = w.sum(axis=-1)
    depth_num = w @ depths
    depth = np.where(acc > 0.0, depth_num / np.where(acc > 0.0, acc, 1.0), 0.0)
    return color, acc, depth, T, w


def render(
    cloud: GaussianCloud,
    cam: Camera,
    mask: Optional[np.ndarray] = None,
    opacity_scale: float = 1.0,
    with_contributors: bool = False,
) -> RenderOutput:
    """Render a cloud from a camera, optionally masking Gaussians.

    Args:
        cloud: scene to render.
        cam: viewpoint.
        mask: optional per-Gaussian keep flags (length == len(cloud)).
        opacity_scale: multiplier on activated opacities, in (0, 1]; realizes
            test-time dropout scaling. Applied before the alpha clamp.
        with_contributors: record per-pixel compositing lists.

    Rendering with a mask is bit-exact with rendering ``cloud.filtered(mask)``.
    """
    if not 0.0 < opacity_scale <= 1.0:
        raise ValueError("opacity_scale must be in (0, 1]")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(cloud),):
            raise ValueError("mask length must equal cloud size")

    proj = _project_cloud(cloud, cam, opacity_scale)
    if mask is not None:
        proj = _select(proj, mask[proj.source_index])

    h, w_img = cam.height, cam.width
    if len(proj.source_index) == 0:
        contributors = None
        if with_contributors:
            contributors = Contributors(
                source_indices=np.empty(0, dtype=np.int64),
                colors=np.empty((0, 3)),
                alphas=np.empty((h * w_img, 0)),
                transmittances=np.empty((h * w_img, 0)),
                width=w_img,
                height=h,
            )
        return RenderOutput(
            color=np.zeros((h, w_img, 3)),
            alpha=np.zeros((h, w_img)),
            depth=np.zeros((h, w_img)),
            contributors=contributors,
        )

    pixels = _pixel_centers(cam)
    G = _falloff(proj, pixels)
    alpha = np.clip(proj.opacity[None, :] * G, 0.0, ALPHA_MAX)
    color, acc, depth, T, _ = _composite_arrays(alpha, proj.color, proj.depth)

    contributors = None
    if with_contributors:
        contributors = Contributors(
            source_indices=proj.source_index.copy(),
            colors=proj.color.copy(),
            alphas=alpha,
            transmittances=T,
            width=w_img,
            height=h,
        )
    return RenderOutput(
        color=color.reshape(h, w_img, 3),
        alpha=acc.reshape(h, w_img),
        depth=depth.reshape(h, w_img),
        contributors=contributors,
    )


def project_gaussian(g, cam: Camera, opacity_scale: float = 1.0) -> Optional[Splat2D]:
    """Project a single Gaussian; None when culled (behind near plane, beyond
    the far plane, or footprint outside the viewport by a 3-sigma margin)."""
    cloud = GaussianCloud.from_gaussians([g], sh_degree=int(round(np.sqrt(g.sh_coeffs.shape[0]))) - 1)
    proj = _project_cloud(cloud, cam, opacity_scale)
    if len(proj.source_index) == 0:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0].copy(),
        cov2d=proj.cov2d[0].copy(),
        depth=float(proj.depth[0]),
        base_opacity=float(proj.opacity[0]),
        color=proj.color[0].copy(),
        source_index=0,
    )


def composite_pixel(splats, pixel):
    """Reference scalar compositing of a depth-sorted splat list at one pixel.

    Returns (color, accumulated alpha, expected depth, contributor list);
    contributors are (source_index, alpha, transmittance, color) tuples in
    compositing order.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    color = np.zeros(3)
    acc = 0.0
    depth_num = 0.0
    transmittance = 1.0
    contributors = []
    for s in splats:
        if transmittance < TRANSMITTANCE_EPS:
            break
        d = pixel - s.mean2d
        det = s.cov2d[0, 0] * s.cov2d[1, 1] - s.cov2d[0, 1] ** 2
        u0 = (s.cov2d[1, 1] * d[0] - s.cov2d[0, 1] * d[1]) / det
        u1 = (-s.cov2d[0, 1] * d[0] + s.cov2d[0, 0] * d[1]) / det
        a = s.base_opacity * np.exp(-0.5 * (d[0] * u0 + d[1] * u1))
        a = min(max(a, 0.0), ALPHA_MAX)
        weight = a * transmittance
        color = color + weight * s.color
        acc += weight
        depth_num += weight * s.depth
        if a > 0.0:
            contributors.append((s.source_index, a, transmittance, s.color.copy()))
        transmittance *= 1.0 - a
    depth = depth_num / acc if acc > 0.0 else 0.0
    return color, acc, depth, contributors


def visibility_mask(out: RenderOutput, threshold: float) -> np.ndarray:
    """Pixels whose accumulated alpha exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return out.alpha > threshold


def render_masked_batch(
    cloud: GaussianCloud,
    cam: Camera,
    masks: np.ndarray,
    opacity_scale: float = 1.0,
    max_elems: int = 8_000_000,
):
    """Composite many dropout masks of the same view in one vectorized pass.

    The cloud is projected once (projection does not depend on the mask) and
    dropped splats contribute zero alpha, which is mathematically identical to
    per-mask filtered renders. Used by the Monte-Carlo co-adaptation estimator.

    Args:
        masks: (K, len(cloud)) boolean keep flags.

    Returns:
        (colors (K, H, W, 3), alphas (K, H, W)).
    """
    masks = np.asarray(masks, dtype=bool)
    k_total = masks.shape[0]
    h, w_img = cam.height, cam.width
    proj = _project_cloud(cloud, cam, opacity_scale)
    m = len(proj.source_index)
    colors_out = np.zeros((k_total, h * w_img, 3))
    alphas_out = np.zeros((k_total, h * w_img))
    if m == 0:
        return colors_out.reshape(k_total, h, w_img, 3), alphas_out.reshape(k_total, h, w_img)

    pixels = _pixel_centers(cam)
    G = _falloff(proj, pixels)
    base_alpha = np.clip(proj.opacity[None, :] * G, 0.0, ALPHA_MAX)  # (P, M)
    splat_masks = masks[:, proj.source_index]                        # (K, M)

    p = pixels.shape[0]
    chunk = max(1, int(max_elems // max(1, p * m)))
    for start in range(0, k_total, chunk):
        mk = splat_masks[start : start + chunk]
        alpha = base_alpha[None, :, :] * mk[:, None, :]
        color, acc, _, _, _ = _composite_arrays(alpha, proj.color, proj.depth)
        colors_out[start : start + chunk] = color
        alphas_out[start : start + chunk] = acc
    return colors_out.reshape(k_total, h, w_img, 3), alphas_out.reshape(k_total, h, w_img)
