"""Real spherical-harmonics color evaluation up to degree 3.

Colors are decoded as clamp(sum_lm c_lm * Y_lm(dir) + 0.5, 0, 1) per channel;
the +0.5 offset keeps an all-zero coefficient set mid-gray. Basis gradients
with respect to the (unnormalized) direction are provided for the analytic
renderer backward pass.
"""

from __future__ import annotations

import numpy as np

MAX_DEGREE = 3

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_coeffs(degree: int) -> int:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in 0..{MAX_DEGREE}, got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    Args:
        dirs: array (..., 3) of unit vectors.
        degree: maximum SH degree, 0..3.

    Returns:
        Array (..., (degree+1)^2) of basis values.
    """
    m = n_coeffs(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (m,), dtype=np.float64)
    out[..., 0] = _C0
    if degree >= 1:
        out[..., 1] = -_C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[1] * y * z
        out[..., 6] = _C2[2] * (2 * zz - xx - yy)
        out[..., 7] = _C2[3] * x * z
        out[..., 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = _C3[0] * y * (3 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = _C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = _C3[5] * z * (xx - yy)
        out[..., 15] = _C3[6] * x * (xx - yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis function with respect to (x, y, z).

    Returns an array (..., (degree+1)^2, 3). The chain through direction
    normalization is the caller's responsibility.
    """
    m = n_coeffs(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (m, 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = -_C1
        g[..., 2, 2] = _C1
        g[..., 3, 0] = -_C1
    if degree >= 2:
        g[..., 4, 0] = _C2[0] * y
        g[..., 4, 1] = _C2[0] * x
        g[..., 5, 1] = _C2[1] * z
        g[..., 5, 2] = _C2[1] * y
        g[..., 6, 0] = _C2[2] * (-2 * x)
        g[..., 6, 1] = _C2[2] * (-2 * y)
        g[..., 6, 2] = _C2[2] * (4 * z)
        g[..., 7, 0] = _C2[3] * z
        g[..., 7, 2] = _C2[3] * x
        g[..., 8, 0] = _C2[4] * (2 * x)
        g[..., 8, 1] = _C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = _C3[0] * (6 * x * y)
        g[..., 9, 1] = _C3[0] * (3 * xx - 3 * yy)
        g[..., 9, 2] = zero
        g[..., 10, 0] = _C3[1] * y * z
        g[..., 10, 1] = _C3[1] * x * z
        g[..., 10, 2] = _C3[1] * x * y
        g[..., 11, 0] = _C3[2] * (-2 * x * y)
        g[..., 11, 1] = _C3[2] * (4 * zz - xx - 3 * yy)
        g[..., 11, 2] = _C3[2] * (8 * y * z)
        g[..., 12, 0] = _C3[3] * (-6 * x * z)
        g[..., 12, 1] = _C3[3] * (-6 * y * z)
        g[..., 12, 2] = _C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[..., 13, 0] = _C3[4] * (4 * zz - 3 * xx - yy)
        g[..., 13, 1] = _C3[4] * (-2 * x * y)
        g[..., 13, 2] = _C3[4] * (8 * x * z)
        g[..., 14, 0] = _C3[5] * (2 * x * z)
        g[..., 14, 1] = _C3[5] * (-2 * y * z)
        g[..., 14, 2] = _C3[5] * (xx - yy)
        g[..., 15, 0] = _C3[6] * (3 * xx - yy)
        g[..., 15, 1] = _C3[6] * (-2 * x * y)
        g[..., 15, 2] = zero
    return g


def sh_to_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Decode an RGB color from SH coefficients along a unit view direction.

    Args:
        sh_coeffs: array ((L+1)^2, 3) for some L in 0..3.
        view_dir: unit 3-vector (normalized within 1e-6).

    Returns:
        Color in [0, 1]^3.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    degree = int(round(np.sqrt(sh_coeffs.shape[0]))) - 1
    if n_coeffs(degree) != sh_coeffs.shape[0]:
        raise ValueError(f"invalid SH coefficient count {sh_coeffs.shape[0]}")
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view_dir must be normalized")
    basis = sh_basis(view_dir, degree)
    return np.clip(basis @ sh_coeffs + 0.5, 0.0, 1.0)
