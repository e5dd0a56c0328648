"""Scene representation: Gaussians, clouds, cameras and parameter activations.

Opacity is stored as a logit and scale as a log so that gradient-based
optimization stays unconstrained; activations are applied at render time.
Quaternions are renormalized after every optimizer step, not inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# RGB colors are plain float arrays of shape (3,), kept in [0, 1] at render output.
ColorRGB = np.ndarray

QUAT_NORM_TOL = 1e-6


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    """Inverse of :func:`sigmoid` on (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit-norm copies of quaternions (..., 4) in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Convert quaternions (..., 4) to rotation matrices (..., 3, 3).

    Inputs are normalized internally so the map is well defined (and
    differentiable) for any nonzero quaternion.
    """
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Gaussian:
    """A single anisotropic 3D Gaussian primitive.

    Attributes:
        position: world-space center, shape (3,).
        rotation: unit quaternion (w, x, y, z), shape (4,).
        log_scale: log of per-axis standard deviation in world units, shape (3,).
        opacity_logit: pre-sigmoid opacity.
        sh_coeffs: spherical-harmonics color coefficients, shape ((L+1)^2, 3).
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if self.sh_coeffs.ndim != 2 or self.sh_coeffs.shape[1] != 3:
            raise ValueError("sh_coeffs must have shape (n_coeffs, 3)")


def activate_opacity(g: Gaussian) -> float:
    """Activated opacity sigma(opacity_logit), strictly inside (0, 1).

    Clamped one ULP inside the open interval so extreme logits cannot round
    to exactly 0 or 1 in float64.
    """
    val = float(sigmoid(g.opacity_logit))
    return min(max(val, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))


def activate_scale(g: Gaussian) -> np.ndarray:
    """Per-axis standard deviations exp(log_scale), strictly positive."""
    return np.exp(g.log_scale)


def covariance_world(g: Gaussian) -> np.ndarray:
    """World-space covariance R diag(s^2) R^T of a Gaussian.

    Symmetric positive definite; eigenvalues equal the squared activated scales.
    """
    R = quaternions_to_rotations(g.rotation)
    s2 = np.exp(2.0 * g.log_scale)
    return (R * s2[None, :]) @ R.T


@dataclass
class GaussianCloud:
    """An ordered, array-backed collection of Gaussians sharing one SH degree.

    The list order is stable: indices identify Gaussians across dropout masks.
    Stored as structure-of-arrays for vectorized rendering; ``__getitem__``
    materializes individual :class:`Gaussian` views on demand.
    """

    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray      # (N, (L+1)^2, 3)
    sh_degree: int

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float64)
        if not 0 <= self.sh_degree <= 3:
            raise ValueError(f"sh_degree must be in 0..3, got {self.sh_degree}")
        n_coeffs = (self.sh_degree + 1) ** 2
        if self.sh_coeffs.shape[1:] != (n_coeffs, 3):
            raise ValueError(
                f"sh_coeffs shape {self.sh_coeffs.shape} inconsistent with degree {self.sh_degree}"
            )
        n = len(self.positions)
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "sh_coeffs": (n, n_coeffs, 3),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int) -> "GaussianCloud":
        gaussians = list(gaussians)
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
            sh_degree=sh_degree,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            sh_degree=self.sh_degree,
        )

    def filtered(self, keep: np.ndarray) -> "GaussianCloud":
        """Cloud restricted to Gaussians where ``keep`` is true; order preserved."""
        keep = np.asarray(keep, dtype=bool)
        return GaussianCloud(
            positions=self.positions[keep],
            rotations=self.rotations[keep],
            log_scales=self.log_scales[keep],
            opacity_logits=self.opacity_logits[keep],
            sh_coeffs=self.sh_coeffs[keep],
            sh_degree=self.sh_degree,
        )

    def activated_opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def activated_scales(self) -> np.ndarray:
        return np.exp(self.log_scales)


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera pose.

    The camera looks along +z in its own frame (x right, y down). Pixel (i, j)
    samples the image plane at (i + 0.5, j + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (3, 4): [R | t]
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(3, 4)
        if self.near <= 0:
            raise ValueError("near must be positive")
        if self.far <= self.near:
            raise ValueError("far must exceed near")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @classmethod
    def look_at(
        cls,
        position: np.ndarray,
        target: np.ndarray,
        up: np.ndarray = (0.0, 1.0, 0.0),
        *,
        width: int = 32,
        height: int = 32,
        fov_deg: float = 50.0,
        near: float = 0.05,
        far: float = 100.0,
    ) -> "Camera":
        """Camera at ``position`` looking toward ``target``."""
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - position
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ValueError("camera position coincides with target")
        z = forward / norm
        x = np.cross(up, z)
        xn = np.linalg.norm(x)
        if xn < 1e-12:
            # up parallel to view direction; pick an arbitrary orthogonal axis
            x = np.cross(np.array([1.0, 0.0, 0.0]), z)
            xn = np.linalg.norm(x)
        x = x / xn
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        t = -R @ position
        fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(
            fx=fx,
            fy=fx,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            world_to_camera=np.concatenate([R, t[:, None]], axis=1),
            near=near,
            far=far,
        )
