"""Synthetic ground-truth scenes, camera rigs, view splits, and persistence.

Ground truth is itself a Gaussian cloud, so the true appearance of every view
is known exactly. Three scene families are provided:

- ``textured-plane-stack``: a few parallel planes of Gaussians with smoothly
  varying color, a forward-facing stand-in for layered real scenes.
- ``random-blob-field``: Gaussians scattered in a box, sized so a 500-blob
  field covers most of the viewport.
- ``checker-box``: a regular grid of alternating-color Gaussians.

Persistence: clouds as a small versioned binary (magic ``CSPL``, little-endian
float64 records), images as PFM (linear float32) or PPM (8-bit), and a plain
text manifest listing each view's image path and camera floats.

Everything is deterministic under the spec/rig seeds.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .core import Camera, GaussianCloud, logit
from .renderer import render
from .sh import n_coeffs

SCENE_KINDS = ("textured-plane-stack", "random-blob-field", "checker-box")
PALETTES = ("continuous", "grayscale-targets")
RIG_KINDS = ("arc", "ring")

CLOUD_MAGIC = b"CSPL"
CLOUD_VERSION = 1


class CloudFormatError(ValueError):
    """Raised when a cloud file has a bad magic, version, or length."""


@dataclass
class SceneSpec:
    kind: str
    gaussian_count: int = 100
    extent: float = 2.0
    palette: str = "continuous"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if self.palette not in PALETTES:
            raise ValueError(f"unknown palette {self.palette!r}; expected one of {PALETTES}")
        if self.gaussian_count < 1:
            raise ValueError("gaussian_count must be >= 1")
        if self.extent <= 0:
            raise ValueError("extent must be positive")


@dataclass
class CameraRig:
    kind: str
    count: int = 12
    radius: float = 4.0
    jitter_seed: int = 0
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if self.kind not in RIG_KINDS:
            raise ValueError(f"unknown rig kind {self.kind!r}; expected one of {RIG_KINDS}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def _palette_colors(rng: np.random.Generator, positions: np.ndarray, extent: float,
                    palette: str) -> np.ndarray:
    """Base RGB colors in [0, 1] for each Gaussian."""
    n = len(positions)
    if palette == "grayscale-targets":
        # Distinct saturated colors whose blend targets are gray: each
        # Gaussian gets a random hue-like channel mix that averages to ~0.5.
        colors = rng.random((n, 3))
        return colors
    # Continuous: smooth spatial gradient across the extent.
    t = (positions / (2.0 * extent)) + 0.5
    colors = np.stack(
        [
            0.25 + 0.7 * t[:, 0],
            0.25 + 0.7 * t[:, 1],
            0.6 - 0.4 * t[:, 0] + 0.3 * t[:, 2],
        ],
        axis=1,
    )
    return np.clip(colors, 0.02, 0.98)


def _cloud_from_parts(positions, scales, opacities, colors, sh_degree=0) -> GaussianCloud:
    n = len(positions)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, n_coeffs(sh_degree), 3))
    sh[:, 0, :] = (np.asarray(colors) - 0.5) / 0.28209479177387814
    return GaussianCloud(
        positions=np.asarray(positions, dtype=np.float64),
        rotations=rotations,
        log_scales=np.log(np.asarray(scales, dtype=np.float64)),
        opacity_logits=logit(np.asarray(opacities, dtype=np.float64)),
        sh_coeffs=sh,
        sh_degree=sh_degree,
    )


def make_scene(spec: SceneSpec) -> GaussianCloud:
    """Build a deterministic ground-truth cloud within ±extent of the origin."""
    rng = np.random.default_rng([spec.seed, SCENE_KINDS.index(spec.kind)])
    n = spec.gaussian_count
    e = spec.extent

    if spec.kind == "textured-plane-stack":
        n_planes = min(3, n)
        depths = np.linspace(-0.4 * e, 0.4 * e, n_planes)
        plane = rng.integers(0, n_planes, size=n)
        positions = np.empty((n, 3))
        positions[:, 0] = rng.uniform(-0.9 * e, 0.9 * e, size=n)
        positions[:, 1] = rng.uniform(-0.9 * e, 0.9 * e, size=n)
        positions[:, 2] = depths[plane] + rng.normal(0.0, 0.02 * e, size=n)
        scales = rng.uniform(0.10 * e, 0.22 * e, size=(n, 3))
        scales[:, 2] *= 0.25  # thin along the stack axis
        opacities = rng.uniform(0.4, 0.9, size=n)
    elif spec.kind == "random-blob-field":
        positions = rng.uniform(-0.9 * e, 0.9 * e, size=(n, 3))
        # Sized so ~500 blobs cover most of a radius-2e viewport.
        base = 1.6 * e / max(n, 8) ** (1.0 / 3.0)
        scales = rng.uniform(0.6 * base, 1.4 * base, size=(n, 3))
        opacities = rng.uniform(0.5, 0.95, size=n)
    else:  # checker-box
        side = max(1, round(n ** (1.0 / 3.0)))
        grid = np.stack(
            np.meshgrid(*[np.linspace(-0.8 * e, 0.8 * e, side)] * 3, indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        reps = -(-n // len(grid))
        positions = np.tile(grid, (reps, 1))[:n]
        positions = positions + rng.normal(0.0, 0.01 * e, size=positions.shape)
        cell = 1.6 * e / max(side, 1)
        scales = np.full((n, 3), 0.35 * cell)
        opacities = np.full(n, 0.8)

    colors = _palette_colors(rng, positions, e, spec.palette)
    if spec.kind == "checker-box":
        parity = (
            np.floor((positions + 0.8 * spec.extent) / (1.6 * spec.extent / 2)).sum(axis=1) % 2
        )
        colors = np.where(parity[:, None] > 0.5, np.array([0.9, 0.2, 0.2]), np.array([0.2, 0.2, 0.9]))
    return _cloud_from_parts(positions, scales, opacities, colors)


def make_rig(rig: CameraRig) -> List[Camera]:
    """Cameras on an arc (forward-facing, span ≤ 60°) or a full ring."""
    rng = np.random.default_rng([rig.jitter_seed, RIG_KINDS.index(rig.kind)])
    target = np.zeros(3)
    cams = []
    if rig.kind == "arc":
        span = math.radians(60.0)
        angles = (
            np.zeros(1)
            if rig.count == 1
            else np.linspace(-span / 2.0, span / 2.0, rig.count)
        )
        for a in angles:
            a = a + rng.normal(0.0, 0.004)
            eye = np.array(
                [rig.radius * math.sin(a), 0.15 * rig.radius * math.sin(2 * a), -rig.radius * math.cos(a)]
            )
            cams.append(Camera.look_at(eye, target, width=rig.width, height=rig.height))
    else:
        angles = np.linspace(0.0, 2.0 * math.pi, rig.count, endpoint=False)
        for a in angles:
            eye = np.array(
                [rig.radius * math.sin(a), 0.35 * rig.radius, -rig.radius * math.cos(a)]
            )
            cams.append(Camera.look_at(eye, target, width=rig.width, height=rig.height))
    return cams


def render_dataset(gt: GaussianCloud, cams: Sequence[Camera]) -> List[np.ndarray]:
    """Noiseless ground-truth renders, one image per camera."""
    return [render(gt, cam).color for cam in cams]


def split_views(cams: Sequence[Camera], n_train: int, protocol: str = "every-kth"):
    """Disjoint, exhaustive (train, test) index lists."""
    count = len(cams)
    if not 1 <= n_train < count:
        raise ValueError(f"n_train must be in [1, {count - 1}], got {n_train}")
    if protocol == "every-kth":
        stride = count // n_train
        train = [i * stride for i in range(n_train)]
    elif protocol == "first-n":
        train = list(range(n_train))
    else:
        raise ValueError(f"unknown split protocol {protocol!r}")
    train_set = set(train)
    test = [i for i in range(count) if i not in train_set]
    return train, test


def perturb_cloud(gt: GaussianCloud, position_sigma: float, color_sigma: float,
                  seed: int) -> GaussianCloud:
    """Jittered copy of a ground-truth cloud (perturbed-GT initialization)."""
    rng = np.random.default_rng([seed, 7])
    out = gt.copy()
    out.positions = out.positions + rng.normal(0.0, position_sigma, out.positions.shape)
    out.sh_coeffs = out.sh_coeffs + rng.normal(0.0, color_sigma, out.sh_coeffs.shape)
    return out


def random_init_cloud(count: int, extent: float, seed: int, sh_degree: int = 0) -> GaussianCloud:
    """Random cloud in the scene bounding box (vanilla training initialization)."""
    rng = np.random.default_rng([seed, 11])
    positions = rng.uniform(-0.9 * extent, 0.9 * extent, size=(count, 3))
    base = 1.4 * extent / max(count, 8) ** (1.0 / 3.0)
    scales = np.full((count, 3), base)
    opacities = np.full(count, 0.5)
    colors = rng.uniform(0.2, 0.8, size=(count, 3))
    cloud = _cloud_from_parts(positions, scales, opacities, colors, sh_degree=0)
    if sh_degree > 0:
        sh = np.zeros((count, n_coeffs(sh_degree), 3))
        sh[:, 0, :] = cloud.sh_coeffs[:, 0, :]
        cloud.sh_coeffs = sh
        cloud.sh_degree = sh_degree
    return cloud


# ---------------------------------------------------------------------------
# Cloud persistence: "CSPL" binary.
# ---------------------------------------------------------------------------

def _record_floats(sh_degree: int) -> int:
    return 3 + 4 + 3 + 1 + 3 * n_coeffs(sh_degree)


def save_cloud(path, cloud: GaussianCloud) -> None:
    """Write the cloud to a CSPL file (bit-exact round trip)."""
    path = Path(path)
    header = CLOUD_MAGIC + struct.pack("<III", CLOUD_VERSION, cloud.sh_degree, len(cloud))
    n = len(cloud)
    rec = np.concatenate(
        [
            cloud.positions.reshape(n, 3),
            cloud.rotations.reshape(n, 4),
            cloud.log_scales.reshape(n, 3),
            cloud.opacity_logits.reshape(n, 1),
            cloud.sh_coeffs.reshape(n, -1),
        ],
        axis=1,
    ).astype("<f8")
    path.write_bytes(header + rec.tobytes())


def load_cloud(path) -> GaussianCloud:
    """Read a CSPL file; raises :class:`CloudFormatError` on malformed input."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CLOUD_MAGIC:
        raise CloudFormatError(f"{path}: not a CSPL cloud file (bad magic)")
    version, sh_degree, count = struct.unpack("<III", data[4:16])
    if version != CLOUD_VERSION:
        raise CloudFormatError(f"{path}: unsupported format version {version}")
    width = _record_floats(sh_degree)
    expected = 16 + count * width * 8
    if len(data) != expected:
        raise CloudFormatError(
            f"{path}: expected {expected} bytes for {count} Gaussians, got {len(data)}"
        )
    rec = np.frombuffer(data[16:], dtype="<f8").reshape(count, width).astype(np.float64)
    m = n_coeffs(sh_degree)
    return GaussianCloud(
        positions=rec[:, 0:3].copy(),
        rotations=rec[:, 3:7].copy(),
        log_scales=rec[:, 7:10].copy(),
        opacity_logits=rec[:, 10].copy(),
        sh_coeffs=rec[:, 11:].reshape(count, m, 3).copy(),
        sh_degree=sh_degree,
    )


# ---------------------------------------------------------------------------
# Image persistence: PFM (float32, linear) and PPM (8-bit).
# ---------------------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """Write an (H, W) or (H, W, 3) image; format chosen by extension."""
    path = Path(path)
    image = np.asarray(image)
    if path.suffix.lower() == ".pfm":
        _save_pfm(path, image)
    elif path.suffix.lower() == ".ppm":
        _save_ppm(path, image)
    else:
        raise ValueError(f"unsupported image extension {path.suffix!r} (use .pfm or .ppm)")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return _load_pfm(path)
    if path.suffix.lower() == ".ppm":
        return _load_ppm(path)
    raise ValueError(f"unsupported image extension {path.suffix!r} (use .pfm or .ppm)")


def _save_pfm(path: Path, image: np.ndarray) -> None:
    color = image.ndim == 3
    if color and image.shape[2] != 3:
        raise ValueError("PFM color images must have 3 channels")
    header = ("PF" if color else "Pf") + f"\n{image.shape[1]} {image.shape[0]}\n-1.0\n"
    # PFM scanlines run bottom-to-top; scale -1.0 marks little-endian.
    body = np.flipud(image).astype("<f4").tobytes()
    path.write_bytes(header.encode("ascii") + body)


def _load_pfm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise ValueError(f"{path}: not a PFM file")
    color = parts[0] == b"PF"
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * (3 if color else 1)
    pixels = np.frombuffer(parts[3][: n * 4], dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if color else (h, w)
    return np.flipud(pixels.reshape(shape)).copy()


def _save_ppm(path: Path, image: np.ndarray) -> None:
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n"
    path.write_bytes(header.encode("ascii") + quantized.tobytes())


def _load_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Dataset manifest: one line per view — image path then camera floats
# (fx fy cx cy w h, the 12 world-to-camera entries row-major, near, far).
# ---------------------------------------------------------------------------

def save_manifest(path, entries: Sequence[Tuple[str, Camera]]) -> None:
    lines = []
    for image_path, cam in entries:
        floats = [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height]
        floats += list(np.asarray(cam.world_to_camera).reshape(-1))
        floats += [cam.near, cam.far]
        lines.append(image_path + " " + " ".join(repr(float(v)) for v in floats))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> List[Tuple[str, Camera]]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 1 + 20:
            raise ValueError(f"{path}: manifest line has {len(fields)} fields, expected 21")
        vals = [float(v) for v in fields[1:]]
        cam = Camera(
            fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
            width=int(vals[4]), height=int(vals[5]),
            world_to_camera=np.array(vals[6:18]).reshape(3, 4),
            near=vals[18], far=vals[19],
        )
        entries.append((fields[0], cam))
    return entries
