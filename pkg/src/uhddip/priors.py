"""Guidance priors computed from the degraded input image.

Gradient prior: a Canny edge map. Normal prior: either a surface-normal map
produced by an external estimator and loaded from disk, or a fallback that
treats luminance as a height field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, IngestError, UsageError
from .imageio import luminance, read_image
from .serialize import load_tensor

logger = logging.getLogger(__name__)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass
class PriorPair:
    normal: np.ndarray  # H x W x 3, (n + 1) / 2
    gradient: np.ndarray  # H x W x 1


def sobel(lum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives along x (columns) and y (rows), scaled to unit step per pixel."""
    gx = ndimage.correlate(lum, SOBEL_X, mode="nearest") / 8.0
    gy = ndimage.correlate(lum, SOBEL_Y, mode="nearest") / 8.0
    return gx, gy


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels whose magnitude is a maximum along the gradient direction,
    comparing against bilinearly interpolated neighbours one pixel away."""
    h, w = mag.shape
    safe = np.where(mag > 0, mag, 1.0)
    uy, ux = gy / safe, gx / safe
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fwd = ndimage.map_coordinates(mag, [yy + uy, xx + ux], order=1, mode="constant")
    bwd = ndimage.map_coordinates(mag, [yy - uy, xx - ux], order=1, mode="constant")
    keep = (mag > 0) & (mag >= fwd) & (mag > bwd)
    return np.where(keep, mag, 0.0)


def canny(img: np.ndarray, sigma: float = 1.4, low_ratio: float = 0.1, high_ratio: float = 0.2,
          soft: bool = False) -> np.ndarray:
    """Canny edge map, H x W x 1.

    Thresholds are fractions of the maximum suppressed gradient magnitude, so
    the map does not change when the image is scaled by a positive constant.
    With ``soft=True`` surviving edge pixels carry their normalized magnitude
    instead of 1.
    """
    img = np.asarray(img)
    if img.size == 0:
        raise UsageError("canny: empty image")
    if sigma <= 0 or not (0 < low_ratio < high_ratio <= 1):
        raise ConfigError("canny: need sigma > 0 and 0 < low_ratio < high_ratio <= 1")
    lum = ndimage.gaussian_filter(luminance(img), sigma, mode="nearest")
    gx, gy = sobel(lum)
    mag = np.hypot(gx, gy)
    nms = _non_max_suppression(mag, gx, gy)
    peak = nms.max()
    # flat-image noise floor relative to the [0, 1] intensity range
    if peak <= 1e-8:
        return np.zeros(img.shape[:2] + (1,), dtype=np.float32)
    strong = nms >= high_ratio * peak
    weak = nms >= low_ratio * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    has_strong = np.zeros(count + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    edges = has_strong[labels]
    out = np.where(edges, nms / peak, 0.0) if soft else edges.astype(np.float64)
    return out.astype(np.float32)[:, :, None]


def encode_normals(n: np.ndarray) -> np.ndarray:
    return ((n + 1.0) * 0.5).astype(np.float32)


def decode_normals(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * 2.0 - 1.0


def normal_from_heightfield(img: np.ndarray) -> np.ndarray:
    """Per-pixel normal of the luminance height field, encoded as (n + 1) / 2."""
    img = np.asarray(img)
    if img.size == 0:
        raise UsageError("normal_from_heightfield: empty image")
    gx, gy = sobel(luminance(img))
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return encode_normals(n)


def renormalize(encoded: np.ndarray, tol: float = 0.1, source: str = "normal map") -> np.ndarray:
    n = decode_normals(encoded)
    norms = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > tol):
        logger.warning("%s: vectors deviate from unit length by more than %.2f; renormalizing",
                       source, tol)
    n = n / np.maximum(norms, 1e-12)
    return encode_normals(n)


def load_normal_map(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Load an externally produced normal map (PNG or flat tensor file)."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"normal map {path} does not exist")
    if path.suffix == ".png":
        enc = read_image(path, channels=3)
    else:
        arr = load_tensor(path)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise IngestError(f"{path}: expected H x W x 3 tensor, got {arr.shape}")
        enc = arr
    if shape is not None and enc.shape[:2] != tuple(shape):
        raise IngestError(f"{path}: normal map is {enc.shape[:2]}, image is {tuple(shape)}")
    return renormalize(enc, source=str(path))


def compute_priors(img: np.ndarray, normal_path=None, soft_edges: bool = False) -> PriorPair:
    """Priors for a degraded input image (never for the ground truth)."""
    if normal_path is not None:
        normal = load_normal_map(normal_path, img.shape[:2])
    else:
        normal = normal_from_heightfield(img)
    return PriorPair(normal=normal, gradient=canny(img, soft=soft_edges))
