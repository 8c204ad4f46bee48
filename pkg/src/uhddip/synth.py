"""Procedural rain and snow masks and degraded/clean pair synthesis.

Mask recipe, one layer per flow: uniform noise -> crystallize -> motion blur
(rain, and the opaque snow-streak layer) -> threshold -> Gaussian blur.
Layers are weighted by their flow opacity and summed with clamping.

All randomness is counter-based: a pixel's noise value depends only on
(seed, x, y), so outputs do not depend on evaluation order or thread count.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, IngestError, UsageError
from .imageio import read_image, write_image

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

RAIN_ANGLES: tuple[int, ...] = tuple(
    [45, 50, 55] + list(range(60, 81)) + [85, 95] + list(range(100, 121)) + [125, 130, 135]
)
RAIN_THRESHOLD_RANGE = (55, 67)
SNOW_THRESHOLD_RANGE = (100, 165)

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# -- counter-based random numbers ----------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *stream: int) -> int:
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for s in stream:
        with np.errstate(over="ignore"):
            z = _mix64(z + np.uint64(0x9E3779B97F4A7C15) * np.uint64(s + 1))
    return int(z)


def counter_uniform(seed: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) values keyed by (seed, y, x); coordinates may be negative."""
    ys = np.asarray(ys, dtype=np.int64).astype(np.uint64) & np.uint64(0xFFFFFFFF)
    xs = np.asarray(xs, dtype=np.int64).astype(np.uint64) & np.uint64(0xFFFFFFFF)
    key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    z = _mix64(key ^ _mix64((ys << np.uint64(32)) | xs))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# -- mask stages -----------------------------------------------------------------

def gen_noise(h: int, w: int, amount: float, seed: int) -> np.ndarray:
    """Black canvas with i.i.d. uniform [0, amount] noise, H x W x 1."""
    if not 0 < amount <= 1:
        raise ConfigError(f"noise amount must be in (0, 1], got {amount}")
    ys, xs = np.mgrid[0:h, 0:w]
    return (amount * counter_uniform(seed, ys, xs))[:, :, None]


def _voronoi_labels(h: int, w: int, cell: int, seed: int):
    """Jittered-grid Voronoi partition. Returns (labels, seed_y, seed_x) where
    the seed arrays are indexed by label."""
    gh = h // cell + 3
    gw = w // cell + 3
    gy, gx = np.mgrid[-1:gh - 1, -1:gw - 1]
    jy = counter_uniform(derive_seed(seed, 1), gy, gx)
    jx = counter_uniform(derive_seed(seed, 2), gy, gx)
    sy = (gy + jy) * cell
    sx = (gx + jx) * cell

    py = np.arange(h) + 0.5
    px = np.arange(w) + 0.5
    cy = (np.arange(h) // cell)[:, None]
    cx = (np.arange(w) // cell)[None, :]
    best = np.full((h, w), np.inf)
    label = np.zeros((h, w), dtype=np.int64)
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            iy = np.clip(cy + dy + 1, 0, gh - 1)
            ix = np.clip(cx + dx + 1, 0, gw - 1)
            d = (sy[iy, ix] - py[:, None]) ** 2 + (sx[iy, ix] - px[None, :]) ** 2
            closer = d < best
            best = np.where(closer, d, best)
            label = np.where(closer, iy * gw + ix, label)
    return label, sy.reshape(-1), sx.reshape(-1)


def crystallize(img: np.ndarray, cell: int, seed: int, return_labels: bool = False):
    """Voronoi cells of mean diameter ``cell``; each pixel takes the value at its
    cell's seed point (clamped to the image)."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if cell < 1:
        raise ConfigError("crystallize cell must be >= 1")
    if cell > min(h, w):
        raise ConfigError(f"crystallize cell {cell} exceeds image size {h}x{w}")
    if cell == 1:
        out = img.copy()
        labels = np.arange(h * w).reshape(h, w)
        return (out, labels) if return_labels else out
    labels, sy, sx = _voronoi_labels(h, w, cell, seed)
    yi = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    out = img[yi[labels], xi[labels]]
    return (out, labels) if return_labels else out


def line_kernel_offsets(length: int, angle: float) -> list[tuple[int, int]]:
    """Bresenham pixels (dy, dx) of a centred line; angle in degrees counter-
    clockwise from +x with y pointing up, so 90 is vertical."""
    if length < 1:
        raise ConfigError("motion blur length must be >= 1")
    if length == 1:
        return [(0, 0)]
    t = math.radians(angle)
    half = (length - 1) / 2.0
    x0, y0 = round(-half * math.cos(t)), round(half * math.sin(t))
    x1, y1 = round(half * math.cos(t)), round(-half * math.sin(t))
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        pts.append((y, x))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return pts


def motion_blur(img: np.ndarray, length: int, angle: float) -> np.ndarray:
    """Average along a 1-px line (periodic boundary)."""
    img = np.asarray(img, dtype=np.float64)
    offsets = line_kernel_offsets(length, angle)
    if len(offsets) == 1:
        return img.copy()
    acc = np.zeros_like(img)
    for dy, dx in offsets:
        acc += np.roll(img, shift=(dy, dx), axis=(0, 1))
    return acc / len(offsets)


def threshold(img: np.ndarray, level: float) -> np.ndarray:
    if not 0 <= level <= 255:
        raise ConfigError(f"threshold level must be in [0, 255], got {level}")
    return (np.asarray(img) >= level / 255.0).astype(np.float64)


def gaussian_kernel(radius: float) -> np.ndarray:
    sigma = radius / 2.0
    half = int(math.ceil(3 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian, sigma = radius / 2, truncated at ceil(3 sigma)."""
    if radius < 0:
        raise ConfigError("gaussian radius must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    if radius == 0:
        return img.copy()
    k = gaussian_kernel(radius)
    out = ndimage.correlate1d(img, k, axis=0, mode="wrap")
    return ndimage.correlate1d(out, k, axis=1, mode="wrap")


# -- recipes ---------------------------------------------------------------------

@dataclass
class SynthSpec:
    kind: str = "rain"
    noise_amount: float = 0.5
    crystallize_cell: int = 5
    motion_len: int = 200
    motion_angle: float = 90.0
    threshold_level: float = 55
    gauss_radius: float = 2.0
    flows: list = field(default_factory=lambda: [1.0])
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("rain", "snow"):
            raise ConfigError(f"unknown degradation kind {self.kind!r}")
        if not 45 <= self.motion_angle <= 135:
            raise ConfigError(f"motion angle {self.motion_angle} outside [45, 135]")
        if not 0 <= self.threshold_level <= 255:
            raise ConfigError(f"threshold {self.threshold_level} outside [0, 255]")
        if not self.flows or any(not 0 < f <= 1 for f in self.flows):
            raise ConfigError("flows must be opacities in (0, 1]")

    @classmethod
    def rain(cls, angle: float = 90.0, level: float = 55, seed: int = 0) -> "SynthSpec":
        return cls("rain", 0.5, 5, 200, angle, level, 2.0, [1.0], seed)

    @classmethod
    def snow(cls, level: float = 100, seed: int = 0, angle: float = 90.0) -> "SynthSpec":
        return cls("snow", 0.5, 15, 25, angle, level, 5.0, [0.6, 1.0], seed)


def _layer_has_motion(spec: SynthSpec, flow: float) -> bool:
    # snow: the opaque layer carries streaks, translucent layers are flakes
    return spec.kind == "rain" or flow >= max(spec.flows)


def gen_layer(spec: SynthSpec, h: int, w: int, index: int) -> np.ndarray:
    seed = derive_seed(spec.seed, index)
    x = gen_noise(h, w, spec.noise_amount, seed)[:, :, 0]
    x = crystallize(x, spec.crystallize_cell, seed)
    if _layer_has_motion(spec, spec.flows[index]):
        x = motion_blur(x, spec.motion_len, spec.motion_angle)
    x = threshold(x, spec.threshold_level)
    return gaussian_blur(x, spec.gauss_radius)


def gen_mask(spec: SynthSpec, h: int, w: int) -> np.ndarray:
    """Degradation mask in [0, 1], H x W x 1."""
    spec.validate()
    total = np.zeros((h, w))
    for i, flow in enumerate(spec.flows):
        total += flow * gen_layer(spec, h, w, i)
    return np.clip(total, 0.0, 1.0)[:, :, None]


def composite(clean: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """White streaks over the clean image: clean * (1 - m) + m."""
    clean = np.asarray(clean, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[:, :, None]
    if clean.shape[:2] != mask.shape[:2]:
        raise UsageError(f"mask {mask.shape[:2]} does not match image {clean.shape[:2]}")
    return np.clip(clean * (1.0 - mask) + mask, 0.0, 1.0)


_SCHARR_X = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]], dtype=np.float64)


def dominant_orientation(img: np.ndarray) -> float:
    """Streak orientation in degrees [0, 180) from the global structure tensor,
    in the same convention as ``motion_angle``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[:, :, 0]
    # Scharr derivatives are close to rotation invariant
    gx = ndimage.correlate(img, _SCHARR_X, mode="wrap")
    gy = ndimage.correlate(img, _SCHARR_X.T, mode="wrap")
    jxx, jyy, jxy = np.sum(gx * gx), np.sum(gy * gy), np.sum(gx * gy)
    # dominant gradient direction in image coordinates (y down)
    theta = 0.5 * math.atan2(2 * jxy, jxx - jyy)
    # streaks run perpendicular to it; flip y to get counter-clockwise degrees
    streak = theta + math.pi / 2
    return math.degrees(math.atan2(-math.sin(streak), math.cos(streak))) % 180.0


def mask_density(mask: np.ndarray, cut: float = 0.5) -> float:
    return float(np.mean(np.asarray(mask) >= cut))


# -- datasets --------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise IngestError(f"{folder} is not a directory")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def sample_spec(kind: str, master_seed: int, index: int) -> SynthSpec:
    """Draw the per-image recipe from the listed parameter ranges."""
    rng = np.random.default_rng([master_seed, index])
    seed = int(rng.integers(0, 2 ** 63))
    if kind == "rain":
        angle = float(RAIN_ANGLES[rng.integers(len(RAIN_ANGLES))])
        level = int(rng.integers(RAIN_THRESHOLD_RANGE[0], RAIN_THRESHOLD_RANGE[1] + 1))
        return SynthSpec.rain(angle=angle, level=level, seed=seed)
    if kind == "snow":
        level = int(rng.integers(SNOW_THRESHOLD_RANGE[0], SNOW_THRESHOLD_RANGE[1] + 1))
        return SynthSpec.snow(level=level, seed=seed)
    raise ConfigError(f"unknown degradation kind {kind!r}")


@dataclass
class ManifestEntry:
    clean_path: str
    degraded_path: str
    mask_path: str
    spec: dict


@dataclass
class DatasetManifest:
    kind: str
    master_seed: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    version: int = MANIFEST_VERSION

    @property
    def counts(self) -> dict:
        return {"train": len(self.train), "test": len(self.test)}

    def entries(self, split: str) -> list[ManifestEntry]:
        return [e if isinstance(e, ManifestEntry) else ManifestEntry(**e) for e in getattr(self, split)]

    def to_json(self) -> str:
        d = {"version": self.version, "kind": self.kind, "master_seed": self.master_seed,
             "counts": self.counts,
             "train": [asdict(e) for e in self.entries("train")],
             "test": [asdict(e) for e in self.entries("test")]}
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read manifest {path}: {exc}") from exc
        if d.get("version") != MANIFEST_VERSION:
            raise IngestError(f"{path}: unsupported manifest version {d.get('version')}")
        m = cls(kind=d["kind"], master_seed=d["master_seed"],
                train=[ManifestEntry(**e) for e in d["train"]],
                test=[ManifestEntry(**e) for e in d["test"]])
        if m.counts != d.get("counts", m.counts):
            raise IngestError(f"{path}: counts do not match entry lists")
        return m

    def resolve(self, root, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(root) / p


def _synth_one(clean_path: Path, out_dir: Path, split: str, idx: int, spec: SynthSpec) -> ManifestEntry:
    clean = read_image(clean_path, channels=3)
    h, w = clean.shape[:2]
    mask = gen_mask(spec, h, w)
    degraded = composite(clean, mask)
    name = f"{idx:05d}.png"
    rel = {k: f"{split}/{k}/{name}" for k in ("input", "gt", "mask")}
    write_image(out_dir / rel["gt"], clean)
    write_image(out_dir / rel["input"], degraded)
    write_image(out_dir / rel["mask"], mask)
    return ManifestEntry(clean_path=rel["gt"], degraded_path=rel["input"], mask_path=rel["mask"],
                         spec=asdict(spec))


def build_dataset(clean_dir, out_dir, n_train: int, n_test: int, kind: str, master_seed: int,
                  threads: int = 1) -> DatasetManifest:
    """Synthesize paired train/test splits into out_dir/{train,test}/{input,gt,mask}."""
    if kind not in ("rain", "snow"):
        raise ConfigError(f"unknown degradation kind {kind!r}")
    images = list_images(clean_dir)
    need = n_train + n_test
    if len(images) < need:
        raise UsageError(f"{clean_dir} holds {len(images)} images, need {need}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i in range(need):
        split, idx = ("train", i) if i < n_train else ("test", i - n_train)
        jobs.append((images[i], out_dir, split, idx, sample_spec(kind, master_seed, i)))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        entries = list(pool.map(lambda job: _synth_one(*job), jobs))
    manifest = DatasetManifest(kind=kind, master_seed=master_seed,
                               train=entries[:n_train], test=entries[n_train:])
    manifest.save(out_dir / "manifest.json")
    logger.info("wrote %d train / %d test %s pairs to %s", n_train, n_test, kind, out_dir)
    return manifest


def make_toy_clean_set(out_dir, n: int, size: int = 128, seed: int = 0) -> list[Path]:
    """Procedural stand-ins for clean photographs: smooth colour gradients,
    a few flat shapes and mild texture."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        yy, xx = np.mgrid[0:size, 0:size] / size
        base = np.stack([
            rng.uniform(0.1, 0.6) + rng.uniform(-0.3, 0.3) * xx + rng.uniform(-0.3, 0.3) * yy
            for _ in range(3)], axis=-1)
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.05, 0.25)
            color = rng.uniform(0.0, 0.8, 3)
            if rng.random() < 0.5:
                sel = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                sel = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.3, 1.5))
            base[sel] = color
        tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5) * 0.03
        img = np.clip(base + tex[:, :, None], 0, 1)
        p = out_dir / f"clean_{i:04d}.png"
        write_image(p, img)
        paths.append(p)
    return paths
