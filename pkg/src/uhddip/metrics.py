"""Full-reference quality metrics: PSNR and SSIM."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import UsageError
from .imageio import luminance

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM over valid window positions of the luminance channel."""
    a, b = _check_pair(a, b)
    ya, yb = luminance(a), luminance(b)
    if min(ya.shape) < SSIM_WINDOW:
        raise UsageError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {ya.shape}")
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        return x[half:-half, half:-half]

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a ** 2
    var_b = filt(yb * yb) - mu_b ** 2
    cov = filt(ya * yb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    lpips: Optional[list] = None  # not computed

    def add(self, name: str, restored: np.ndarray, target: np.ndarray) -> None:
        self.names.append(str(name))
        self.psnr.append(psnr(restored, target))
        self.ssim.append(ssim(restored, target))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "psnr", "ssim"])
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            w.writerow([n, f"{p:.4f}", f"{s:.6f}"])
        w.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()
