"""PSNR and windowed SSIM."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MetricInputError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0) -> float:
    """10 log10(peak^2 / MSE); returns ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, peak=1.0, size=11, sigma=1.5):
    """Per-window SSIM over valid window positions; shape (H-10, W-10, C)."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < size:
        raise MetricInputError(f"image {a.shape[:2]} smaller than the {size}x{size} window")
    w = gaussian_window(size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(x):
        win = sliding_window_view(x, (size, size), axis=(0, 1))  # (H', W', C, s, s)
        return np.einsum("ijcuv,uv->ijc", win, w)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, peak=1.0) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        # the windowed formula can round to 1 - 1e-16; identity is exact
        if min(a.shape[:2]) < 11:
            raise MetricInputError(f"image {a.shape[:2]} smaller than the 11x11 window")
        return 1.0
    return float(min(1.0, np.mean(ssim_map(a, b, peak))))


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, frame, p, s):
        self.frames.append(frame)
        self.psnr.append(p)
        self.ssim.append(s)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "psnr", "ssim", "lpips"])
            for f, p, s in zip(self.frames, self.psnr, self.ssim):
                wr.writerow([f, repr(float(p)), repr(float(s)), "n/a"])
            wr.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim), "n/a"])

    def summary(self) -> str:
        return f"PSNR {self.mean_psnr:.3f}  SSIM {self.mean_ssim:.4f}  LPIPS n/a  ({len(self.frames)} frames)"
