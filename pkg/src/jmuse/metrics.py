"""Image quality metrics on complex volumes (magnitude-based SSIM)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_DISPLAY_CAP = 99.0
K1, K2 = 0.01, 0.03
SSIM_SIGMA = 1.5
_TRUNCATE = 5.0 / SSIM_SIGMA  # radius 5 -> 11x11 window


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """20 log10(max|ref| / rms|ref - test|); +inf when identical."""
    ref = np.asarray(ref)
    test = np.asarray(test)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    peak = float(np.abs(ref).max())
    if peak == 0:
        raise ValueError("reference is identically zero")
    rms = math.sqrt(float(np.mean(np.abs(ref - test) ** 2)))
    if rms == 0:
        return math.inf
    return 20.0 * math.log10(peak / rms)


def display_psnr(value: float) -> float:
    return min(value, PSNR_DISPLAY_CAP)


def ssim_map(ref: np.ndarray, test: np.ndarray, data_range: float) -> np.ndarray:
    """SSIM map of two real images; the Gaussian window acts on the last two axes."""
    sig = (0,) * (ref.ndim - 2) + (SSIM_SIGMA, SSIM_SIGMA)

    def blur(a):
        return gaussian_filter(a, sig, truncate=_TRUNCATE, mode="reflect")

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = blur(ref), blur(test)
    vx = blur(ref * ref) - mx * mx
    vy = blur(test * test) - my * my
    cxy = blur(ref * test) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean SSIM of magnitude images, dynamic range max|ref|.

    4-D inputs are (contrast, z, y, x) and the result is averaged over voxels
    and contrasts.
    """
    ref = np.abs(np.asarray(ref)).astype(np.float64)
    test = np.abs(np.asarray(test)).astype(np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    if ref.ndim < 2:
        raise ValueError("ssim needs at least 2-D images")
    if ref.ndim == 4:
        return float(np.mean([ssim(r, t) for r, t in zip(ref, test)]))
    data_range = float(ref.max()) or 1.0
    return float(np.mean(ssim_map(ref, test, data_range)))


@dataclass
class MetricReport:
    method: str
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @classmethod
    def compute(cls, method: str, ref: np.ndarray, test: np.ndarray) -> MetricReport:
        return cls(
            method,
            [psnr(r, t) for r, t in zip(ref, test)],
            [ssim(r, t) for r, t in zip(ref, test)],
        )

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_table(self) -> str:
        rows = [f"{'contrast':>8} {'PSNR[dB]':>9} {'SSIM':>7}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim), 1):
            rows.append(f"{i:>8} {display_psnr(p):9.2f} {s:7.4f}")
        rows.append(f"{'mean':>8} {display_psnr(self.mean_psnr):9.2f} {self.mean_ssim:7.4f}")
        return f"method: {self.method}\n" + "\n".join(rows) + "\n"

    def to_kv(self) -> str:
        lines = [f"method={self.method}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim), 1):
            lines += [f"psnr_{i}={p:.6f}", f"ssim_{i}={s:.6f}"]
        lines += [f"psnr_mean={self.mean_psnr:.6f}", f"ssim_mean={self.mean_ssim:.6f}"]
        return "\n".join(lines) + "\n"
