"""Radial acquisition simulation: trajectories, coil maps and the exact NUDFT.

Voxel ``i`` along an axis of length ``N`` sits at position ``i - N // 2`` and
k-space coordinates are in cycles/voxel, so a sample at ``k`` is

    sum_v coil(v) * image(v) * exp(-2j*pi * k . (v - center))

The sum is evaluated exactly, axis by axis (the exponential factorizes over
axes), in chunks of samples. ``A^H A`` additionally has an exact Toeplitz form
that is evaluated with FFTs on a twice-oversampled grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sp_fft

GOLDEN_ANGLE_DEG = 180.0 * (np.sqrt(5.0) - 1.0) / 2.0
ECHO_SPACING_MS = 4.88
PUBLISHED_N_BLOCKS = 224
PUBLISHED_KEEP_BLOCKS = 56
# [lo, hi) in ms, one per contrast
PUBLISHED_TI_WINDOWS = (
    (314.56, 417.04),
    (558.56, 758.64),
    (758.64, 1056.32),
    (1583.36, 1881.04),
)

_CHUNK = 512


def golden_means_3d() -> tuple[float, float]:
    """The two-dimensional golden means used for 3D radial view ordering."""
    roots = np.roots([1.0, -1.0, 0.0, -1.0])  # tau**3 = tau**2 + 1
    tau = float(max(r.real for r in roots if abs(r.imag) < 1e-12))
    return 1.0 / tau**2, 1.0 / tau


@dataclass
class Trajectory:
    """Radial spokes. ``coords`` is (n_spokes, n_samples, ndim) with axes ordered like the image."""

    coords: np.ndarray
    block: np.ndarray
    echo: np.ndarray
    stamp: np.ndarray

    @property
    def ndim(self) -> int:
        return self.coords.shape[-1]

    @property
    def n_spokes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_samples(self) -> int:
        return self.coords.shape[0] * self.coords.shape[1]

    def points(self) -> np.ndarray:
        """Flat (n_spokes * n_samples, ndim) coordinate array."""
        return self.coords.reshape(-1, self.ndim)

    def select(self, mask: np.ndarray) -> Trajectory:
        return Trajectory(self.coords[mask], self.block[mask], self.echo[mask], self.stamp[mask])


def spoke_radii(samples_per_spoke: int) -> np.ndarray:
    """Symmetric readout positions strictly inside (-0.5, 0.5); includes 0 when odd."""
    n = samples_per_spoke
    return (np.arange(n) - (n - 1) / 2.0) / n


def golden_angle_trajectory(
    n_blocks: int = PUBLISHED_N_BLOCKS,
    spokes_per_block: int = 16,
    samples_per_spoke: int = 33,
    mode: str = "3d",
    echo_spacing: float = ECHO_SPACING_MS,
    first_echo: float | None = None,
) -> Trajectory:
    """Golden-angle radial trajectory, one spoke per echo of every inversion block.

    In 2D, spoke ``n`` (acquisition order) is rotated by ``n`` times the golden
    angle. In 3D the direction follows the two-angle golden-means scheme on a
    hemisphere (spokes span the full diameter). Echo ``e`` of a block is stamped
    at ``first_echo + e * echo_spacing`` ms; ``first_echo`` defaults to one
    spacing.
    """
    if min(n_blocks, spokes_per_block, samples_per_spoke) < 1:
        raise ValueError("all counts must be >= 1")
    if first_echo is None:
        first_echo = echo_spacing
    n_total = n_blocks * spokes_per_block
    idx = np.arange(n_total)
    r = spoke_radii(samples_per_spoke)
    mode = mode.lower()
    if mode == "2d":
        theta = np.deg2rad(idx * GOLDEN_ANGLE_DEG)
        direction = np.stack([np.sin(theta), np.cos(theta)], axis=-1)  # (ky, kx)
    elif mode == "3d":
        phi1, phi2 = golden_means_3d()
        kz = np.mod(idx * phi1, 1.0)
        az = 2.0 * np.pi * np.mod(idx * phi2, 1.0)
        rho = np.sqrt(1.0 - kz**2)
        direction = np.stack([kz, rho * np.sin(az), rho * np.cos(az)], axis=-1)  # (kz, ky, kx)
    else:
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    coords = r[None, :, None] * direction[:, None, :]
    block = idx // spokes_per_block
    echo = idx % spokes_per_block
    stamp = first_echo + echo * echo_spacing
    return Trajectory(coords, block, echo, stamp.astype(np.float64))


def subset_blocks(
    traj: Trajectory,
    keep_blocks: int,
    ti_windows: Sequence[tuple[float, float]] = PUBLISHED_TI_WINDOWS,
) -> list[Trajectory]:
    """Keep the first ``keep_blocks`` inversion blocks and bin spokes by echo time.

    Windows are half-open ``[lo, hi)``; spokes outside every window are dropped.
    """
    n_blocks = int(traj.block.max()) + 1 if traj.n_spokes else 0
    if keep_blocks > n_blocks or keep_blocks < 0:
        raise ValueError(f"keep_blocks={keep_blocks} outside [0, {n_blocks}]")
    if not ti_windows:
        raise ValueError("at least one TI window is required")
    kept = traj.block < keep_blocks
    out = []
    for i, (lo, hi) in enumerate(ti_windows):
        mask = kept & (traj.stamp >= lo) & (traj.stamp < hi)
        if not mask.any():
            warnings.warn(f"contrast {i + 1} has no spokes in window [{lo}, {hi})", stacklevel=2)
        out.append(traj.select(mask))
    return out


def window_for_stamp(stamp: float, ti_windows=PUBLISHED_TI_WINDOWS) -> int | None:
    """Zero-based contrast index whose window contains ``stamp``."""
    for i, (lo, hi) in enumerate(ti_windows):
        if lo <= stamp < hi:
            return i
    return None


def ramlak_weights(points: np.ndarray) -> np.ndarray:
    """|k| density weights; only for gridding previews, never inside A or A^H."""
    w = np.linalg.norm(points, axis=-1)
    return w / w.max() if w.max() > 0 else np.ones_like(w)


# ---------------------------------------------------------------------------
# coil sensitivities


def simulate_coil_maps(n_coils: int, grid: Sequence[int]) -> np.ndarray:
    """Smooth complex sensitivities with sum_q |c_q|^2 = 1 at every voxel.

    Coils are Gaussian lobes centred on a ring around the field of view in the
    last two (in-plane) axes, each with its own constant phase and a gentle
    linear phase ramp.
    """
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    grid = tuple(int(g) for g in grid)
    if n_coils == 1:
        return np.ones((1,) + grid, dtype=np.complex128)
    axes = np.meshgrid(*[(np.arange(n) - n // 2) / n for n in grid], indexing="ij")
    y, x = axes[-2], axes[-1]
    maps = []
    for q in range(n_coils):
        a = 2.0 * np.pi * q / n_coils
        cy, cx = 0.6 * np.sin(a), 0.6 * np.cos(a)
        mag = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * 0.45**2))
        phase = a + np.pi * (0.3 * np.cos(a) * y - 0.3 * np.sin(a) * x)
        maps.append(mag * np.exp(1j * phase))
    maps = np.stack(maps)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


# ---------------------------------------------------------------------------
# exact nonuniform DFT


def _phases(points: np.ndarray, grid: Sequence[int], sign: float) -> list[np.ndarray]:
    """Per-axis exponentials, each (n_points, N_axis)."""
    out = []
    for a, n in enumerate(grid):
        pos = np.arange(n) - n // 2
        out.append(np.exp(sign * 2j * np.pi * np.outer(points[:, a], pos)))
    return out


def _check_points(points: np.ndarray, grid: Sequence[int]) -> None:
    if points.ndim != 2 or points.shape[1] != len(grid):
        raise ValueError(f"coordinates of shape {points.shape} do not match grid {tuple(grid)}")
    if points.size and (points.min() < -0.5 or points.max() >= 0.5):
        raise ValueError("k-space coordinates must lie in [-0.5, 0.5)")


def nudft(images: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Forward transform of a stack of images (Q, *grid) -> (Q, n_points)."""
    grid = images.shape[1:]
    _check_points(points, grid)
    q = images.shape[0]
    out = np.empty((q, points.shape[0]), dtype=np.complex128)
    for s0 in range(0, points.shape[0], _CHUNK):
        pts = points[s0 : s0 + _CHUNK]
        ph = _phases(pts, grid, -1.0)
        # contract the last axis with a matmul, then the rest elementwise
        t = images @ ph[-1].T  # (Q, ..., S)
        for a in range(len(grid) - 2, -1, -1):
            t = np.einsum("q...is,si->q...s", t, ph[a])
        out[:, s0 : s0 + _CHUNK] = t
    return out


def nudft_adjoint(samples: np.ndarray, points: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    """Exact adjoint of :func:`nudft`: (Q, n_points) -> (Q, *grid)."""
    grid = tuple(int(g) for g in grid)
    _check_points(points, grid)
    q = samples.shape[0]
    out = np.zeros((q,) + grid, dtype=np.complex128)
    for s0 in range(0, points.shape[0], _CHUNK):
        pts = points[s0 : s0 + _CHUNK]
        ph = _phases(pts, grid, 1.0)
        u = samples[:, s0 : s0 + _CHUNK]  # (Q, S)
        for a in range(len(grid) - 1):
            u = u[..., None] * ph[a].reshape((ph[a].shape[0],) + (1,) * a + (grid[a],))
        # u: (Q, S, *grid[:-1]); contract S against the last-axis phases
        u = np.moveaxis(u, 1, -1)  # (Q, *grid[:-1], S)
        out += u @ ph[-1]
    return out


def apply_A(gamma: np.ndarray, coils: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Per-coil samples of one contrast: (n_coils, n_points)."""
    if gamma.shape != coils.shape[1:]:
        raise ValueError(f"image {gamma.shape} and coil maps {coils.shape} disagree")
    return nudft(coils * gamma, points)


def apply_AH(samples: np.ndarray, coils: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Conjugate phase sum per coil, combined with conjugate coil weights."""
    if samples.shape[0] != coils.shape[0]:
        raise ValueError("sample array and coil maps disagree on coil count")
    return np.sum(np.conj(coils) * nudft_adjoint(samples, points, coils.shape[1:]), axis=0)


def toeplitz_kernel(points: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    """FFT of the A^H A point-spread kernel, embedded on a 2x grid."""
    grid = tuple(int(g) for g in grid)
    big = tuple(2 * n for n in grid)
    ones = np.ones((1, points.shape[0]), dtype=np.complex128)
    # position i - N on the big grid is the offset d = v - v'
    psf = nudft_adjoint(ones, points, big)[0]
    return np.fft.fftn(np.fft.ifftshift(psf))


def apply_normal(gamma: np.ndarray, coils: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """A^H A gamma via the Toeplitz embedding (exact up to rounding).

    The zero padding is never materialized: the forward FFT runs axis by axis
    over the rows that can be non-zero and the inverse only over the rows that
    are kept.
    """
    grid = gamma.shape
    big = kernel.shape
    nd = len(grid)
    a = coils * gamma
    for ax in range(nd, 0, -1):
        a = sp_fft.fft(a, n=big[ax - 1], axis=ax)
    a *= kernel
    for ax in range(1, nd + 1):
        a = sp_fft.ifft(a, axis=ax)
        a = a[(slice(None),) * ax + (slice(0, grid[ax - 1]),)]
    return np.sum(np.conj(coils) * a, axis=0)


# ---------------------------------------------------------------------------
# multi-contrast operator and data


@dataclass
class KSpaceData:
    """Per-contrast samples (n_coils, n_points_i) aligned to per-contrast coordinates."""

    samples: list[np.ndarray]
    points: list[np.ndarray]
    grid: tuple[int, ...]
    eta: float = 0.0
    seed: int = 0

    @property
    def n_contrasts(self) -> int:
        return len(self.samples)

    @property
    def n_coils(self) -> int:
        return self.samples[0].shape[0]

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.samples) != len(self.points):
            raise ValueError("samples and coordinates disagree on contrast count")
        for s, p in zip(self.samples, self.points):
            if s.shape[1] != p.shape[0]:
                raise ValueError("sample count does not match trajectory")

    def contrast(self, i: int) -> KSpaceData:
        return KSpaceData([self.samples[i]], [self.points[i]], self.grid, self.eta, self.seed)


@dataclass
class AcquisitionModel:
    """Stacked operator A: one coil-weighted NUDFT per contrast, shared coil maps."""

    coils: np.ndarray
    points: list[np.ndarray]
    _kernels: list = field(default_factory=list, repr=False)

    @property
    def grid(self) -> tuple[int, ...]:
        return self.coils.shape[1:]

    @property
    def n_contrasts(self) -> int:
        return len(self.points)

    @classmethod
    def from_trajectories(cls, coils, trajs: Sequence[Trajectory]) -> AcquisitionModel:
        return cls(coils, [t.points() for t in trajs])

    def contrast(self, i: int) -> AcquisitionModel:
        sub = AcquisitionModel(self.coils, [self.points[i]])
        if self._kernels:
            sub._kernels = [self._kernels[i]]
        return sub

    def forward(self, gamma: np.ndarray) -> list[np.ndarray]:
        self._check(gamma)
        return [apply_A(g, self.coils, p) for g, p in zip(gamma, self.points)]

    def adjoint(self, samples: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([apply_AH(s, self.coils, p) for s, p in zip(samples, self.points)])

    def kernels(self) -> list[np.ndarray]:
        if not self._kernels:
            self._kernels = [toeplitz_kernel(p, self.grid) for p in self.points]
        return self._kernels

    def normal(self, gamma: np.ndarray) -> np.ndarray:
        """A^H A applied contrast by contrast."""
        self._check(gamma)
        return np.stack([apply_normal(g, self.coils, k) for g, k in zip(gamma, self.kernels())])

    def _check(self, gamma):
        if gamma.shape != (self.n_contrasts,) + self.grid:
            raise ValueError(
                f"expected volume of shape {(self.n_contrasts,) + self.grid}, got {gamma.shape}"
            )


def simulate_kspace(gamma: np.ndarray, acq: AcquisitionModel, seed: int = 0) -> KSpaceData:
    """Noiseless measurements of a multi-contrast volume."""
    return KSpaceData(acq.forward(gamma), list(acq.points), acq.grid, 0.0, seed)


def add_noise(data: KSpaceData, eta: float, seed: int) -> KSpaceData:
    """Circular complex Gaussian noise of variance eta**2 (eta/sqrt(2) per component)."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if eta == 0:
        return KSpaceData([s.copy() for s in data.samples], data.points, data.grid, data.eta, seed)
    rng = np.random.default_rng(seed)
    scale = eta / np.sqrt(2.0)
    noisy = []
    for s in data.samples:
        n = rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape)
        noisy.append(s + scale * n)
    return KSpaceData(noisy, data.points, data.grid, eta, seed)
