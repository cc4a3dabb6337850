"""Synthetic multi-contrast phantoms.

Anatomy is a set of nested random ellipsoids with piecewise-constant T1 and
proton density plus a smooth phase. Contrasts are inversion-recovery weighted
copies of the same anatomy, so all contrasts share their edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PUBLISHED_TIS = (365.8, 658.6, 907.48, 1732.2)


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    n_ellipsoids: int = 14
    t1_range: tuple[float, float] = (400.0, 1800.0)
    pd_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if len(self.grid) != 3:
            raise ValueError("grid must have three extents (z, y, x)")
        if any(n < 8 or n % 4 for n in self.grid):
            raise ValueError(f"grid extents must be >= 8 and divisible by 4, got {self.grid}")
        if self.n_ellipsoids < 0:
            raise ValueError("ellipsoid count must be non-negative")
        for name, (lo, hi) in (("t1_range", self.t1_range), ("pd_range", self.pd_range)):
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")


@dataclass
class TissueMaps:
    t1: np.ndarray
    pd: np.ndarray
    phase: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.t1 > 0


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def generate_tissue_maps(spec: PhantomSpec) -> TissueMaps:
    """Deterministic ellipsoid anatomy for ``spec.seed``.

    The first ellipsoid is a large head-like shell defining the support; each
    further ellipsoid overwrites T1/PD inside itself, clipped to the support.
    """
    rng = np.random.default_rng(spec.seed)
    shape = spec.grid
    coords = np.stack(
        np.meshgrid(*[(np.arange(n) - n // 2 + 0.5) / (n / 2) for n in shape], indexing="ij"),
        axis=-1,
    )  # normalized to roughly [-1, 1]
    t1 = np.zeros(shape)
    pd = np.zeros(shape)
    phase = np.zeros(shape)
    if spec.n_ellipsoids == 0:
        return TissueMaps(t1, pd, phase)

    def draw():
        return rng.uniform(*spec.t1_range), rng.uniform(*spec.pd_range)

    axes = rng.uniform(0.8, 0.95, 3)
    inside = np.sum((coords / axes) ** 2, axis=-1) <= 1.0
    t1[inside], pd[inside] = draw()
    support = inside
    for _ in range(spec.n_ellipsoids - 1):
        center = rng.uniform(-0.5, 0.5, 3)
        semi = rng.uniform(0.1, 0.45, 3)
        rel = (coords - center) @ _rotation(rng)
        mask = (np.sum((rel / semi) ** 2, axis=-1) <= 1.0) & support
        t1[mask], pd[mask] = draw()

    grad = rng.uniform(-0.6, 0.6, 3)
    curv = rng.uniform(-0.4, 0.4)
    offset = rng.uniform(-np.pi, np.pi)
    smooth = offset + coords @ grad + curv * np.sum(coords**2, axis=-1)
    phase[support] = smooth[support]
    return TissueMaps(t1, pd, phase)


def ir_signal(ti, t1, pd):
    """Ideal inversion-recovery magnetization pd * (1 - 2 exp(-TI/T1))."""
    ti = np.asarray(ti, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    if np.any(t1 <= 0):
        raise ValueError("T1 must be positive")
    if np.any(ti < 0):
        raise ValueError("TI must be non-negative")
    out = pd * (1.0 - 2.0 * np.exp(-ti / t1))
    return float(out) if np.ndim(out) == 0 else out


def generate_multicontrast(
    maps: TissueMaps, tis: Sequence[float] = PUBLISHED_TIS, normalize: bool = True
) -> np.ndarray:
    """Complex (contrast, z, y, x) volume, jointly scaled to peak magnitude 1."""
    if len(tis) == 0:
        raise ValueError("need at least one inversion time")
    support = maps.support
    out = np.zeros((len(tis),) + maps.t1.shape, dtype=np.complex128)
    carrier = np.exp(1j * maps.phase[support])
    for i, ti in enumerate(tis):
        out[i][support] = ir_signal(ti, maps.t1[support], maps.pd[support]) * carrier
    if normalize:
        peak = np.abs(out).max()
        if peak > 0:
            out /= peak
    return out


def phantom_volume(spec: PhantomSpec, tis: Sequence[float] = PUBLISHED_TIS) -> np.ndarray:
    return generate_multicontrast(generate_tissue_maps(spec), tis)
