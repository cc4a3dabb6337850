"""Wavelet-regularized single-contrast recovery (the independent baseline).

Orthonormal Haar transform in Mallat layout (coefficients stored in an array
of the input's shape, approximation band in the leading corner) and monotone
FISTA for  0.5 ||A g - b||^2 + lam ||W g||_1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forward_model import AcquisitionModel

_S = 1.0 / math.sqrt(2.0)


class WaveletDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class WaveletConfig:
    lam: float = 1.0
    levels: int = 3
    n_iters: int = 100
    step: float | None = None  # None: 1 / power-iteration estimate of ||A^H A||

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")


def _check_dims(shape, levels):
    f = 2**levels
    if any(n % f for n in shape):
        raise ValueError(f"dims {shape} not divisible by 2**levels = {f}")


def _haar_axis(x, axis):
    x = np.moveaxis(x, axis, 0)
    a = (x[0::2] + x[1::2]) * _S
    d = (x[0::2] - x[1::2]) * _S
    return np.moveaxis(np.concatenate([a, d]), 0, axis)


def _ihaar_axis(c, axis):
    c = np.moveaxis(c, axis, 0)
    h = c.shape[0] // 2
    a, d = c[:h], c[h:]
    x = np.empty_like(c)
    x[0::2] = (a + d) * _S
    x[1::2] = (a - d) * _S
    return np.moveaxis(x, 0, axis)


def dwt(x: np.ndarray, levels: int = 3) -> np.ndarray:
    """Multi-level separable Haar analysis over every axis of ``x``."""
    _check_dims(x.shape, levels)
    out = np.array(x, copy=True)
    for lev in range(levels):
        region = tuple(slice(0, n >> lev) for n in x.shape)
        block = out[region]
        for ax in range(x.ndim):
            block = _haar_axis(block, ax)
        out[region] = block
    return out


def idwt(c: np.ndarray, levels: int = 3) -> np.ndarray:
    _check_dims(c.shape, levels)
    out = np.array(c, copy=True)
    for lev in reversed(range(levels)):
        region = tuple(slice(0, n >> lev) for n in c.shape)
        block = out[region]
        for ax in reversed(range(c.ndim)):
            block = _ihaar_axis(block, ax)
        out[region] = block
    return out


def detail_mask(shape, levels: int = 3) -> np.ndarray:
    """True for detail coefficients, False for the coarsest approximation band."""
    mask = np.ones(shape, dtype=bool)
    mask[tuple(slice(0, n >> levels) for n in shape)] = False
    return mask


def soft_threshold(z: np.ndarray, tau) -> np.ndarray:
    """Complex magnitude shrinkage z * max(|z| - tau, 0) / |z|."""
    mag = np.abs(z)
    scale = np.maximum(mag - tau, 0.0) / np.where(mag > 0, mag, 1.0)
    return z * scale


def power_norm(apply, shape, iters: int = 30, seed: int = 0) -> float:
    """Largest eigenvalue of a Hermitian PSD operator by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply(v)
        lam = float(np.vdot(v, w).real)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return lam


def wavelet_objective(x, normal_x, aHb, bnorm, lam, levels, mask) -> float:
    data = 0.5 * max(float(np.vdot(x, normal_x).real - 2 * np.vdot(x, aHb).real + bnorm), 0.0)
    return data + lam * float(np.sum(np.abs(dwt(x, levels)[mask])))


def wavelet_fista(b: np.ndarray, acq: AcquisitionModel, cfg: WaveletConfig, x0=None):
    """Monotone FISTA on one contrast; returns (image, objective history).

    ``b`` holds one contrast's per-coil samples and ``acq`` is a single-contrast
    operator. The objective history starts with the initial point.
    """
    grid = acq.grid
    _check_dims(grid, cfg.levels)

    def normal(x):
        return acq.normal(x[None])[0]

    aHb = acq.adjoint([b])[0]
    bnorm = float(np.vdot(b, b).real)
    step = cfg.step
    if step is None:
        step = 1.0 / (1.01 * power_norm(normal, grid))
    mask = detail_mask(grid, cfg.levels)
    tau = cfg.lam * step

    def prox(v):
        c = dwt(v, cfg.levels)
        c[mask] = soft_threshold(c[mask], tau)
        return idwt(c, cfg.levels)

    def objective(x, nx):
        return wavelet_objective(x, nx, aHb, bnorm, cfg.lam, cfg.levels, mask)

    x = np.zeros(grid, dtype=np.complex128) if x0 is None else np.array(x0, dtype=np.complex128)
    nx = normal(x)
    fx = objective(x, nx)
    history = [fx]
    y, ny = x, nx
    x_prev, nx_prev = x, nx
    t = 1.0
    for k in range(cfg.n_iters):
        z = prox(y - step * (ny - aHb))
        nz = normal(z)
        fz = objective(z, nz)
        if not math.isfinite(fz):
            raise WaveletDiverged(f"non-finite objective at iteration {k}")
        x_prev, nx_prev = x, nx
        if fz <= fx:
            x, nx, fx = z, nz, fz
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        c1, c2 = t / t_next, (t - 1.0) / t_next
        y = x + c1 * (z - x) + c2 * (x - x_prev)
        ny = nx + c1 * (nz - nx) + c2 * (nx - nx_prev)
        t = t_next
        history.append(fx)
    return x, history


def wavelet_reconstruct(B, acq: AcquisitionModel, cfg: WaveletConfig) -> np.ndarray:
    """Independent wavelet recovery of every contrast."""
    return np.stack(
        [wavelet_fista(B.samples[i], acq.contrast(i), cfg)[0] for i in range(acq.n_contrasts)]
    )
