"""Learned multi-contrast energy and its slice-wise 3D extension.

A 2D slice of a C-contrast volume is fed to the network as 2C real channels
(real and imaginary part of each contrast, interleaved). The slice energy is

    E(x) = 0.5 * ||x - phi(x)||^2

and the 3D energy sums E over every slice along z, y and x. ``denoised_volumes``
returns the three directional gradient-step volumes and their mean, which is
what each majorize-minimize iteration consumes.

Anything with ``energies(batch)`` and ``grads(batch)`` methods can stand in for
:class:`EnergyNet` in the functions below.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .nn import autodiff as ad
from .nn.network import (
    NetworkSpec,
    ParamStore,
    RejectedInputError,
    build,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

DIRECTIONS = ("z", "y", "x")
_BATCH = 64


class EnergyNet:
    def __init__(self, spec: NetworkSpec, params: ParamStore):
        if spec.channels % 2:
            raise ValueError("energy networks need an even channel count (real/imag pairs)")
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, n_contrasts: int, widths=(16, 32), seed: int = 0) -> EnergyNet:
        """Fresh network whose output layer is zero, so E(x) = ||x||^2 / 2."""
        spec = NetworkSpec(2 * n_contrasts, tuple(widths))
        return cls(spec, init_params(spec, seed))

    @classmethod
    def load(cls, path) -> EnergyNet:
        spec, params, _ = load_checkpoint(path)
        return cls(spec, params)

    def save(self, path, **extra) -> None:
        save_checkpoint(path, self.spec, self.params, extra or None)

    @property
    def n_contrasts(self) -> int:
        return self.spec.channels // 2

    @property
    def channels(self) -> int:
        return self.spec.channels

    def as_dtype(self, dtype) -> EnergyNet:
        return EnergyNet(self.spec, self.params.astype(dtype))

    def _weights(self, requires_grad=False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def _prepare(self, xb: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
        if xb.ndim != 4 or xb.shape[1] != self.channels:
            raise RejectedInputError(
                f"expected (batch, {self.channels}, H, W) slices, got shape {xb.shape}"
            )
        hw = xb.shape[2:]
        f = self.spec.factor
        ph, pw = (-hw[0]) % f, (-hw[1]) % f
        x = np.asarray(xb, dtype=self.params.dtype)
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
        return x, hw

    def residual(self, xb: np.ndarray) -> np.ndarray:
        """x - phi(x) on the (possibly zero-padded) batch."""
        x, _ = self._prepare(xb)
        out = np.empty_like(x)
        with ad.no_grad():
            w = self._weights()
            for s in range(0, x.shape[0], _BATCH):
                xs = x[s : s + _BATCH]
                out[s : s + _BATCH] = xs - build(self.spec, w, ad.Tensor(xs)).data
        return out

    def energies(self, xb: np.ndarray) -> np.ndarray:
        """Per-slice energies, accumulated in 64-bit."""
        r = self.residual(xb).astype(np.float64)
        return 0.5 * np.sum(r * r, axis=(1, 2, 3))

    def energies_and_grads(self, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, hw = self._prepare(xb)
        w = self._weights()
        e = np.empty(x.shape[0])
        g = np.empty_like(x)
        for s in range(0, x.shape[0], _BATCH):
            xt = ad.Tensor(x[s : s + _BATCH], requires_grad=True)
            out = build(self.spec, w, xt)
            r = xt.data - out.data
            (jt,) = ad.grad(out, [xt], r)
            g[s : s + _BATCH] = r - jt.data
            r64 = r.astype(np.float64)
            e[s : s + _BATCH] = 0.5 * np.sum(r64 * r64, axis=(1, 2, 3))
        return e, g[:, :, : hw[0], : hw[1]]

    def grads(self, xb: np.ndarray) -> np.ndarray:
        """H(x) = (I - J_phi)^T (x - phi(x)), the exact input gradient of E."""
        return self.energies_and_grads(xb)[1]

    def grad_graph(self, weights: dict[str, ad.Tensor], xt: ad.Tensor) -> ad.Tensor:
        """H as a differentiable tensor (used by training and Hessian products)."""
        out = build(self.spec, weights, xt)
        r = xt - out
        (jt,) = ad.grad(out, [xt], r, create_graph=True)
        return r - jt

    def hessian_vjp(self, xb: np.ndarray, w: np.ndarray) -> np.ndarray:
        """w^T dH/dx at ``xb`` (the energy Hessian applied to w)."""
        x, hw = self._prepare(xb)
        wp = np.zeros_like(x)
        wp[:, :, : hw[0], : hw[1]] = w
        xt = ad.Tensor(x, requires_grad=True)
        h = self.grad_graph(self._weights(), xt)
        (out,) = ad.grad(h, [xt], ad.Tensor(wp))
        return out.data[:, :, : hw[0], : hw[1]]


# ---------------------------------------------------------------------------
# complex <-> channel packing and slice operators

_AXIS = {"z": 1, "y": 2, "x": 3}


def to_channels(slices: np.ndarray) -> np.ndarray:
    """(N, c, H, W) complex -> (N, 2c, H, W) real with real/imag interleaved."""
    n, c, h, w = slices.shape
    return np.stack([slices.real, slices.imag], axis=2).reshape(n, 2 * c, h, w)


def from_channels(x: np.ndarray) -> np.ndarray:
    n, c2, h, w = x.shape
    x = np.asarray(x, dtype=np.float64).reshape(n, c2 // 2, 2, h, w)
    return x[:, :, 0] + 1j * x[:, :, 1]


def extract_slices(gamma: np.ndarray, direction: str) -> np.ndarray:
    """All slices S_{d,m} gamma stacked over m: (n_slices, c, H, W)."""
    return np.moveaxis(gamma, _AXIS[direction], 0)


def insert_slices(slices: np.ndarray, direction: str) -> np.ndarray:
    """sum_m S_{d,m}^T applied to a stack of slices."""
    return np.moveaxis(slices, 0, _AXIS[direction])


def extract_slice(gamma: np.ndarray, direction: str, m: int) -> np.ndarray:
    return np.take(gamma, m, axis=_AXIS[direction])


def _check_volume(net, gamma):
    if gamma.ndim != 4:
        raise ValueError(f"expected (contrast, z, y, x) volume, got shape {gamma.shape}")
    if 2 * gamma.shape[0] != net.channels:
        raise RejectedInputError(
            f"network expects {net.channels // 2} contrasts, volume has {gamma.shape[0]}"
        )


# ---------------------------------------------------------------------------
# public operations


def energy(net, x: np.ndarray):
    """E(x) for one (2c, H, W) slice (float) or a batch (array of per-slice values)."""
    if x.ndim == 3:
        return float(net.energies(x[None])[0])
    return net.energies(x)


def energy_grad(net, x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return net.grads(x[None])[0]
    return net.grads(x)


def joint_energy_3d(net, gamma: np.ndarray) -> float:
    """Sum of slice energies over all z, y and x slices."""
    _check_volume(net, gamma)
    total = 0.0
    for d in DIRECTIONS:
        total += float(np.sum(net.energies(to_channels(extract_slices(gamma, d)))))
    return total


class Denoised(NamedTuple):
    z_x: np.ndarray
    z_y: np.ndarray
    z_z: np.ndarray
    z_bar: np.ndarray
    energy: float


def denoised_volumes(net, gamma: np.ndarray, L: float) -> Denoised:
    """Gradient-step volumes per direction and their average.

    For direction d: Z_d = sum_m S_dm^T (S_dm gamma - H(S_dm gamma) / L).
    The 3D energy at ``gamma`` is returned alongside since it comes for free.
    """
    if L <= 0:
        raise ValueError("L must be positive")
    _check_volume(net, gamma)
    out = {}
    total = 0.0
    for d in DIRECTIONS:
        slices = extract_slices(gamma, d)
        xb = to_channels(slices)
        if hasattr(net, "energies_and_grads"):
            e, g = net.energies_and_grads(xb)
        else:
            e, g = net.energies(xb), net.grads(xb)
        total += float(np.sum(e))
        step = slices - from_channels(g) / L
        out[d] = insert_slices(step, d)
    z_bar = (out["x"] + out["y"] + out["z"]) / 3.0
    return Denoised(out["x"], out["y"], out["z"], z_bar, total)
