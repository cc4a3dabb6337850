"""Multiscale denoising score matching and Lipschitz estimation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .energy import DIRECTIONS, EnergyNet, extract_slices, to_channels
from .nn import autodiff as ad
from .nn.optim import adam_step

log = logging.getLogger(__name__)

PUBLISHED_LR = 1e-4
PUBLISHED_EPOCHS = 200


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"training diverged at epoch {epoch}: non-finite {what}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = PUBLISHED_LR
    batch_size: int = 16
    sigma: tuple[float, float] = (0.01, 0.2)
    seed: int = 0
    widths: tuple[int, ...] = (16, 32)
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        lo, hi = self.sigma
        if lo <= 0 or hi <= 0:
            raise ValueError("noise levels must be positive")
        if lo > hi:
            raise ValueError(f"sigma_min {lo} exceeds sigma_max {hi}")


@dataclass
class SliceDataset:
    """2D slices (N, 2c, H, W) harvested from volumes along all three axes."""

    groups: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_volumes(cls, volumes: Sequence[np.ndarray], per_contrast: bool = False):
        """Slices of each (c, z, y, x) volume; ``per_contrast`` splits contrasts apart."""
        by_shape: dict[tuple, list[np.ndarray]] = {}
        for vol in volumes:
            parts = [vol[i : i + 1] for i in range(vol.shape[0])] if per_contrast else [vol]
            for part in parts:
                for d in DIRECTIONS:
                    x = to_channels(extract_slices(part, d)).astype(np.float32)
                    by_shape.setdefault(x.shape[1:], []).append(x)
        return cls([np.concatenate(v) for v in by_shape.values()])

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def channels(self) -> int:
        return self.groups[0].shape[1]

    def all(self) -> np.ndarray:
        if len(self.groups) != 1:
            raise ValueError("slices have mixed shapes")
        return self.groups[0]

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Mini-batches within each shape group; shuffled when ``rng`` is given."""
        plan = []
        for gi, g in enumerate(self.groups):
            idx = rng.permutation(len(g)) if rng is not None else np.arange(len(g))
            plan += [(gi, idx[s : s + batch_size]) for s in range(0, len(g), batch_size)]
        if rng is not None:
            order = rng.permutation(len(plan))
            plan = [plan[i] for i in order]
        for gi, idx in plan:
            yield self.groups[gi][idx]


def sample_sigma(rng: np.random.Generator, schedule: tuple[float, float]) -> float:
    """Log-uniform noise level on [sigma_min, sigma_max]."""
    lo, hi = schedule
    if lo <= 0 or lo > hi:
        raise ValueError(f"invalid sigma schedule {schedule}")
    if lo == hi:
        return float(lo)
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def augment_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random global phase, flips and transpose applied per slice.

    The phase rotation acts on every (real, imag) channel pair at once, so the
    relative phase between contrasts is preserved.
    """
    n, c2, h, w = batch.shape
    theta = rng.uniform(0.0, 2 * np.pi, n)
    cos = np.cos(theta).astype(batch.dtype)[:, None, None, None]
    sin = np.sin(theta).astype(batch.dtype)[:, None, None, None]
    re, im = batch[:, 0::2], batch[:, 1::2]
    out = np.empty_like(batch)
    out[:, 0::2] = cos * re - sin * im
    out[:, 1::2] = sin * re + cos * im
    flips = rng.integers(0, 2, (n, 3))
    for i in range(n):
        s = out[i]
        if flips[i, 0]:
            s = s[:, ::-1]
        if flips[i, 1]:
            s = s[:, :, ::-1]
        if flips[i, 2] and h == w:
            s = s.transpose(0, 2, 1)
        out[i] = s
    return out


def _noise(seed, shape, dtype) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def dsm_loss(net: EnergyNet, batch: np.ndarray, sigma: float, seed) -> float:
    """Mean over the batch of ||H(x + sigma Q) - sigma Q||^2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    q = sigma * _noise(seed, batch.shape, net.params.dtype)
    h = net.grads(batch + q)
    d = (h - q).astype(np.float64)
    return float(np.mean(np.sum(d * d, axis=(1, 2, 3))))


def dsm_loss_and_grads(net: EnergyNet, batch: np.ndarray, sigma: float, seed):
    """Loss plus its gradient with respect to every network parameter."""
    dtype = net.params.dtype
    q = sigma * _noise(seed, batch.shape, dtype)
    weights = net._weights(requires_grad=True)
    xt = ad.Tensor((batch + q).astype(dtype), requires_grad=True)
    h = net.grad_graph(weights, xt)
    d = h - q
    scale = np.asarray(1.0 / batch.shape[0], dtype=dtype)
    loss = (d * d).sum() * scale
    names = net.params.names()
    grads = ad.grad(loss, [weights[n] for n in names])
    return float(loss.data), {n: g.data for n, g in zip(names, grads)}


def validation_loss(net: EnergyNet, dataset: SliceDataset, cfg: TrainConfig) -> float:
    """Deterministic DSM loss: fixed noise levels and noise draws per batch."""
    rng = np.random.default_rng([cfg.seed, 7919])
    total, count = 0.0, 0
    for b, batch in enumerate(dataset.batches(cfg.batch_size)):
        sigma = sample_sigma(rng, cfg.sigma)
        total += dsm_loss(net, batch, sigma, [cfg.seed, 104729, b]) * len(batch)
        count += len(batch)
    return total / count


@dataclass
class TrainResult:
    net: EnergyNet
    history: list[tuple[int, float, float]]
    best_epoch: int


def train(
    dataset: SliceDataset,
    config: TrainConfig,
    val_dataset: SliceDataset | None = None,
    net: EnergyNet | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Adam on the DSM loss, one noise level per mini-batch.

    Returns the parameters with the lowest validation loss (training loss when
    no validation set is given) and the per-epoch (epoch, train, val) history.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if net is None:
        net = EnergyNet.create(dataset.channels // 2, config.widths, config.seed)
    val_dataset = val_dataset if val_dataset is not None and len(val_dataset) else None
    rng = np.random.default_rng(config.seed)
    history = []
    best, best_loss, best_epoch = net.params.copy(), math.inf, 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for b, batch in enumerate(dataset.batches(config.batch_size, rng)):
            if config.augment:
                batch = augment_batch(batch, rng)
            sigma = sample_sigma(rng, config.sigma)
            loss, grads = dsm_loss_and_grads(net, batch, sigma, [config.seed, epoch, b])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            adam_step(net.params, grads, lr=config.lr)
            total += loss * len(batch)
            count += len(batch)
        train_loss = total / count
        val_loss = validation_loss(net, val_dataset, config) if val_dataset else train_loss
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, "validation loss")
        history.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best, best_loss, best_epoch = net.params.copy(), val_loss, epoch
    return TrainResult(EnergyNet(net.spec, best), history, best_epoch)


def format_loss_log(history) -> str:
    lines = ["# epoch train_loss val_loss"]
    lines += [f"{e} {t:.9g} {v:.9g}" for e, t, v in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Lipschitz constant of H


def estimate_lipschitz(net, probes: np.ndarray, iters: int = 20, seed: int = 0, rel_step=1e-4):
    """Largest spectral norm of the Jacobian of H over the probe slices.

    Power iteration on J^T J per probe: J v from a central finite difference of
    H, J^T w from an exact vector-Jacobian product. The running maximum of
    ||J v_k|| (unit v_k) is returned, so the estimate never decreases with
    ``iters``. ``net`` may be any object with ``grads`` and ``hessian_vjp``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if isinstance(net, EnergyNet):
        net = net.as_dtype(np.float64)
    x = np.asarray(probes, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    axes = tuple(range(1, x.ndim))

    def unit(v):
        return v / np.sqrt(np.sum(v * v, axis=axes, keepdims=True))

    v = unit(np.random.default_rng(seed).standard_normal(x.shape))
    scale = np.sqrt(np.sum(x * x, axis=axes, keepdims=True))
    eps = rel_step * np.maximum(scale, 1.0)
    best = np.zeros(x.shape[0])
    for _ in range(iters):
        jv = (net.grads(x + eps * v) - net.grads(x - eps * v)) / (2 * eps)
        best = np.maximum(best, np.sqrt(np.sum(jv * jv, axis=axes)))
        v = unit(net.hessian_vjp(x, jv))
    return float(best.max())


def solver_lipschitz(l_hat: float, factor: float = 2.0) -> float:
    """Majorization constant used by the solver: factor * L_hat, rounded up."""
    return float(math.ceil(factor * l_hat - 1e-9))
