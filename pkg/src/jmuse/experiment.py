"""Pipeline stages shared by the command line and the end-to-end checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, train_config
from .energy import EnergyNet, extract_slices, to_channels
from .forward_model import (
    AcquisitionModel,
    KSpaceData,
    add_noise,
    golden_angle_trajectory,
    simulate_coil_maps,
    simulate_kspace,
    subset_blocks,
)
from .metrics import MetricReport, psnr
from .phantom import PhantomSpec, phantom_volume
from .solver import ReconConfig, ReconResult, independent_reconstruct, mm_reconstruct
from .training import SliceDataset, TrainResult, estimate_lipschitz, solver_lipschitz, train
from .wavelet import WaveletConfig, wavelet_reconstruct

log = logging.getLogger(__name__)

METHODS = ("joint", "independent", "wavelet")


# ---------------------------------------------------------------------------
# data


def phantom_spec(cfg: ExperimentConfig, seed: int) -> PhantomSpec:
    p = cfg.phantom
    return PhantomSpec(p.grid, seed, p.n_ellipsoids, p.t1_range, p.pd_range)


def make_volume(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    return phantom_volume(phantom_spec(cfg, seed), cfg.phantom.tis)


def test_seed(cfg: ExperimentConfig) -> int:
    return cfg.seeds.test_phantom_base + cfg.seeds.run


def make_coils(cfg: ExperimentConfig) -> np.ndarray:
    return simulate_coil_maps(cfg.n_coils, cfg.phantom.grid)


def make_trajectories(cfg: ExperimentConfig):
    t = cfg.trajectory
    full = golden_angle_trajectory(
        t.n_blocks, t.spokes_per_block, t.samples_per_spoke, t.mode, t.echo_spacing, t.first_echo
    )
    return subset_blocks(full, t.keep_blocks, t.ti_windows)


def make_acquisition(cfg: ExperimentConfig, coils: np.ndarray | None = None) -> AcquisitionModel:
    if coils is None:
        coils = make_coils(cfg)
    return AcquisitionModel.from_trajectories(coils, make_trajectories(cfg))


def simulate(cfg: ExperimentConfig, truth: np.ndarray, acq: AcquisitionModel, noise_seed: int) -> KSpaceData:
    return add_noise(simulate_kspace(truth, acq, noise_seed), cfg.eta_noise, noise_seed)


def acquisition_for(data: KSpaceData, coils: np.ndarray) -> AcquisitionModel:
    if tuple(coils.shape[1:]) != tuple(data.grid):
        raise ValueError(f"coil grid {coils.shape[1:]} does not match k-space grid {data.grid}")
    return AcquisitionModel(coils, list(data.points))


# ---------------------------------------------------------------------------
# training and Lipschitz constants


def training_sets(cfg: ExperimentConfig, joint: bool):
    vols = [make_volume(cfg, s) for s in cfg.seeds.train_phantoms]
    val = [make_volume(cfg, cfg.seeds.val_phantom)]
    per_contrast = not joint
    return (
        SliceDataset.from_volumes(vols, per_contrast=per_contrast),
        SliceDataset.from_volumes(val, per_contrast=per_contrast),
    )


def train_model(cfg: ExperimentConfig, joint: bool, on_epoch=None) -> TrainResult:
    ds, val = training_sets(cfg, joint)
    return train(ds, train_config(cfg), val, on_epoch=on_epoch)


def lipschitz_probes(cfg: ExperimentConfig, net: EnergyNet) -> np.ndarray:
    """Noisy validation slices at noise levels spread over the training range."""
    vol = make_volume(cfg, cfg.seeds.val_phantom)
    if net.n_contrasts == 1:
        vol = vol[:1]
    n = cfg.lipschitz.n_probes
    rng = np.random.default_rng([cfg.seeds.lipschitz, 1])
    slices = []
    for i in range(n):
        d = "zyx"[i % 3]
        stack = extract_slices(vol, d)
        m = stack.shape[0] // 2 + int(rng.integers(-stack.shape[0] // 4, stack.shape[0] // 4 + 1))
        slices.append(to_channels(stack[m : m + 1])[0])
    x = np.stack(slices)
    lo, hi = cfg.train.sigma
    sig = np.geomspace(lo, hi, n) if n > 1 else np.array([lo])
    return x + sig[:, None, None, None] * rng.standard_normal(x.shape)


def lipschitz_for(cfg: ExperimentConfig, net: EnergyNet) -> tuple[float, float]:
    """(L_hat, L used by the solver)."""
    l_hat = estimate_lipschitz(net, lipschitz_probes(cfg, net), cfg.lipschitz.iters, cfg.seeds.lipschitz)
    return l_hat, solver_lipschitz(l_hat, cfg.lipschitz.factor)


# ---------------------------------------------------------------------------
# reconstruction


def recon_config(cfg: ExperimentConfig, L: float | None = None, method: str = "joint") -> ReconConfig:
    r = cfg.recon
    L = r.L if r.L is not None else L
    if L is None:
        raise ValueError("no Lipschitz constant: set recon.L or run the lipschitz stage")
    eta = r.eta_independent if method == "independent" and r.eta_independent is not None else r.eta
    return ReconConfig(eta, L, r.n_outer, r.n_cg, r.cg_tol, r.init)


def wavelet_config(cfg: ExperimentConfig, lam: float) -> WaveletConfig:
    return WaveletConfig(lam, cfg.wavelet.levels, cfg.wavelet.n_iters)


def select_lambda(cfg: ExperimentConfig, acq: AcquisitionModel) -> tuple[float, dict]:
    """Grid search of the wavelet weight on the validation phantom (mean PSNR)."""
    if cfg.wavelet.lam is not None:
        return cfg.wavelet.lam, {}
    truth = make_volume(cfg, cfg.seeds.val_phantom)
    data = simulate(cfg, truth, acq, cfg.seeds.val_phantom)
    scores = {}
    for lam in cfg.wavelet.lam_grid:
        rec = wavelet_reconstruct(data, acq, wavelet_config(cfg, lam))
        scores[lam] = MetricReport.compute("wavelet", truth, rec).mean_psnr
        log.info("wavelet lam %g mean psnr %.3f", lam, scores[lam])
    return max(scores, key=scores.get), scores


@dataclass
class MethodOutput:
    method: str
    volume: np.ndarray
    traces: list  # list of TraceEntry lists (one per contrast for independent)


def reconstruct(
    method: str,
    cfg: ExperimentConfig,
    data: KSpaceData,
    acq: AcquisitionModel,
    net: EnergyNet | None = None,
    L: float | None = None,
    lam: float | None = None,
) -> MethodOutput:
    if method == "joint":
        res: ReconResult = mm_reconstruct(data, acq, net, recon_config(cfg, L))
        return MethodOutput(method, res.gamma, [res.trace])
    if method == "independent":
        vol, traces = independent_reconstruct(data, acq, net, recon_config(cfg, L, method))
        return MethodOutput(method, vol, traces)
    if method == "wavelet":
        if lam is None:
            raise ValueError("wavelet reconstruction needs a lambda")
        return MethodOutput(method, wavelet_reconstruct(data, acq, wavelet_config(cfg, lam)), [])
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def contrast_psnr(truth: np.ndarray, rec: np.ndarray) -> list[float]:
    return [psnr(t, r) for t, r in zip(truth, rec)]
