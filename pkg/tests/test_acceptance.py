"""End-to-end acceptance checks, one test per criterion.

The desk-scale models (criteria 4, 7, 8) are trained with the default
experiment configuration and cached in ``$JMUSE_ACCEPTANCE_DIR`` (default
``<repo>/.acceptance``) keyed by a hash of the settings that affect training,
so repeated runs skip the 25-30 minutes of training. Delete the directory to
retrain from scratch. Each test appends one PASS/FAIL line that is printed in
the terminal summary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from jmuse import experiment as ex
from jmuse.config import ExperimentConfig, load_config, train_config
from jmuse.energy import (
    DIRECTIONS,
    EnergyNet,
    denoised_volumes,
    energy,
    energy_grad,
    extract_slices,
    insert_slices,
    to_channels,
)
from jmuse.fileio import read_kspace, read_volume, write_kspace, write_volume
from jmuse.forward_model import (
    PUBLISHED_TI_WINDOWS,
    AcquisitionModel,
    apply_A,
    apply_AH,
    golden_angle_trajectory,
    simulate_coil_maps,
    subset_blocks,
)
from jmuse.metrics import MetricReport, psnr
from jmuse.nn.network import NetworkSpec, init_params, load_checkpoint, save_checkpoint
from jmuse.phantom import PUBLISHED_TIS
from jmuse.solver import PUBLISHED_N_OUTER, ReconConfig, cg_solve
from jmuse.training import PUBLISHED_LR, TrainConfig, estimate_lipschitz, format_loss_log, solver_lipschitz

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("JMUSE_ACCEPTANCE_DIR", ROOT / ".acceptance"))
SEEDS = (0, 1, 2)


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def _cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# desk-scale models and reconstructions (shared by criteria 4, 7, 8)


def _train_key(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("phantom", "train", "lipschitz")}
    keep["seeds"] = {k: v for k, v in d["seeds"].items() if k != "run"}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def _trained(cfg: ExperimentConfig, joint: bool) -> tuple[EnergyNet, float]:
    """Trained net and its training time in seconds (cached on disk)."""
    d = CACHE / _train_key(cfg)
    d.mkdir(parents=True, exist_ok=True)
    name = "joint" if joint else "single"
    path = d / f"{name}.men"
    if path.is_file():
        _, _, extra = load_checkpoint(path)
        return EnergyNet.load(path), float(extra["train_seconds"])
    t0 = time.perf_counter()
    res = ex.train_model(cfg, joint)
    seconds = time.perf_counter() - t0
    res.net.save(path, train_seconds=seconds, best_epoch=res.best_epoch)
    (d / f"loss_{name}.txt").write_text(format_loss_log(res.history))
    (d / "config.yaml").write_text(cfg.dump())
    return res.net, seconds


@pytest.fixture(scope="module")
def desk():
    cfg = load_config()
    joint, t_joint = _trained(cfg, True)
    single, t_single = _trained(cfg, False)
    l_joint = ex.lipschitz_for(cfg, joint)
    l_single = ex.lipschitz_for(cfg, single)
    return {
        "cfg": cfg,
        "joint": joint,
        "single": single,
        "train_seconds": t_joint + t_single,
        "L": {"joint": l_joint, "independent": l_single},
    }


@pytest.fixture(scope="module")
def experiments(desk):
    """Joint, independent and wavelet recoveries of the held-out phantoms."""
    cfg = desk["cfg"]
    acq = ex.make_acquisition(cfg)
    t0 = time.perf_counter()
    lam, scores = ex.select_lambda(cfg, acq)
    runs = []
    for seed in SEEDS:
        c = cfg.with_seed(seed)
        truth = ex.make_volume(c, ex.test_seed(c))
        data = ex.simulate(c, truth, acq, c.seeds.run)
        outs = {
            "joint": ex.reconstruct("joint", c, data, acq, desk["joint"], desk["L"]["joint"][1]),
            "independent": ex.reconstruct(
                "independent", c, data, acq, desk["single"], desk["L"]["independent"][1]
            ),
            "wavelet": ex.reconstruct("wavelet", c, data, acq, lam=lam),
        }
        reports = {m: MetricReport.compute(m, truth, o.volume) for m, o in outs.items()}
        runs.append({"seed": seed, "outs": outs, "reports": reports})
    return {"runs": runs, "lam": lam, "scores": scores, "seconds": time.perf_counter() - t0, "acq": acq}


# ---------------------------------------------------------------------------
# 1. adjointness


def test_criterion_1_adjointness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for mode, grid, blocks in (("2d", (32, 32), 8), ("3d", (16, 16, 16), 6)):
        coils = simulate_coil_maps(3, grid)
        pts = golden_angle_trajectory(blocks, 6, 2 * grid[0] + 1 - 2, mode).points()
        w = 0.0
        for _ in range(100):
            x = _cplx(rng, grid)
            y = _cplx(rng, (3, pts.shape[0]))
            lhs = np.vdot(y, apply_A(x, coils, pts))
            rhs = np.vdot(apply_AH(y, coils, pts), x)
            w = max(w, abs(lhs - rhs) / abs(lhs))
        worst[mode] = w
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and secs <= 60
    report(1, ok, f"max rel. error 2d {worst['2d']:.2e}, 3d {worst['3d']:.2e} over 100 trials each ({secs:.1f} s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient fidelity


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    spec = NetworkSpec(8, (16, 32))
    params = init_params(spec, seed=3, zero_last=False)
    last = params[params.names()[-1]]
    last *= 0.05
    net64 = EnergyNet(spec, params.astype(np.float64))
    net32 = net64.as_dtype(np.float32)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        x = 0.5 * rng.standard_normal((8, 16, 16))
        v = rng.standard_normal(x.shape)
        g = energy_grad(net32, x.astype(np.float32)).astype(np.float64)
        h = 1e-6
        fd = (energy(net64, x + h * v) - energy(net64, x - h * v)) / (2 * h)
        worst = max(worst, abs(float(np.sum(g * v)) - fd) / abs(fd))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-3 and secs <= 60
    report(2, ok, f"max rel. error {worst:.2e} (32-bit gradient vs central differences, 20 slices, {secs:.1f} s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. CG oracle


def test_criterion_3_cg_oracle():
    rng = np.random.default_rng(3)
    grid = (8, 8)
    acq = AcquisitionModel(np.ones((1,) + grid), [golden_angle_trajectory(6, 4, 11, "2d").points()])
    B = [_cplx(rng, (1, acq.points[0].shape[0]))]
    z_bar = _cplx(rng, (1,) + grid)
    eta, L = 1.3, 2.0
    eye = np.eye(64).reshape((64, 1) + grid)
    A = np.stack([acq.forward(e)[0].ravel() for e in eye], axis=1)
    M = A.conj().T @ A / eta**2 + 3 * L * np.eye(64)
    rhs = A.conj().T @ B[0].ravel() / eta**2 + 3 * L * z_bar.ravel()
    expect = np.linalg.solve(M, rhs)
    got = cg_solve(acq, B, z_bar, eta, L, n_cg=500, tol=1e-15).x.ravel()
    err = float(np.max(np.abs(got - expect)))
    report(3, err <= 1e-6, f"max abs. difference {err:.2e} vs dense solve (8x8 single coil)")
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# 4. MM monotonicity


def test_criterion_4_mm_monotonicity(desk, experiments):
    out = experiments["runs"][0]["outs"]["joint"]
    totals = [t.total for t in out.traces[0]]
    steps = [(b - a) / abs(a) for a, b in zip(totals, totals[1:])]
    worst = max(steps)
    ok = len(totals) == PUBLISHED_N_OUTER + 1 and worst <= 1e-6
    l_hat, L = desk["L"]["joint"]
    report(
        4, ok,
        f"{len(totals) - 1} outer iterations, worst relative step {worst:+.2e} "
        f"(L = {L:g} from L_hat = {l_hat:.3f}), cost {totals[0]:.4g} -> {totals[-1]:.4g}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 5. hyperparameter defaults


def test_criterion_5_hyperparameters():
    cfg = ExperimentConfig()
    rc = ReconConfig()
    t = golden_angle_trajectory(224, 385, 1, "3d")
    full = subset_blocks(t, 224)
    kept = subset_blocks(t, 56)
    checks = {
        "n_outer=30": rc.n_outer == 30 and cfg.recon.n_outer == 30 and PUBLISHED_N_OUTER == 30,
        "L rule 1.88->2": solver_lipschitz(1.88, 1.0) == 2.0 and cfg.lipschitz.factor == 2.0,
        "lr=1e-4": TrainConfig().lr == 1e-4 == PUBLISHED_LR and train_config(cfg).lr == 1e-4,
        "keep 56/224 -> 4x": cfg.trajectory.keep_blocks == 56
        and cfg.trajectory.n_blocks == 224
        and all(a.n_spokes == 4 * b.n_spokes for a, b in zip(full, kept)),
        "TI windows": cfg.trajectory.ti_windows == PUBLISHED_TI_WINDOWS
        == ((314.56, 417.04), (558.56, 758.64), (758.64, 1056.32), (1583.36, 1881.04))
        and cfg.phantom.tis == PUBLISHED_TIS == (365.8, 658.6, 907.48, 1732.2),
    }
    bad = [k for k, v in checks.items() if not v]
    report(5, not bad, "all defaults match" if not bad else f"mismatch: {', '.join(bad)}")
    assert not bad


# ---------------------------------------------------------------------------
# 6. Lipschitz estimator


def test_criterion_6_lipschitz():
    rng = np.random.default_rng(6)
    ident = estimate_lipschitz(EnergyNet.create(4), rng.standard_normal((4, 8, 16, 16)), 20)

    class Linear:
        def __init__(self, m):
            self.m = m

        def grads(self, x):
            return (x.reshape(len(x), -1) @ self.m.T).reshape(x.shape)

        def hessian_vjp(self, x, w):
            return (w.reshape(len(w), -1) @ self.m).reshape(w.shape)

    n = 2 * 8 * 8
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = rng.uniform(0.0, 2.5, n)
    s[17] = 3.7
    lin = estimate_lipschitz(Linear((u * s) @ v.T), rng.standard_normal((1, 2, 8, 8)), 100)
    ok = abs(ident - 1.0) <= 1e-3 and abs(lin - 3.7) <= 1e-2
    report(6, ok, f"identity gradient -> {ident:.6f}; linear map (top singular value 3.7) -> {lin:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. denoiser competence


def test_criterion_7_denoising(desk):
    cfg = desk["cfg"]
    net = desk["joint"]
    lo, hi = cfg.train.sigma
    sigma = math.sqrt(lo * hi)  # log-uniform median of the training range
    held_out = [ex.make_volume(cfg, ex.test_seed(cfg.with_seed(s))) for s in SEEDS]
    rng = np.random.default_rng(7)
    gains = []
    for vol in held_out:
        for d in DIRECTIONS:
            x = to_channels(extract_slices(vol, d)).astype(np.float32)
            y = x + sigma * rng.standard_normal(x.shape).astype(np.float32)
            den = y - net.grads(y)
            for xi, yi, di in zip(x, y, den):
                if not np.any(xi):
                    continue
                gains.append(psnr(xi, di) - psnr(xi, yi))
    gain = float(np.mean(gains))
    minutes = desk["train_seconds"] / 60
    ok = gain >= 2.0 and minutes <= 60
    report(
        7, ok,
        f"one-step gain {gain:+.2f} dB at sigma {sigma:.4f} over {len(gains)} held-out slices; "
        f"training {minutes:.1f} min (joint + single-contrast)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. central claim (relative form)


def test_criterion_8_joint_beats_independent_and_wavelet(experiments):
    runs = experiments["runs"]

    def avg(method, key):
        return np.mean([getattr(r["reports"][method], key) for r in runs], axis=0)

    p = {m: avg(m, "psnr") for m in ex.METHODS}
    s = {m: avg(m, "ssim") for m in ex.METHODS}
    a = p["joint"].mean() >= p["independent"].mean() + 0.5
    b = p["joint"][0] > p["independent"][0] and s["joint"][0] > s["independent"][0]
    c = p["joint"].mean() >= p["wavelet"].mean() + 1.0
    spokes = [q.shape[0] for q in experiments["acq"].points]
    detail = (
        f"mean PSNR joint {p['joint'].mean():.2f} / independent {p['independent'].mean():.2f} / "
        f"wavelet {p['wavelet'].mean():.2f} dB (lambda {experiments['lam']:g}); contrast 1 PSNR "
        f"{p['joint'][0]:.2f} vs {p['independent'][0]:.2f}, SSIM {s['joint'][0]:.4f} vs "
        f"{s['independent'][0]:.4f}; (a) {a} (b) {b} (c) {c}; samples/contrast {spokes}; "
        f"{experiments['seconds'] / 60:.1f} min"
    )
    for m in ex.METHODS:
        detail += f"\n    {m:<11} PSNR " + " ".join(f"{v:6.2f}" for v in p[m])
        detail += "  SSIM " + " ".join(f"{v:.4f}" for v in s[m])
    ok = a and b and c and experiments["seconds"] <= 30 * 60
    report(8, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 9. structural identities


def test_criterion_9_structural_identities(tmp_path):
    rng = np.random.default_rng(9)
    g = _cplx(rng, (4, 8, 12, 16))
    partition = all(insert_slices(extract_slices(g, d), d).tobytes() == g.tobytes() for d in DIRECTIONS)
    # explicit slice-by-slice accumulation as well
    acc = np.zeros_like(g)
    for m in range(g.shape[2]):
        acc[:, :, m] += g[:, :, m]
    partition = partition and acc.tobytes() == g.tobytes()

    spec = NetworkSpec(8, (8, 16))
    params = init_params(spec, seed=1, zero_last=False)
    net = EnergyNet(spec, params.astype(np.float64))
    den = denoised_volumes(net, g, 4.0)
    mean_ok = np.array_equal(den.z_bar, (den.z_x + den.z_y + den.z_z) / 3.0)

    vol = g.astype(np.complex64)
    write_volume(tmp_path / "v.mcv", vol)
    vol_ok = read_volume(tmp_path / "v.mcv").tobytes() == vol.tobytes()
    data = ex.simulate(
        dataclasses.replace(ExperimentConfig(), eta_noise=0.1),
        _cplx(rng, (1, 8, 8, 8)),
        AcquisitionModel(simulate_coil_maps(2, (8, 8, 8)), [golden_angle_trajectory(3, 3, 9, "3d").points()]),
        5,
    )
    write_kspace(tmp_path / "k.mck", data)
    back = read_kspace(tmp_path / "k.mck")
    write_kspace(tmp_path / "k2.mck", back)
    k_ok = (tmp_path / "k.mck").read_bytes() == (tmp_path / "k2.mck").read_bytes() and all(
        np.array_equal(a.astype(np.complex64), b) for a, b in zip(data.samples, back.samples)
    )
    save_checkpoint(tmp_path / "n.men", spec, params)
    spec2, params2, _ = load_checkpoint(tmp_path / "n.men")
    men_ok = spec2 == spec and all(params[k].tobytes() == params2[k].tobytes() for k in params.names())
    ok = partition and mean_ok and vol_ok and k_ok and men_ok
    report(
        9, ok,
        f"partition {partition}, Zbar mean {mean_ok}, MCV1 {vol_ok}, MCK1 {k_ok}, MEN1 {men_ok}",
    )
    assert ok
