import math

import numpy as np
import pytest

from conftest import random_energy_net
from jmuse import training
from jmuse.energy import EnergyNet
from jmuse.phantom import PhantomSpec, phantom_volume
from jmuse.training import (
    PUBLISHED_LR,
    SliceDataset,
    TrainConfig,
    TrainingDiverged,
    augment_batch,
    dsm_loss,
    estimate_lipschitz,
    format_loss_log,
    sample_sigma,
    solver_lipschitz,
    train,
)


def _tiny_volumes(n=2, grid=(8, 8, 8)):
    return [phantom_volume(PhantomSpec(grid=grid, seed=s, n_ellipsoids=4)) for s in range(n)]


# ---------------------------------------------------------------------------
# loss


def test_dsm_zero_init_is_mean_squared_norm(rng):
    net = EnergyNet.create(1).as_dtype(np.float64)
    x = rng.standard_normal((3, 2, 8, 8))
    expect = np.mean(np.sum(x**2, axis=(1, 2, 3)))
    assert dsm_loss(net, x, 0.1, 5) == pytest.approx(expect, rel=1e-10)


def test_dsm_zero_batch_is_noise_energy():
    net = EnergyNet.create(1).as_dtype(np.float64)
    # with H == 0 the loss is ||sigma Q||^2, whose mean is sigma^2 per element
    zero = np.zeros((2, 2, 8, 8))

    class ZeroH:
        params = net.params

        def grads(self, xb):
            return np.zeros_like(xb)

    vals = [dsm_loss(ZeroH(), zero, 0.1, s) for s in range(100)]
    expect = 0.01 * zero[0].size
    assert abs(np.mean(vals) - expect) <= 0.05 * expect
    # with identity H the noise cancels exactly
    assert dsm_loss(net, zero, 0.1, 3) == 0.0


def test_dsm_deterministic_per_seed(rng):
    net = random_energy_net(1, seed=1, dtype=np.float32)
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    assert dsm_loss(net, x, 0.05, [1, 2]) == dsm_loss(net, x, 0.05, [1, 2])
    assert dsm_loss(net, x, 0.05, [1, 2]) != dsm_loss(net, x, 0.05, [1, 3])


def test_dsm_rejects_nonpositive_sigma(rng):
    with pytest.raises(ValueError):
        dsm_loss(EnergyNet.create(1), np.zeros((1, 2, 8, 8)), 0.0, 0)


def test_dsm_parameter_gradients_match_finite_differences(rng):
    net = random_energy_net(1, seed=2, widths=(4, 8))
    x = rng.standard_normal((2, 2, 8, 8))
    loss, grads = training.dsm_loss_and_grads(net, x, 0.1, 9)
    assert loss == pytest.approx(dsm_loss(net, x, 0.1, 9), rel=1e-12)
    name = net.params.names()[0]
    w = net.params[name]
    d = rng.standard_normal(w.shape)
    h = 1e-6
    w += h * d
    up = dsm_loss(net, x, 0.1, 9)
    w -= 2 * h * d
    down = dsm_loss(net, x, 0.1, 9)
    w += h * d
    assert np.sum(grads[name] * d) == pytest.approx((up - down) / (2 * h), rel=1e-5)


# ---------------------------------------------------------------------------
# noise schedule


def test_sigma_degenerate_range(rng):
    assert all(sample_sigma(rng, (0.05, 0.05)) == 0.05 for _ in range(10))


def test_sigma_log_uniform_median(rng):
    draws = np.array([sample_sigma(rng, (0.01, 0.2)) for _ in range(100_000)])
    assert draws.min() >= 0.01 and draws.max() <= 0.2
    assert abs(np.median(draws) - math.sqrt(0.01 * 0.2)) <= 0.05 * math.sqrt(0.002)
    # log-uniform: log draws are uniform, so their mean sits mid-way
    assert np.mean(np.log(draws)) == pytest.approx(0.5 * math.log(0.002), abs=0.01)


def test_sigma_rejects_bad_schedule(rng):
    with pytest.raises(ValueError):
        sample_sigma(rng, (0.2, 0.01))
    with pytest.raises(ValueError):
        TrainConfig(sigma=(0.2, 0.01))


# ---------------------------------------------------------------------------
# config and data


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.lr == PUBLISHED_LR == 1e-4
    assert cfg.epochs == 40 and cfg.batch_size == 16 and cfg.sigma == (0.01, 0.2)
    for bad in ({"epochs": 0}, {"lr": 0.0}, {"batch_size": 0}, {"sigma": (0.0, 0.1)}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_slice_dataset_counts():
    vols = _tiny_volumes(2, (8, 12, 16))
    ds = SliceDataset.from_volumes(vols)
    assert len(ds) == 2 * (8 + 12 + 16) and ds.channels == 8
    single = SliceDataset.from_volumes(vols, per_contrast=True)
    assert len(single) == 4 * len(ds) and single.channels == 2
    seen = sum(len(b) for b in ds.batches(5, np.random.default_rng(0)))
    assert seen == len(ds)


def test_augmentation_is_an_isometry_preserving_relative_phase(rng):
    s = rng.standard_normal((6, 2, 8, 8)) + 1j * rng.standard_normal((6, 2, 8, 8))
    x = np.stack([s.real, s.imag], axis=2).reshape(6, 4, 8, 8)
    out = augment_batch(x, rng)
    np.testing.assert_allclose(np.sum(out**2, axis=(1, 2, 3)), np.sum(x**2, axis=(1, 2, 3)))
    o = out[:, 0::2] + 1j * out[:, 1::2]
    # conj(c0) * c1 is phase-invariant; its sum is invariant to flips too
    np.testing.assert_allclose(
        np.sum(np.conj(o[:, 0]) * o[:, 1], axis=(1, 2)),
        np.sum(np.conj(s[:, 0]) * s[:, 1], axis=(1, 2)),
        atol=1e-10,
    )


# ---------------------------------------------------------------------------
# training loop


def _small_train(seed=0, epochs=3):
    ds = SliceDataset.from_volumes(_tiny_volumes(2))
    val = SliceDataset.from_volumes(_tiny_volumes(1, (8, 8, 8))[:1])
    cfg = TrainConfig(epochs=epochs, lr=1e-3, batch_size=8, seed=seed, widths=(4, 8))
    return train(ds, cfg, val)


def test_training_deterministic_and_reduces_loss():
    a, b = _small_train(), _small_train()
    for name in a.net.params.names():
        assert a.net.params[name].tobytes() == b.net.params[name].tobytes()
    assert [h[0] for h in a.history] == [1, 2, 3]
    assert a.history[-1][1] < a.history[0][1]
    assert a.best_epoch == int(np.argmin([h[2] for h in a.history])) + 1


def test_training_returns_best_validation_checkpoint():
    res = _small_train(epochs=2)
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=8, seed=0, widths=(4, 8))
    val = SliceDataset.from_volumes(_tiny_volumes(1, (8, 8, 8))[:1])
    best_val = min(h[2] for h in res.history)
    assert training.validation_loss(res.net, val, cfg) == pytest.approx(best_val, rel=1e-6)


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(SliceDataset(), TrainConfig(epochs=1))


def test_training_divergence_reports_epoch(monkeypatch):
    def nan_loss(net, batch, sigma, seed):
        return float("nan"), {n: np.zeros_like(v) for n, v in net.params.items()}

    monkeypatch.setattr(training, "dsm_loss_and_grads", nan_loss)
    ds = SliceDataset.from_volumes(_tiny_volumes(1))
    with pytest.raises(TrainingDiverged) as err:
        train(ds, TrainConfig(epochs=2, widths=(4, 8)))
    assert err.value.epoch == 1
    assert "epoch 1" in str(err.value)


def test_loss_log_format():
    text = format_loss_log([(1, 2.0, 3.0), (2, 1.5, 2.5)])
    lines = text.strip().splitlines()
    assert lines[0].startswith("#") and lines[1:] == ["1 2 3", "2 1.5 2.5"]


# ---------------------------------------------------------------------------
# Lipschitz estimation


def test_lipschitz_identity_gradient(rng):
    probes = rng.standard_normal((3, 2, 8, 8))
    assert estimate_lipschitz(EnergyNet.create(1), probes, 10) == pytest.approx(1.0, abs=1e-3)


class _LinearH:
    def __init__(self, m, shape):
        self.m, self.shape = m, shape

    def grads(self, x):
        return (x.reshape(len(x), -1) @ self.m.T).reshape(x.shape)

    def hessian_vjp(self, x, w):
        return (w.reshape(len(w), -1) @ self.m).reshape(w.shape)


def test_lipschitz_recovers_known_singular_value(rng):
    shape = (1, 2, 4, 4)
    n = 32
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = np.linspace(0.1, 2.0, n)
    s[0] = 3.7
    lin = _LinearH((u * s) @ v.T, shape)
    assert estimate_lipschitz(lin, rng.standard_normal(shape), 50) == pytest.approx(3.7, abs=1e-2)


def test_lipschitz_monotone_in_iterations(rng):
    net = random_energy_net(1, seed=4)
    probes = rng.standard_normal((2, 2, 8, 8))
    vals = [estimate_lipschitz(net, probes, k, seed=1) for k in (1, 3, 6, 12)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_solver_lipschitz_rounds_up():
    assert solver_lipschitz(1.88, 1.0) == 2.0
    assert solver_lipschitz(7.0) == 14.0
    assert solver_lipschitz(6.6) == 14.0
