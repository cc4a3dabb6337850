import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_energy_net(n_contrasts, seed=0, widths=(8, 16), dtype=np.float64, gain=0.02):
    """Energy net with every layer randomly initialized; the last one scaled by ``gain``."""
    from jmuse.energy import EnergyNet
    from jmuse.nn.network import NetworkSpec, init_params

    spec = NetworkSpec(2 * n_contrasts, tuple(widths))
    params = init_params(spec, seed, zero_last=False).astype(dtype)
    last = params[params.names()[-1]]
    last *= gain
    return EnergyNet(spec, params)


class ZeroPrior:
    """Stand-in energy with H identically zero."""

    def __init__(self, n_contrasts):
        self.channels = 2 * n_contrasts
        self.n_contrasts = n_contrasts

    def energies(self, xb):
        return np.zeros(xb.shape[0])

    def grads(self, xb):
        return np.zeros_like(xb)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
