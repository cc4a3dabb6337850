"""MAP reconstruction by majorize-minimize with conjugate-gradient inner solves.

Cost:  C(G) = ||A G - B||^2 / (2 eta^2) + sum over z/y/x slices of E(slice)

Each outer iteration replaces the slice energies by quadratic upper bounds
around the current iterate, which collapses them to 3L/2 ||G - Zbar||^2 where
Zbar is the mean of the three directional gradient-step volumes. Minimizing the
surrogate is the linear system

    (A^H A / eta^2 + 3L I) G = A^H B / eta^2 + 3L Zbar

solved with CG, warm-started at the current iterate. (The 1/eta^2 on the left
is the derivative of the 1/(2 eta^2) data term; no extra factor is involved.)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .energy import denoised_volumes, joint_energy_3d
from .forward_model import AcquisitionModel, KSpaceData

log = logging.getLogger(__name__)

PUBLISHED_ETA = 25.0
PUBLISHED_L = 2.0
PUBLISHED_N_OUTER = 30


class SolverAborted(FloatingPointError):
    def __init__(self, iteration: int, message: str = "non-finite cost"):
        super().__init__(f"{message} at outer iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class ReconConfig:
    eta: float = 1.0
    L: float = PUBLISHED_L
    n_outer: int = PUBLISHED_N_OUTER
    n_cg: int = 10
    cg_tol: float = 1e-5
    init: str = "adjoint"

    def __post_init__(self):
        if self.eta <= 0 or self.L <= 0:
            raise ValueError("eta and L must be positive")
        if self.n_outer < 1 or self.n_cg < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.init not in ("zero", "adjoint"):
            raise ValueError(f"unknown initializer {self.init!r}")


def _samples(B) -> list[np.ndarray]:
    return B.samples if isinstance(B, KSpaceData) else list(B)


def data_term(gamma: np.ndarray, B, acq: AcquisitionModel, eta: float) -> float:
    """||A G - B||^2 / (2 eta^2), evaluated with explicit forward transforms."""
    res = [a - b for a, b in zip(acq.forward(gamma), _samples(B))]
    return sum(float(np.vdot(r, r).real) for r in res) / (2.0 * eta**2)


def map_cost(gamma: np.ndarray, B, acq: AcquisitionModel, net, eta: float) -> float:
    return data_term(gamma, B, acq, eta) + joint_energy_3d(net, gamma)


class _DataTerm:
    """Data misfit through the Toeplitz normal operator (no forward transforms)."""

    def __init__(self, B, acq: AcquisitionModel):
        samples = _samples(B)
        self.acq = acq
        self.aHb = acq.adjoint(samples)
        self.bnorm = sum(float(np.vdot(b, b).real) for b in samples)

    def value(self, gamma, normal_gamma=None) -> float:
        if normal_gamma is None:
            normal_gamma = self.acq.normal(gamma)
        quad = float(np.vdot(gamma, normal_gamma).real)
        lin = float(np.vdot(gamma, self.aHb).real)
        return max(quad - 2.0 * lin + self.bnorm, 0.0)


class CGResult(NamedTuple):
    x: np.ndarray
    residuals: list
    converged: bool
    breakdown: bool


def conjugate_gradient(apply, rhs, x0=None, n_iter=10, tol=1e-5) -> CGResult:
    """CG for a Hermitian positive definite operator; residual norms are relative to ||rhs||."""
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=rhs.dtype, copy=True)
    r = rhs - apply(x) if x0 is not None else rhs.copy()
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return CGResult(np.zeros_like(rhs), [0.0], True, False)
    p = r.copy()
    rr = float(np.vdot(r, r).real)
    residuals = [math.sqrt(rr) / rhs_norm]
    if residuals[-1] <= tol:
        return CGResult(x, residuals, True, False)
    for _ in range(n_iter):
        ap = apply(p)
        denom = float(np.vdot(p, ap).real)
        if denom <= 0 or not math.isfinite(denom):
            return CGResult(x, residuals, False, True)
        alpha = rr / denom
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.vdot(r, r).real)
        residuals.append(math.sqrt(rr_new) / rhs_norm)
        if residuals[-1] <= tol:
            return CGResult(x, residuals, True, False)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, residuals, False, False)


def cg_solve(
    acq: AcquisitionModel,
    B,
    z_bar: np.ndarray,
    eta: float,
    L: float,
    n_cg: int = 10,
    tol: float = 1e-5,
    x0: np.ndarray | None = None,
    aHb: np.ndarray | None = None,
) -> CGResult:
    """Solve (A^H A / eta^2 + 3L I) G = A^H B / eta^2 + 3L Zbar."""
    if aHb is None:
        aHb = acq.adjoint(_samples(B))
    if z_bar.shape != aHb.shape:
        raise ValueError(f"Zbar shape {z_bar.shape} does not match image shape {aHb.shape}")
    w = 1.0 / eta**2
    rhs = w * aHb + 3.0 * L * z_bar

    def apply(x):
        return w * acq.normal(x) + 3.0 * L * x

    return conjugate_gradient(apply, rhs, x0, n_cg, tol)


def scaled_adjoint(acq: AcquisitionModel, aHb: np.ndarray) -> np.ndarray:
    """A^H B scaled by the least-squares optimal real factor."""
    den = float(np.vdot(aHb, acq.normal(aHb)).real)
    if den <= 0:
        return np.zeros_like(aHb)
    return aHb * (float(np.vdot(aHb, aHb).real) / den)


class TraceEntry(NamedTuple):
    iteration: int
    data: float
    energy: float
    total: float


@dataclass
class ReconResult:
    gamma: np.ndarray
    trace: list[TraceEntry] = field(default_factory=list)
    cg_breakdowns: int = 0


def mm_reconstruct(B, acq: AcquisitionModel, net, config: ReconConfig) -> ReconResult:
    """Majorize-minimize MAP recovery; the cost is recorded before each update and at the end."""
    dt = _DataTerm(B, acq)
    if config.init == "adjoint":
        gamma = scaled_adjoint(acq, dt.aHb)
    else:
        gamma = np.zeros_like(dt.aHb)
    result = ReconResult(gamma)
    w = 1.0 / (2.0 * config.eta**2)
    for n in range(config.n_outer + 1):
        den = denoised_volumes(net, gamma, config.L)
        data = w * dt.value(gamma)
        total = data + den.energy
        if not math.isfinite(total):
            raise SolverAborted(n)
        result.trace.append(TraceEntry(n, data, den.energy, total))
        log.debug("outer %d data %.6g energy %.6g total %.6g", n, data, den.energy, total)
        if n == config.n_outer:
            break
        cg = cg_solve(
            acq, B, den.z_bar, config.eta, config.L, config.n_cg, config.cg_tol, gamma, dt.aHb
        )
        result.cg_breakdowns += int(cg.breakdown)
        gamma = cg.x
    result.gamma = gamma
    return result


def independent_reconstruct(B: KSpaceData, acq: AcquisitionModel, net_1, config: ReconConfig):
    """One single-contrast MM reconstruction per contrast; no data flows between them."""
    if net_1.n_contrasts != 1:
        raise ValueError("independent recovery needs a single-contrast (2-channel) network")
    outs, traces = [], []
    for i in range(acq.n_contrasts):
        res = mm_reconstruct([B.samples[i]], acq.contrast(i), net_1, config)
        outs.append(res.gamma[0])
        traces.append(res.trace)
    return np.stack(outs), traces


def format_trace(trace: Sequence[TraceEntry]) -> str:
    lines = ["# iteration data_term energy_term total"]
    lines += [f"{t.iteration} {t.data:.12g} {t.energy:.12g} {t.total:.12g}" for t in trace]
    return "\n".join(lines) + "\n"
