"""Simulation scenarios and the Gaussian-process snippet sampler."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .basis import BasisKind, BasisSpec, quadrature_rule
from .data import SnippetDataset, Subject
from .exceptions import DataError, NumericalError

_FOURIER = BasisSpec(BasisKind.FOURIER)


class MeanScenario(str, enum.Enum):
    MU1 = "mu1"
    MU2 = "mu2"


class CovScenario(str, enum.Enum):
    GAMMA1 = "gamma1"
    GAMMA2 = "gamma2"
    GAMMA3 = "gamma3"
    GAMMA4 = "gamma4"


@lru_cache(maxsize=None)
def banded_coefficients(size: int) -> np.ndarray:
    """Coefficient matrix with ``2**(-|k-l|-5/2)`` off the diagonal and ``1.5**(1-k)`` on it.

    The 30 x 30 version is indefinite; its negative eigenvalues are clipped
    to zero so the resulting kernel is a valid covariance.
    """
    k = np.arange(1, size + 1)
    C = 2.0 ** (-np.abs(k[:, None] - k[None, :]) - 2.5)
    np.fill_diagonal(C, 1.5 ** (1 - k))
    lam, P = np.linalg.eigh(C)
    if lam[0] < 0:
        C = (P * np.clip(lam, 0.0, None)) @ P.T
        C = 0.5 * (C + C.T)
    C.setflags(write=False)
    return C


def _mu1_coefficients() -> np.ndarray:
    k = np.arange(1, 10)
    return (-1.0) ** k * 1.2 ** (-k)


def scenario_mean(which, t) -> np.ndarray:
    """Mean function mu1 (Fourier series) or mu2(t) = 2t."""
    which = MeanScenario(which)
    t = np.asarray(t, dtype=float)
    if which is MeanScenario.MU2:
        return 2.0 * t
    flat = np.atleast_1d(t).ravel()
    out = _FOURIER._evaluate(flat, 9, 0) @ _mu1_coefficients()
    return out.reshape(t.shape)


def _normal_pdf(x, loc, scale):
    z = (x - loc) / scale
    return np.exp(-0.5 * z * z) / (scale * np.sqrt(2.0 * np.pi))


def bimodal_profile(t) -> np.ndarray:
    """``0.3 f(t; 0.3, 0.05) + 0.7 f(t; 0.7, 0.05)`` with normal densities f."""
    t = np.asarray(t, dtype=float)
    return 0.3 * _normal_pdf(t, 0.3, 0.05) + 0.7 * _normal_pdf(t, 0.7, 0.05)


def step_variance(t) -> np.ndarray:
    """Variance profile ``{1 + int_0^t (1 + floor(4.5 x)) dx} / sqrt(2)``.

    ``floor(4.5 x) = sum_k 1{x >= k / 4.5}``, so the integral is
    ``t + sum_k max(0, t - k / 4.5)`` over the breakpoints in [0, 1].
    """
    t = np.asarray(t, dtype=float)
    breaks = np.arange(1, 5) / 4.5
    integral = t + np.clip(t[..., None] - breaks, 0.0, None).sum(axis=-1)
    return (1.0 + integral) / np.sqrt(2.0)


def _fourier_kernel(C: np.ndarray, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    p = C.shape[0]
    Bs = _FOURIER._evaluate(s.ravel(), p, 0)
    Bt = _FOURIER._evaluate(t.ravel(), p, 0)
    return np.einsum("ik,kl,il->i", Bs, C, Bt).reshape(s.shape)


def scenario_covariance(which, s, t) -> np.ndarray:
    """Covariance functions gamma1..gamma4, broadcast over ``s`` and ``t``."""
    which = CovScenario(which)
    s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    if which is CovScenario.GAMMA1:
        return _fourier_kernel(banded_coefficients(5), s, t)
    if which is CovScenario.GAMMA3:
        return _fourier_kernel(banded_coefficients(30), s, t)
    if which is CovScenario.GAMMA2:
        return np.sqrt(step_variance(s) * step_variance(t) / 2.0) * np.exp(-((s - t) ** 2))
    return 0.4 * bimodal_profile(s) * bimodal_profile(t)


def scenario_covariance_matrix(which, times: np.ndarray) -> np.ndarray:
    """``gamma(times[j], times[k])`` as a symmetric matrix."""
    times = np.asarray(times, dtype=float)
    K = scenario_covariance(which, times[:, None], times[None, :])
    return 0.5 * (K + K.T)


def noise_variance(which, snr: float = 4.0) -> float:
    """Noise variance giving ``E||X - mu||^2 / sigma^2 = snr``."""
    if not snr > 0:
        raise DataError(f"signal-to-noise ratio must be positive, got {snr}")
    t, w = quadrature_rule()
    return float(w @ scenario_covariance(which, t, t)) / snr


@dataclass(frozen=True)
class SimulationScenario:
    mean: MeanScenario
    covariance: CovScenario
    delta: float
    n: int
    snr: float = 4.0
    extra_points: float = 3.0  # m_i = 2 + Poisson(extra_points)
    m_law: str = field(default="2+Poisson(3)", init=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", MeanScenario(self.mean))
        object.__setattr__(self, "covariance", CovScenario(self.covariance))
        if not (0.0 < float(self.delta) < 1.0):
            raise DataError(f"delta must lie in (0, 1), got {self.delta}")
        if int(self.n) != self.n or self.n < 1:
            raise DataError(f"n must be a positive integer, got {self.n}")
        if not self.snr > 0:
            raise DataError(f"snr must be positive, got {self.snr}")
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "m_law", f"2+Poisson({self.extra_points:g})")


def subject_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for subject ``index`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_gaussian(mean: np.ndarray, cov: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``mean + chol(cov) z`` with escalating diagonal jitter for singular ``cov``."""
    base = 1e-10 * (1.0 + float(np.max(np.diag(cov))))
    jitter = base
    while True:
        try:
            Lc = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
            return mean + Lc @ z
        except np.linalg.LinAlgError:
            if jitter >= 1e-6 * (1.0 + float(np.max(np.diag(cov)))):
                raise NumericalError("covariance kernel is not positive semidefinite on subject times") from None
            jitter *= 10.0


def _simulate_subject(scenario: SimulationScenario, sigma: float, seed: int, i: int) -> Subject:
    rng = subject_rng(seed, i)
    half = scenario.delta / 2.0
    R = rng.uniform(half, 1.0 - half)
    m = 2 + int(rng.poisson(scenario.extra_points))
    times = np.sort(rng.uniform(R - half, R + half, size=m))
    z = rng.standard_normal(m)
    eps = rng.standard_normal(m) * sigma
    x = sample_gaussian(
        scenario_mean(scenario.mean, times),
        scenario_covariance_matrix(scenario.covariance, times),
        z,
    )
    return Subject(str(i + 1), times, x + eps)


def simulate(scenario: SimulationScenario, seed: int, noise: bool = True) -> SnippetDataset:
    """Draw a snippet dataset.

    Each subject gets a reference time ``R ~ U[delta/2, 1 - delta/2]``,
    ``m = 2 + Poisson(3)`` times uniform on ``[R - delta/2, R + delta/2]``,
    a Gaussian-process path at those times and i.i.d. Gaussian noise.
    Subject ``i`` draws only from ``subject_rng(seed, i)``, so the result
    does not depend on generation order.
    """
    sigma = np.sqrt(noise_variance(scenario.covariance, scenario.snr)) if noise else 0.0
    return SnippetDataset(_simulate_subject(scenario, sigma, int(seed), i) for i in range(scenario.n))
