import math

import numpy as np
import pytest
from scipy import integrate

from snippetfda.exceptions import DataError
from snippetfda.simulation import (
    SimulationScenario,
    banded_coefficients,
    noise_variance,
    sample_gaussian,
    scenario_covariance,
    scenario_mean,
    simulate,
    step_variance,
)


def fourier_at(t, k):
    # orthonormal Fourier functions written out directly
    if k == 1:
        return 1.0
    f = 2 * math.pi * (k // 2)
    return math.sqrt(2) * (math.cos(f * t) if k % 2 == 0 else math.sin(f * t))


def test_mu1_direct_sum():
    for t in (0.0, 0.37, 1.0):
        ref = sum((-1) ** k * 1.2 ** (-k) * fourier_at(t, k) for k in range(1, 10))
        assert scenario_mean("mu1", t) == pytest.approx(ref, abs=1e-13)
    assert scenario_mean("mu2", 0.4) == pytest.approx(0.8)


def test_mu1_bound():
    g = np.linspace(0, 1, 501)
    bound = 1 / 1.2 + math.sqrt(2) * sum(1.2 ** (-k) for k in range(2, 10))
    assert np.abs(scenario_mean("mu1", g)).max() <= bound


def test_gamma1_matrix_product():
    for s, t in [(0.0, 0.0), (0.2, 0.7), (0.9, 0.1)]:
        ref = 0.0
        for k in range(1, 6):
            for l in range(1, 6):
                c = 1.5 ** (1 - k) if k == l else 2.0 ** (-abs(k - l) - 2.5)
                ref += c * fourier_at(s, k) * fourier_at(t, l)
        assert scenario_covariance("gamma1", s, t) == pytest.approx(ref, abs=1e-13)


def test_banded_coefficients_psd():
    C5 = banded_coefficients(5)
    assert C5[0, 0] == 1.0 and C5[0, 1] == pytest.approx(2**-3.5)
    assert np.linalg.eigvalsh(C5).min() > 0.1
    C30 = banded_coefficients(30)
    assert np.linalg.eigvalsh(C30).min() > -1e-12
    np.testing.assert_array_equal(C30, C30.T)


def test_step_variance_against_quadrature():
    for t in (0.0, 0.1, 0.3, 0.5, 0.77, 1.0):
        ref = integrate.quad(lambda x: 1 + math.floor(4.5 * x), 0, t, points=[1 / 4.5, 2 / 4.5, 3 / 4.5, 4 / 4.5])[0]
        assert step_variance(t) == pytest.approx((1 + ref) / math.sqrt(2), abs=1e-12)


def test_covariances_symmetric():
    s, t = np.meshgrid(np.linspace(0, 1, 9), np.linspace(0, 1, 9))
    for which in ("gamma1", "gamma2", "gamma3", "gamma4"):
        K = scenario_covariance(which, s, t)
        np.testing.assert_allclose(K, K.T, atol=1e-13)


def test_noise_variance():
    # U = I, so the integrated variance of gamma1 is the trace of its matrix
    assert noise_variance("gamma1") == pytest.approx(sum(1.5 ** (1 - k) for k in range(1, 6)) / 4, rel=1e-12)
    ref = integrate.quad(lambda t: scenario_covariance("gamma4", t, t), 0, 1, points=[0.3, 0.7])[0]
    assert noise_variance("gamma4", 2.0) == pytest.approx(ref / 2, rel=1e-9)
    with pytest.raises(DataError):
        noise_variance("gamma1", 0.0)


def test_scenario_validation():
    with pytest.raises(DataError):
        SimulationScenario("mu1", "gamma1", 1.5, 10)
    with pytest.raises(DataError):
        SimulationScenario("mu1", "gamma1", 0.25, 0)
    with pytest.raises(ValueError):
        SimulationScenario("mu3", "gamma1", 0.25, 10)


def test_simulate_structure_and_determinism():
    sc = SimulationScenario("mu1", "gamma1", 0.25, 60)
    d = simulate(sc, 7)
    assert d.n == 60
    assert [s.id for s in d] == [str(i) for i in range(1, 61)]
    assert d.counts.min() >= 2
    assert estimate_width(d) <= 0.25
    assert simulate(sc, 7) == d
    assert simulate(sc, 8) != d


def estimate_width(d):
    return max(s.times[-1] - s.times[0] for s in d)


def test_subjects_independent_of_sample_size():
    small = simulate(SimulationScenario("mu2", "gamma2", 0.5, 5), 3)
    large = simulate(SimulationScenario("mu2", "gamma2", 0.5, 20), 3)
    for a, b in zip(small, large):
        assert a == b


def test_noise_free_sample_moments():
    sc = SimulationScenario("mu2", "gamma1", 0.5, 3000)
    d = simulate(sc, 11, noise=False)
    t = np.concatenate([s.times for s in d])
    y = np.concatenate([s.values for s in d])
    resid = y - 2 * t
    var = scenario_covariance("gamma1", t, t)
    # standardized residuals are N(0, 1) marginally
    z = resid / np.sqrt(var)
    assert abs(z.mean()) < 0.05
    assert abs(z.var() - 1) < 0.05


def test_sample_gaussian_jitter_and_failure():
    ones = np.ones((3, 3))
    out = sample_gaussian(np.zeros(3), ones, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(out, 1.0, atol=1e-4)
    from snippetfda.exceptions import NumericalError

    with pytest.raises(NumericalError):
        sample_gaussian(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2))
