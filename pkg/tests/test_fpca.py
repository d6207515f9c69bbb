import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snippetfda.basis import BasisKind, BasisSpec
from snippetfda.covfit import CovFit
from snippetfda.exceptions import DataError, NumericalError
from snippetfda.fpca import eigenpairs, variance_fractions

FOURIER = BasisSpec(BasisKind.FOURIER)
FEXT = BasisSpec(BasisKind.FOURIER_EXT, 0.1)
LEG = BasisSpec(BasisKind.LEGENDRE)


def random_fit(spec, p, seed, rank=None):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(p, rank or p))
    C = A @ A.T
    return CovFit(spec, 0.5 * (C + C.T), 0.0)


def test_diagonal_case():
    sys_ = eigenpairs(CovFit(FOURIER, np.diag([3.0, 1.0]), 0.0))
    np.testing.assert_allclose(sys_.eigenvalues, [3.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(sys_.fractions, [0.75, 0.25], atol=1e-14)
    g = np.linspace(0, 1, 11)
    psi = sys_.eigenfunctions(g)
    np.testing.assert_allclose(psi[:, 0], 1.0, atol=1e-14)
    # phi_2(0.5) = -sqrt(2) < 0, so the sign is flipped
    np.testing.assert_allclose(psi[:, 1], -np.sqrt(2) * np.cos(2 * np.pi * g), atol=1e-13)


@pytest.mark.parametrize("spec", [FOURIER, FEXT, LEG])
def test_orthonormal_and_reconstruction(spec):
    fit = random_fit(spec, 6, 1)
    es = eigenpairs(fit)
    U = spec.gram(6, "U")
    np.testing.assert_allclose(es.coefficients.T @ U @ es.coefficients, np.eye(6), atol=1e-10)
    g = np.linspace(0, 1, 21)
    psi = es.eigenfunctions(g)
    recon = (psi * es.eigenvalues) @ psi.T
    np.testing.assert_allclose(recon, fit.surface(g), atol=1e-8)
    assert np.all(np.diff(es.eigenvalues) <= 0)


def test_eigenvalues_match_nystrom_oracle():
    # dense Gauss-Legendre discretization of the integral operator
    fit = random_fit(FEXT, 5, 2)
    x, w = np.polynomial.legendre.leggauss(200)
    t, w = 0.5 * (x + 1), 0.5 * w
    K = fit.surface(t)
    sw = np.sqrt(w)
    ref = np.sort(np.linalg.eigvalsh(sw[:, None] * K * sw[None, :]))[::-1][:5]
    np.testing.assert_allclose(eigenpairs(fit).eigenvalues, ref, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7))
def test_sign_convention(seed, p):
    es = eigenpairs(random_fit(FEXT, p, seed))
    mid = es.eigenfunctions([0.5])[0]
    integ = FEXT.integrals(p) @ es.coefficients
    for m, i in zip(mid, integ):
        assert m > 1e-12 or (abs(m) <= 1e-12 and i >= 0)


def test_low_rank_fractions():
    fit = random_fit(FOURIER, 5, 3, rank=2)
    es = eigenpairs(fit, 3)
    np.testing.assert_allclose(es.eigenvalues[2], 0.0, atol=1e-10)
    assert es.fractions.sum() == pytest.approx(1.0)
    assert eigenpairs(random_fit(FOURIER, 5, 4), 2).fractions.sum() < 1.0


def test_errors():
    fit = random_fit(FOURIER, 3, 0)
    with pytest.raises(DataError):
        eigenpairs(fit, 0)
    with pytest.raises(DataError):
        eigenpairs(fit, 4)
    with pytest.raises(NumericalError):
        variance_fractions(eigenpairs(CovFit(FOURIER, np.zeros((2, 2)), 0.0)))
    with pytest.raises(NumericalError, match="PSD"):
        eigenpairs(CovFit(FOURIER, np.diag([1.0, -1.0]), 0.0))
