"""Functional principal components of a fitted covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import GramMatrices
from .covfit import CovFit
from .exceptions import DataError, NumericalError


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Leading eigenpairs of the covariance operator.

    Eigenfunction k is ``psi_k(t) = coefficients[:, k] @ Phi_p(t)``.
    """

    fit: CovFit
    eigenvalues: np.ndarray
    coefficients: np.ndarray
    total_variance: float

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def fractions(self) -> np.ndarray:
        return variance_fractions(self)

    def eigenfunctions(self, grid) -> np.ndarray:
        """Values ``psi_k(grid[a])`` as a (len(grid), k) array."""
        return self.fit.spec.evaluate(grid, self.fit.p) @ self.coefficients


def _gram_factor(U: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(U)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(U + 1e-12 * np.trace(U) / U.shape[0] * np.eye(U.shape[0]))
    except np.linalg.LinAlgError:
        raise NumericalError("Gram matrix U is numerically singular; reduce p") from None


def eigenpairs(fit: CovFit, k: int | None = None, grams: GramMatrices | None = None) -> EigenSystem:
    """Solve ``int gamma(s, t) psi(t) dt = lambda psi(s)`` in the basis.

    With ``psi = a' Phi`` the problem is ``C U a = lambda a``. It is solved in
    symmetric form: factor ``U = E E'``, diagonalize ``E' C E = Y diag Y'``
    and map back through ``a = E^{-T} y``.

    Each eigenfunction is signed so that ``psi(0.5) >= 0`` (nonnegative
    integral when ``psi(0.5) == 0``).
    """
    p = fit.p
    k = p if k is None else int(k)
    if k < 1:
        raise DataError(f"number of components must be at least 1, got {k}")
    if k > p:
        raise DataError(f"number of components {k} exceeds basis size p={p}")
    U = fit.spec.gram(p, "U") if grams is None else grams.U
    E = _gram_factor(U)
    M = E.T @ fit.C @ E
    lam, Y = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(lam)[::-1]
    lam, Y = lam[order], Y[:, order]
    scale = max(1.0, float(np.abs(lam).max()))
    lam = np.where(lam < 0, np.where(lam >= -1e-10 * scale, 0.0, lam), lam)
    if np.any(lam < 0):
        raise NumericalError(f"covariance coefficient matrix is not PSD (eigenvalue {lam.min():.3g})")
    A = np.linalg.solve(E.T, Y)
    mid = fit.spec.evaluate(0.5, p)[0] @ A
    integ = fit.spec.integrals(p) @ A
    flip = np.where(np.abs(mid) > 1e-12, mid < 0, integ < 0)
    A[:, flip] *= -1.0
    return EigenSystem(fit, lam[:k], A[:, :k], float(lam.sum()))


def variance_fractions(system: EigenSystem) -> np.ndarray:
    """Share of total variance explained by each retained component."""
    if not system.total_variance > 0:
        raise NumericalError("all-zero spectrum: variance fractions undefined")
    return system.eigenvalues / system.total_variance
