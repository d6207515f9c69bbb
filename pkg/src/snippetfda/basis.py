"""Analytic basis families on [0, 1] and their Gram matrices.

Three families are provided: the Fourier basis, the Fourier-extension basis
(Fourier functions periodic on ``[-zeta, 1 + zeta]``) and orthonormal shifted
Legendre polynomials. All derivatives are analytic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import DataError

QUAD_NODES = 20
QUAD_PANELS = 16


class BasisKind(str, enum.Enum):
    FOURIER = "fourier"
    FOURIER_EXT = "fourier-ext"
    LEGENDRE = "legendre"


@lru_cache(maxsize=None)
def _quadrature(nodes: int, panels: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    t.setflags(write=False)
    wt.setflags(write=False)
    return t, wt


def quadrature_rule() -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on [0, 1] (20 nodes on each of 16 panels).

    Returns
    -------
    nodes, weights : ndarray
        Read-only arrays of length 320; ``weights.sum() == 1``.
    """
    return _quadrature(QUAD_NODES, QUAD_PANELS)


def _check_times(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise DataError("times must be a scalar or a 1-d array")
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DataError("time outside domain [0, 1]")
    return t


@dataclass(frozen=True)
class BasisSpec:
    """An analytic basis family.

    Parameters
    ----------
    kind : BasisKind
        Basis family.
    zeta : float
        Extension margin; only nonzero for ``BasisKind.FOURIER_EXT``.
    """

    kind: BasisKind
    zeta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))
        zeta = float(self.zeta)
        if not np.isfinite(zeta) or zeta < 0:
            raise DataError(f"extension margin must be nonnegative, got {self.zeta}")
        if zeta > 0 and self.kind is not BasisKind.FOURIER_EXT:
            raise DataError(f"extension margin > 0 requires kind 'fourier-ext', got '{self.kind.value}'")
        object.__setattr__(self, "zeta", zeta)

    @property
    def period(self) -> float:
        return 1.0 + 2.0 * self.zeta

    def evaluate(self, t, size: int, deriv: int = 0) -> np.ndarray:
        """Evaluate the first ``size`` basis functions (or derivatives) at ``t``.

        Parameters
        ----------
        t : float or array_like
            Points in [0, 1].
        size : int
            Number of basis functions.
        deriv : {0, 1, 2}
            Derivative order.

        Returns
        -------
        ndarray of shape (len(t), size)
        """
        t = _check_times(t)
        return self._evaluate(t, size, deriv)

    def _evaluate(self, t: np.ndarray, size: int, deriv: int) -> np.ndarray:
        if int(size) != size or size < 1:
            raise DataError(f"number of basis functions must be a positive integer, got {size}")
        if deriv not in (0, 1, 2):
            raise DataError(f"derivative order must be 0, 1 or 2, got {deriv}")
        size = int(size)
        if self.kind is BasisKind.LEGENDRE:
            return _legendre(t, size, deriv)
        return _fourier(t, size, deriv, self.period)

    def eval_vector(self, t: float, size: int, deriv: int = 0) -> np.ndarray:
        """Basis vector ``(phi_1(t), ..., phi_size(t))`` (or its derivative) at a single point."""
        if np.ndim(t) != 0:
            raise DataError("eval_vector expects a scalar time")
        return self.evaluate(t, size, deriv)[0]

    def gram(self, size: int, order: str) -> np.ndarray:
        """Gram matrix of derivatives over [0, 1].

        ``order`` is ``"U"`` (functions), ``"V"`` (first derivatives) or
        ``"W"`` (second derivatives).
        """
        return _gram(self, int(size), order).copy()

    def grams(self, size: int) -> "GramMatrices":
        return GramMatrices(U=self.gram(size, "U"), V=self.gram(size, "V"), W=self.gram(size, "W"))

    def integrals(self, size: int) -> np.ndarray:
        """``int_0^1 phi_k(t) dt`` for k = 1..size."""
        t, w = quadrature_rule()
        return w @ self._evaluate(t, size, 0)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "zeta": self.zeta}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(BasisKind(d["kind"]), float(d.get("zeta", 0.0)))


@dataclass(frozen=True)
class GramMatrices:
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray


_ORDERS = {"U": 0, "V": 1, "W": 2}


@lru_cache(maxsize=256)
def _gram(spec: BasisSpec, size: int, order: str) -> np.ndarray:
    if order not in _ORDERS:
        raise DataError(f"Gram order must be one of U, V, W; got {order!r}")
    t, w = quadrature_rule()
    E = spec._evaluate(t, size, _ORDERS[order])
    M = E.T @ (w[:, None] * E)
    M = 0.5 * (M + M.T)
    M.setflags(write=False)
    return M


def make_basis(kind, zeta: float = 0.0) -> BasisSpec:
    """Construct a basis specification; ``kind`` may be a ``BasisKind`` or its string value."""
    return BasisSpec(BasisKind(kind), zeta)


def _fourier(t: np.ndarray, size: int, deriv: int, period: float) -> np.ndarray:
    # phi_1 = const, phi_2k = cos(2k pi t / P), phi_2k+1 = sin(2k pi t / P), L2-normalised on [-zeta, 1+zeta]
    out = np.empty((t.size, size))
    out[:, 0] = period ** -0.5 if deriv == 0 else 0.0
    if size == 1:
        return out
    idx = np.arange(2, size + 1)
    freq = 2.0 * np.pi * (idx // 2) / period
    arg = t[:, None] * freq[None, :]
    amp = np.sqrt(2.0 / period) * freq**deriv
    is_cos = idx % 2 == 0
    # d^r/dt^r cos = cos(x + r pi/2), likewise for sin
    shift = deriv * np.pi / 2
    vals = np.where(is_cos[None, :], np.cos(arg + shift), np.sin(arg + shift))
    out[:, 1:] = amp[None, :] * vals
    return out


def _legendre(t: np.ndarray, size: int, deriv: int) -> np.ndarray:
    # Bonnet recurrence in u = 2t - 1, derivatives via P'_{n+1} = P'_{n-1} + (2n+1) P_n
    u = 2.0 * t - 1.0
    P = np.zeros((t.size, size))
    D1 = np.zeros_like(P)
    D2 = np.zeros_like(P)
    P[:, 0] = 1.0
    if size > 1:
        P[:, 1] = u
        D1[:, 1] = 1.0
    for n in range(1, size - 1):
        P[:, n + 1] = ((2 * n + 1) * u * P[:, n] - n * P[:, n - 1]) / (n + 1)
        D1[:, n + 1] = D1[:, n - 1] + (2 * n + 1) * P[:, n]
        D2[:, n + 1] = D2[:, n - 1] + (2 * n + 1) * D1[:, n]
    scale = np.sqrt(2.0 * np.arange(size) + 1.0)
    if deriv == 0:
        return P * scale
    if deriv == 1:
        return D1 * (2.0 * scale)
    return D2 * (4.0 * scale)
