"""Band-restricted local-linear smoothing of raw covariances.

The pilot surface is only used to score tuning parameters of the
covariance estimator on the diagonal band ``|s - t| <= delta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RawCovariances
from .exceptions import DataError, NumericalError

MIN_NEIGHBORS = 6
_CHUNK = 256
_BAND_TOL = 1e-12


def epanechnikov(u: np.ndarray) -> np.ndarray:
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


@dataclass(frozen=True, eq=False)
class PilotEstimate:
    """Pilot covariance on the band of an equally spaced grid.

    ``values`` is a G x G array holding NaN outside the band.
    """

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    delta: float

    @property
    def band(self) -> np.ndarray:
        return band_mask(self.grid, self.delta)

    def band_pairs(self):
        """Yield ``(t_j, t_l, value)`` for every band grid pair."""
        j, l = np.nonzero(self.band)
        return zip(self.grid[j], self.grid[l], self.values[j, l])


def band_mask(grid: np.ndarray, delta: float) -> np.ndarray:
    return np.abs(grid[:, None] - grid[None, :]) <= delta + _BAND_TOL


def _kernel_weights(xs, xt, raw: RawCovariances, h):
    ds = raw.s[None, :] - xs[:, None]
    dt = raw.t[None, :] - xt[:, None]
    K = epanechnikov(ds / h) * epanechnikov(dt / h) * raw.weight[None, :]
    return K, ds, dt


def _local_linear(xs, xt, raw, h):
    """Intercepts of weighted local planes; NaN where the fit is not usable."""
    K, ds, dt = _kernel_weights(xs, xt, raw, h)
    neighbors = np.count_nonzero(K, axis=1)
    cols = (np.ones_like(ds), ds, dt)
    M = np.empty((xs.size, 3, 3))
    r = np.empty((xs.size, 3))
    for a in range(3):
        Ka = K * cols[a]
        r[:, a] = Ka @ raw.gamma
        for b in range(a, 3):
            M[:, a, b] = M[:, b, a] = np.einsum("ij,ij->i", Ka, cols[b])
    out = np.full(xs.size, np.nan)
    ok = neighbors >= MIN_NEIGHBORS
    if ok.any():
        # scale-aware singularity check on the 3x3 systems
        cond = np.linalg.cond(M[ok])
        good = np.flatnonzero(ok)[cond < 1e12]
        if good.size:
            out[good] = np.linalg.solve(M[good], r[good][..., None])[:, 0, 0]
    return out


def _nadaraya_watson(xs, xt, raw, h):
    K, _, _ = _kernel_weights(xs, xt, raw, h)
    mass = K.sum(axis=1)
    out = np.full(xs.size, np.nan)
    pos = mass > 0
    out[pos] = (K[pos] @ raw.gamma) / mass[pos]
    return out


def pilot_covariance(
    raw: RawCovariances,
    grid_size: int = 51,
    bandwidth="auto",
    delta: float | None = None,
) -> PilotEstimate:
    """Local-linear pilot estimate of the covariance on the diagonal band.

    Parameters
    ----------
    raw : RawCovariances
        Off-diagonal raw products; diagonal products are never used.
    grid_size : int
        Number of equally spaced grid points on [0, 1].
    bandwidth : float or "auto"
        Kernel half-width; ``"auto"`` uses ``delta / 3``.
    delta : float, optional
        Band half-width; defaults to the largest ``|s - t|`` among the pairs.

    Notes
    -----
    A band point with fewer than six pairs in its kernel window (or a
    degenerate local design) falls back to a Nadaraya-Watson average with
    twice the bandwidth, and then four times.
    """
    if len(raw) == 0:
        raise DataError("no raw covariance pairs (every subject has a single observation)")
    if grid_size < 2:
        raise DataError("grid size must be at least 2")
    if delta is None:
        delta = float(np.max(np.abs(raw.s - raw.t)))
    if bandwidth == "auto":
        h = delta / 3.0
    else:
        h = float(bandwidth)
    if not h > 0:
        raise DataError(f"bandwidth must be positive, got {bandwidth}")

    grid = np.linspace(0.0, 1.0, grid_size)
    mask = band_mask(grid, delta)
    j, l = np.nonzero(mask)
    xs, xt = grid[j], grid[l]
    vals = np.empty(xs.size)
    for start in range(0, xs.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        est = _local_linear(xs[sl], xt[sl], raw, h)
        for factor in (2.0, 4.0):
            miss = np.isnan(est)
            if not miss.any():
                break
            est[miss] = _nadaraya_watson(xs[sl][miss], xt[sl][miss], raw, factor * h)
        if np.isnan(est).any():
            k = start + int(np.flatnonzero(np.isnan(est))[0])
            raise NumericalError(f"no kernel mass near grid pair ({xs[k]:.4g}, {xt[k]:.4g}) even at bandwidth {4 * h:.4g}")
        vals[sl] = est

    values = np.full((grid_size, grid_size), np.nan)
    values[j, l] = vals
    values[mask] = 0.5 * (values + values.T)[mask]
    return PilotEstimate(grid=grid, values=values, bandwidth=h, delta=float(delta))
