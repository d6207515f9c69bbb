"""Penalized least-squares mean estimation with K-fold cross-validation."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .basis import BasisSpec
from .data import Scheme, SnippetDataset, mean_weights
from .exceptions import DataError, NumericalError

DEFAULT_Q_GRID = tuple(range(3, 22, 2))
DEFAULT_RHO_GRID = tuple(10.0**k for k in range(-6, 0))


def solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    On factorization failure a ridge of ``1e-10 * trace(A) / dim`` is added
    once; a second failure raises ``NumericalError``.
    """
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True), b)
    except linalg.LinAlgError:
        pass
    ridge = 1e-10 * np.trace(A) / A.shape[0]
    try:
        return linalg.cho_solve(linalg.cho_factor(A + ridge * np.eye(A.shape[0]), lower=True), b)
    except linalg.LinAlgError:
        raise NumericalError(f"singular penalized normal equations (dimension {A.shape[0]})") from None


@dataclass(frozen=True, eq=False)
class MeanFit:
    """Fitted mean ``mu(t) = a' Phi_q(t)``."""

    spec: BasisSpec
    coefficients: np.ndarray
    rho: float
    scheme: Scheme = Scheme.OBS

    @property
    def q(self) -> int:
        return self.coefficients.size

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        vals = self.spec.evaluate(t.ravel(), self.q) @ self.coefficients
        return vals.reshape(t.shape)

    def to_dict(self) -> dict:
        return {
            "type": "mean_fit",
            **self.spec.to_dict(),
            "q": self.q,
            "rho": self.rho,
            "scheme": Scheme(self.scheme).value,
            "coefficients": [float(format(c, ".17g")) for c in self.coefficients],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeanFit":
        try:
            if d.get("type", "mean_fit") != "mean_fit":
                raise DataError(f"not a mean fit document (type={d.get('type')!r})")
            coef = np.asarray(d["coefficients"], dtype=float)
            if coef.ndim != 1 or coef.size != int(d["q"]):
                raise DataError("mean fit: coefficient count does not match q")
            return cls(BasisSpec.from_dict(d), coef, float(d["rho"]), Scheme(d.get("scheme", "OBS")))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"invalid mean fit document: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def eval_mean(fit: MeanFit, t) -> np.ndarray:
    return fit(t)


def _normal_equations(E, y, v_obs, W, rho):
    G = E.T @ (v_obs[:, None] * E)
    b = E.T @ (v_obs * y)
    return G + rho * W, b


def fit_mean(
    dataset: SnippetDataset,
    spec: BasisSpec,
    q: int,
    rho: float,
    scheme: Scheme = Scheme.OBS,
) -> MeanFit:
    """Minimize ``sum_i v_i sum_j (Y_ij - a'Phi_q(T_ij))^2 + rho a'Wa``.

    Raises
    ------
    NumericalError
        If ``G + rho W`` is singular even after the ridge fallback.
    """
    if int(q) != q or q < 1:
        raise DataError(f"q must be a positive integer, got {q}")
    if not rho >= 0:
        raise DataError(f"rho must be nonnegative, got {rho}")
    if dataset.n == 0:
        raise DataError("empty dataset")
    idx, t, y = dataset.long_arrays()
    v_obs = mean_weights(dataset.counts, scheme)[idx]
    E = spec.evaluate(t, int(q))
    A, b = _normal_equations(E, y, v_obs, spec.gram(int(q), "W"), rho)
    a = solve_spd(A, b)
    return MeanFit(spec, a, float(rho), Scheme(scheme))


@dataclass
class MeanCVResult:
    q: int
    rho: float
    table: dict = field(default_factory=dict)  # (q, rho) -> CV error

    def rows(self):
        return [(q, rho, err) for (q, rho), err in sorted(self.table.items())]


def fold_partition(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` split into ``folds`` parts of size floor/ceil(n/folds)."""
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def argmin_grid(table: dict) -> tuple:
    """Key with the smallest value; ties go to the lexicographically smallest key."""
    return min(table, key=lambda key: (table[key], key))


def cv_select_mean(
    dataset: SnippetDataset,
    spec: BasisSpec,
    q_grid: Sequence[int] = DEFAULT_Q_GRID,
    rho_grid: Sequence[float] = DEFAULT_RHO_GRID,
    folds: int = 5,
    seed: int = 0,
    scheme: Scheme = Scheme.OBS,
) -> MeanCVResult:
    """Select ``(q, rho)`` by K-fold cross-validation over subjects.

    A grid point whose fit fails on any fold gets an infinite CV error.
    """
    q_grid = sorted({int(q) for q in q_grid})
    rho_grid = sorted({float(r) for r in rho_grid})
    if not q_grid or not rho_grid:
        raise DataError("candidate grids must be nonempty")
    if q_grid[0] < 1 or rho_grid[0] < 0:
        raise DataError("candidate q must be positive and rho nonnegative")
    if folds < 2:
        raise DataError("need at least two folds")
    if dataset.n < folds:
        raise DataError(f"need at least {folds} subjects for {folds}-fold CV, got {dataset.n}")

    qmax = q_grid[-1]
    idx, t, y = dataset.long_arrays()
    counts = dataset.counts
    E = spec.evaluate(t, qmax)
    Wmax = spec.gram(qmax, "W")
    parts = fold_partition(dataset.n, folds, seed)
    table = {key: 0.0 for key in itertools.product(q_grid, rho_grid)}

    for part in parts:
        held = np.zeros(dataset.n, dtype=bool)
        held[part] = True
        train_obs = ~held[idx]
        v = np.zeros(dataset.n)
        v[~held] = mean_weights(counts[~held], scheme)
        v_obs = v[idx][train_obs]
        Et, yt = E[train_obs], y[train_obs]
        Gmax = Et.T @ (v_obs[:, None] * Et)
        bmax = Et.T @ (v_obs * yt)
        Ev, yv = E[~train_obs], y[~train_obs]
        for q, rho in table:
            if not np.isfinite(table[q, rho]):
                continue
            try:
                a = solve_spd(Gmax[:q, :q] + rho * Wmax[:q, :q], bmax[:q])
            except NumericalError:
                table[q, rho] = np.inf
                continue
            table[q, rho] += float(np.sum((yv - Ev[:, :q] @ a) ** 2))

    q, rho = argmin_grid(table)
    return MeanCVResult(q, rho, table)
