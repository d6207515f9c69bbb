"""Monte Carlo harness: MISE of the mean and covariance estimators over replicates."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .basis import BasisKind, BasisSpec
from .covfit import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_P_GRID,
    CovFit,
    NewtonOptions,
    select_cov_tuning,
)
from .data import Scheme, SnippetDataset, estimate_delta, raw_covariances
from .exceptions import DataError, NumericalError
from .mean import DEFAULT_Q_GRID, DEFAULT_RHO_GRID, MeanFit, cv_select_mean, fit_mean
from .pilot import pilot_covariance
from .simulation import CovScenario, MeanScenario, SimulationScenario, scenario_covariance, scenario_mean, simulate

logger = logging.getLogger(__name__)

VARIANTS = {"FE", "NFE"}
MAX_FAILURE_FRACTION = 0.2


class ExperimentFailure(NumericalError):
    """Too many replicates failed to fit; ``result`` holds the partial table."""

    def __init__(self, message: str, result: "ExperimentResult | None" = None):
        super().__init__(message)
        self.result = result


def mise_mean(fit: Callable[[np.ndarray], np.ndarray], true_mean: Callable, grid_size: int = 201) -> float:
    """Integrated squared error over [0, 1] by the trapezoid rule."""
    if grid_size < 2:
        raise DataError("grid size must be at least 2")
    g = np.linspace(0.0, 1.0, grid_size)
    return float(trapezoid((np.asarray(fit(g)) - np.asarray(true_mean(g))) ** 2, g))


def mise_cov(fit: Callable, true_cov: Callable, grid_size: int = 201) -> float:
    """Integrated squared error over [0, 1]^2 by the product trapezoid rule."""
    if grid_size < 2:
        raise DataError("grid size must be at least 2")
    g = np.linspace(0.0, 1.0, grid_size)
    S, T = np.meshgrid(g, g, indexing="ij")
    est = fit.surface(g) if isinstance(fit, CovFit) else np.asarray(fit(S, T))
    err = (est - np.asarray(true_cov(S, T))) ** 2
    return float(trapezoid(trapezoid(err, g, axis=1), g))


def make_variant_basis(variant: str, zeta: float) -> BasisSpec:
    if variant == "FE":
        return BasisSpec(BasisKind.FOURIER_EXT, zeta)
    if variant == "NFE":
        return BasisSpec(BasisKind.FOURIER)
    raise DataError(f"unknown estimator variant {variant!r} (expected FE or NFE)")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a target (mean or covariance), scenario and a grid of cells.

    Cells are all combinations of ``n``, ``delta`` and ``variants``; every
    variant within an ``(n, delta, replicate)`` sees the same simulated data.
    """

    target: str = "cov"
    mean: str = "mu1"
    covariance: str = "gamma1"
    n: tuple = (50, 150, 450)
    delta: tuple = (0.25, 0.75)
    variants: tuple = ("FE", "NFE")
    replicates: int = 20
    seed: int = 1
    zeta: float = 0.1
    snr: float = 4.0
    scheme: str = "OBS"
    folds: int = 5
    q_grid: tuple = DEFAULT_Q_GRID
    rho_grid: tuple = DEFAULT_RHO_GRID
    p_grid: tuple = DEFAULT_P_GRID
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    pilot_grid: int = 51
    mise_grid: int = 201
    workers: int = 1

    def __post_init__(self):
        for name in ("n", "delta", "variants", "q_grid", "rho_grid", "p_grid", "lambda_grid"):
            value = getattr(self, name)
            if isinstance(value, (str, int, float)):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        if self.target not in ("mean", "cov"):
            raise DataError(f"target must be 'mean' or 'cov', got {self.target!r}")
        MeanScenario(self.mean)
        CovScenario(self.covariance)
        Scheme(self.scheme)
        if self.replicates < 1:
            raise DataError("replicates must be at least 1")
        if not set(self.variants) <= VARIANTS or not self.variants:
            raise DataError(f"variants must be a nonempty subset of {sorted(VARIANTS)}")
        for d in self.delta:
            if not 0 < d < 1:
                raise DataError(f"delta must lie in (0, 1), got {d}")
        for n in self.n:
            if int(n) != n or n < self.folds:
                raise DataError(f"n must be an integer >= folds ({self.folds}), got {n}")

    @property
    def scenario_label(self) -> str:
        return self.mean if self.target == "mean" else self.covariance

    def cells(self):
        return list(itertools.product(self.n, self.delta, self.variants))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read experiment config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise DataError("experiment config must be a JSON object")
        return cls.from_dict(d)


def replicate_seed(master: int, n: int, delta: float, replicate: int) -> int:
    ss = np.random.SeedSequence([int(master), int(n), int(round(delta * 1_000_000)), int(replicate)])
    return int(ss.generate_state(1)[0])


@dataclass
class ReplicateOutcome:
    n: int
    delta: float
    replicate: int
    seed: int
    variant: str
    mise: float = math.nan
    tuning: dict = field(default_factory=dict)
    error: str = ""
    # smallest eigenvalue and largest asymmetry over every covariance fit on the tuning grid
    min_eigenvalue: float = math.nan
    asymmetry: float = math.nan

    @property
    def ok(self) -> bool:
        return not self.error


def fit_mean_cv(data: SnippetDataset, spec: BasisSpec, config: ExperimentConfig, seed: int) -> MeanFit:
    cv = cv_select_mean(data, spec, config.q_grid, config.rho_grid, config.folds, seed, Scheme(config.scheme))
    return fit_mean(data, spec, cv.q, cv.rho, Scheme(config.scheme))


def run_replicate(config: ExperimentConfig, n: int, delta: float, replicate: int) -> list[ReplicateOutcome]:
    """Simulate one dataset and fit every variant on it."""
    seed = replicate_seed(config.seed, n, delta, replicate)
    scenario = SimulationScenario(config.mean, config.covariance, delta, n, config.snr)
    data = simulate(scenario, seed)
    scheme = Scheme(config.scheme)
    out = []
    for variant in config.variants:
        rec = ReplicateOutcome(n, delta, replicate, seed, variant)
        try:
            spec = make_variant_basis(variant, config.zeta)
            mfit = fit_mean_cv(data, spec, config, seed)
            rec.tuning.update(q=mfit.q, rho=mfit.rho)
            if config.target == "mean":
                rec.mise = mise_mean(mfit, lambda t: scenario_mean(config.mean, t), config.mise_grid)
            else:
                raw = raw_covariances(data, mfit, scheme)
                pilot = pilot_covariance(raw, config.pilot_grid, "auto", estimate_delta(data))
                tuned = select_cov_tuning(
                    data, mfit, spec, config.p_grid, config.lambda_grid, pilot, scheme, NewtonOptions()
                )
                rec.tuning.update(p=tuned.p, **{"lambda": tuned.lam})
                rec.tuning["termination"] = tuned.fit.diagnostics["termination"]
                Cs = [f.C for f in tuned.fits.values()]
                rec.min_eigenvalue = min(float(np.linalg.eigvalsh(C)[0]) for C in Cs)
                rec.asymmetry = max(float(np.abs(C - C.T).max()) for C in Cs)
                rec.mise = mise_cov(tuned.fit, lambda s, t: scenario_covariance(config.covariance, s, t),
                                    config.mise_grid)
        except NumericalError as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


@dataclass(frozen=True)
class MiseResult:
    """MISE summary for one cell; ``values`` holds successful replicates only."""

    values: np.ndarray
    n_fail: int

    @property
    def mise(self) -> float:
        return float(np.mean(self.values)) if self.values.size else math.nan

    @property
    def sd(self) -> float:
        return float(np.std(self.values, ddof=1)) if self.values.size > 1 else 0.0

    @property
    def se(self) -> float:
        return self.sd / math.sqrt(self.values.size) if self.values.size else math.nan

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if self.values.size else math.nan


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: dict  # (scenario, n, delta, variant) -> MiseResult
    outcomes: list

    def cell(self, n, delta, variant) -> MiseResult:
        return self.cells[self.config.scenario_label, n, delta, variant]

    def write_summary(self, path, scale: float = 1.0) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "n", "delta", "variant", "mise", "se", "n_fail"])
            for (scen, n, delta, variant), res in self.cells.items():
                w.writerow([scen, n, delta, variant, format(scale * res.mise, ".10g"),
                            format(scale * res.se, ".10g"), res.n_fail])

    def write_replicates(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "n", "delta", "variant", "replicate", "seed", "mise", "tuning", "error"])
            for o in self.outcomes:
                w.writerow([self.config.scenario_label, o.n, o.delta, o.variant, o.replicate, o.seed,
                            format(o.mise, ".17g"), json.dumps(o.tuning, sort_keys=True), o.error])


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run all replicates of all cells.

    Replicates are independent and may run in worker processes; results are
    gathered by key, so the table does not depend on execution order.

    Raises
    ------
    ExperimentFailure
        If more than 20% of the replicates of any cell failed.
    """
    tasks = [(n, d, r) for n in config.n for d in config.delta for r in range(config.replicates)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            batches = list(ex.map(run_replicate, *zip(*[(config, *t) for t in tasks])))
    else:
        batches = [run_replicate(config, *t) for t in tasks]
    outcomes = [o for batch in batches for o in batch]
    outcomes.sort(key=lambda o: (o.n, o.delta, config.variants.index(o.variant), o.replicate))

    cells = {}
    bad = []
    for n, delta, variant in config.cells():
        recs = [o for o in outcomes if o.n == n and o.delta == delta and o.variant == variant]
        vals = np.array([o.mise for o in recs if o.ok])
        n_fail = sum(not o.ok for o in recs)
        cells[config.scenario_label, n, delta, variant] = MiseResult(vals, n_fail)
        if n_fail > MAX_FAILURE_FRACTION * len(recs):
            bad.append(f"{n_fail}/{len(recs)} replicates failed in cell n={n}, delta={delta}, variant={variant}")
    result = ExperimentResult(config, cells, outcomes)
    if bad:
        raise ExperimentFailure("; ".join(bad), result)
    return result
