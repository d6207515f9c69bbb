"""Command-line front end.

Exit codes: 0 on success, 1 for user errors (bad flags, unreadable or
invalid input), 2 for numerical failures. Every subcommand echoes its
resolved configuration, including auto-selected tuning, to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .basis import BasisKind, BasisSpec
from .covfit import DEFAULT_LAMBDA_GRID, DEFAULT_P_GRID, CovFit, NewtonOptions, newton_fit, precompute_design, select_cov_tuning
from .data import Scheme, estimate_delta, load_csv, raw_covariances, write_csv
from .exceptions import DataError, NumericalError
from .experiments import ExperimentConfig, ExperimentFailure, run_experiment
from .fpca import eigenpairs
from .mean import DEFAULT_Q_GRID, DEFAULT_RHO_GRID, MeanFit, cv_select_mean, fit_mean
from .pilot import pilot_covariance
from .simulation import CovScenario, MeanScenario, SimulationScenario, noise_variance, simulate

DEFAULT_ZETA = 0.1
FULL_REPLICATES = 100

EXIT_OK, EXIT_USER, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _echo(config: dict) -> None:
    print(json.dumps(config, sort_keys=True), file=sys.stderr)


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _read_json(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{what} {path} is not a JSON object")
    return doc


def _auto_or(cast):
    def parse(text):
        if text == "auto":
            return "auto"
        try:
            return cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None

    return parse


def _basis(kind: str, zeta) -> BasisSpec:
    kind = BasisKind(kind)
    if kind is BasisKind.FOURIER_EXT:
        return BasisSpec(kind, DEFAULT_ZETA if zeta == "auto" else zeta)
    if zeta not in ("auto", 0.0):
        raise DataError("--zeta only applies to the fourier-ext basis")
    return BasisSpec(kind)


def _grid_csv(path, grid, values) -> None:
    lines = ["s,t,value"]
    for a, s in enumerate(grid):
        for b, t in enumerate(grid):
            v = values[a, b]
            if np.isfinite(v):
                lines.append(f"{s:.17g},{t:.17g},{v:.17g}")
    _write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    name = args.scenario
    if name in {m.value for m in MeanScenario}:
        mean, cov = name, CovScenario.GAMMA1.value
    elif name in {c.value for c in CovScenario}:
        mean, cov = MeanScenario.MU1.value, name
    else:
        raise DataError(f"unknown scenario {name!r}")
    scenario = SimulationScenario(mean, cov, args.delta, args.n, args.snr)
    sigma2 = noise_variance(cov, args.snr) if not args.no_noise else 0.0
    _echo({"command": "simulate", "mean": mean, "covariance": cov, "n": args.n, "delta": args.delta,
           "seed": args.seed, "snr": args.snr, "noise": not args.no_noise, "sigma2": sigma2, "out": args.out})
    data = simulate(scenario, args.seed, noise=not args.no_noise)
    try:
        write_csv(data, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror}") from None
    print(f"sigma2 {sigma2:.17g}")
    return EXIT_OK


def cmd_fit_mean(args) -> int:
    data = load_csv(args.data)
    spec = _basis(args.basis, args.zeta)
    scheme = Scheme(args.scheme)
    q, rho = args.q, args.rho
    if q == "auto" or rho == "auto":
        q_grid = DEFAULT_Q_GRID if q == "auto" else (q,)
        rho_grid = DEFAULT_RHO_GRID if rho == "auto" else (rho,)
        cv = cv_select_mean(data, spec, q_grid, rho_grid, args.folds, args.seed, scheme)
        print("q,rho,cv_error")
        for row in cv.rows():
            print(f"{row[0]},{row[1]:.6g},{row[2]:.10g}")
        q, rho = cv.q, cv.rho
    fit = fit_mean(data, spec, q, rho, scheme)
    _echo({"command": "fit-mean", **spec.to_dict(), "q": fit.q, "rho": fit.rho, "scheme": scheme.value,
           "folds": args.folds, "seed": args.seed, "data": args.data, "out": args.out})
    _write_text(args.out, fit.to_json() + "\n")
    return EXIT_OK


def cmd_fit_cov(args) -> int:
    data = load_csv(args.data)
    mfit = MeanFit.from_dict(_read_json(args.mean_fit, "mean fit"))
    spec = _basis(args.basis, args.zeta)
    scheme = Scheme(args.scheme)
    opts = NewtonOptions(max_iter=args.max_iter)
    p, lam = args.p, args.lam
    if p == "auto" or lam == "auto":
        raw = raw_covariances(data, mfit, scheme)
        pilot = pilot_covariance(raw, args.pilot_grid, "auto", estimate_delta(data))
        if args.pilot_out:
            _grid_csv(args.pilot_out, pilot.grid, pilot.values)
        p_grid = DEFAULT_P_GRID if p == "auto" else (p,)
        lam_grid = DEFAULT_LAMBDA_GRID if lam == "auto" else (lam,)
        tuned = select_cov_tuning(data, mfit, spec, p_grid, lam_grid, pilot, scheme, opts)
        print("p,lambda,band_error")
        for row in tuned.rows():
            print(f"{row[0]},{row[1]:.6g},{row[2]:.10g}")
        fit = tuned.fit
    else:
        if int(p) != p:
            raise DataError(f"--p must be an integer, got {p}")
        fit = newton_fit(precompute_design(data, mfit, spec, int(p), scheme), lam, opts)
    diag = fit.diagnostics
    _echo({"command": "fit-cov", **spec.to_dict(), "p": fit.p, "lambda": fit.lam, "scheme": scheme.value,
           "data": args.data, "mean_fit": args.mean_fit, "out": args.out,
           "iterations": diag["iterations"], "termination": diag["termination"]})
    print(f"iterations {diag['iterations']} termination {diag['termination']}")
    _write_text(args.out, fit.to_json() + "\n")
    if args.grid is not None:
        if args.grid < 2:
            raise DataError("--grid must be at least 2")
        g = np.linspace(0.0, 1.0, args.grid)
        _grid_csv(args.grid_out or str(Path(args.out).with_suffix(".grid.csv")), g, fit.surface(g))
    if diag["termination"] == "stalled":
        print("error: Newton iteration stalled; diagnostics written to the fit document", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_fpca(args) -> int:
    fit = CovFit.from_dict(_read_json(args.cov_fit, "covariance fit"))
    system = eigenpairs(fit, args.k)
    if args.grid < 2:
        raise DataError("--grid must be at least 2")
    grid = np.linspace(0.0, 1.0, args.grid)
    psi = system.eigenfunctions(grid)
    fractions = system.fractions
    _echo({"command": "fpca", "cov_fit": args.cov_fit, "k": system.k, "grid": args.grid,
           "out_prefix": args.out_prefix})
    doc = {
        "type": "fpca",
        "k": system.k,
        "eigenvalues": [float(format(x, ".17g")) for x in system.eigenvalues],
        "fractions": [float(format(x, ".17g")) for x in fractions],
        "total_variance": float(format(system.total_variance, ".17g")),
    }
    _write_text(f"{args.out_prefix}.json", json.dumps(doc, indent=2) + "\n")
    header = ["t"] + [f"psi{j + 1}" for j in range(system.k)]
    lines = [",".join(header)]
    for a, t in enumerate(grid):
        lines.append(",".join([f"{t:.17g}"] + [f"{v:.17g}" for v in psi[a]]))
    _write_text(f"{args.out_prefix}_eigenfunctions.csv", "\n".join(lines) + "\n")
    for j, (ev, fr) in enumerate(zip(system.eigenvalues, fractions)):
        print(f"component {j + 1}: eigenvalue {ev:.6g} fraction {fr:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    changes = {}
    if args.full:
        changes["replicates"] = FULL_REPLICATES
    if args.threads is not None:
        if args.threads < 1:
            raise DataError("--threads must be at least 1")
        changes["workers"] = args.threads
    config = dataclasses.replace(config, **changes)
    _echo({"command": "experiment", **config.to_dict(), "out_dir": args.out_dir})
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    code = EXIT_OK
    try:
        result = run_experiment(config)
    except ExperimentFailure as exc:
        if exc.result is None:
            raise
        result = exc.result
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    result.write_summary(out / "summary.csv", args.scale)
    result.write_replicates(out / "replicates.csv")
    _write_text(out / "config.json", json.dumps(config.to_dict(), indent=2) + "\n")
    with (out / "summary.csv").open(encoding="utf-8") as fh:
        for row in csv.reader(fh):
            print(",".join(row))
    return code


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snippetfda", description="Mean and covariance estimation for functional snippets.")
    sub = parser.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in BasisKind]
    schemes = [s.value for s in Scheme]

    sp = sub.add_parser("simulate", help="draw a simulated snippet dataset")
    sp.add_argument("--scenario", required=True, help="mu1, mu2 or gamma1..gamma4")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--snr", type=float, default=4.0)
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit-mean", help="fit the mean function")
    sp.add_argument("--data", required=True)
    sp.add_argument("--basis", choices=kinds, default="fourier-ext")
    sp.add_argument("--zeta", type=_auto_or(float), default="auto")
    sp.add_argument("--q", type=_auto_or(int), default="auto")
    sp.add_argument("--rho", type=_auto_or(float), default="auto")
    sp.add_argument("--scheme", choices=schemes, default="OBS")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_mean)

    sp = sub.add_parser("fit-cov", help="fit the covariance function")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mean-fit", required=True)
    sp.add_argument("--basis", choices=kinds, default="fourier-ext")
    sp.add_argument("--zeta", type=_auto_or(float), default="auto")
    sp.add_argument("--p", type=_auto_or(int), default="auto")
    sp.add_argument("--lambda", dest="lam", type=_auto_or(float), default="auto")
    sp.add_argument("--scheme", choices=schemes, default="OBS")
    sp.add_argument("--pilot-grid", type=int, default=51)
    sp.add_argument("--pilot-out", help="write the pilot surface as CSV")
    sp.add_argument("--max-iter", type=int, default=50)
    sp.add_argument("--grid", type=int, help="also evaluate the fit on a G x G grid")
    sp.add_argument("--grid-out", help="grid CSV path (default: OUT with .grid.csv)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_cov)

    sp = sub.add_parser("fpca", help="principal components of a covariance fit")
    sp.add_argument("--cov-fit", required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--grid", type=int, default=101)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_fpca)

    sp = sub.add_parser("experiment", help="run a Monte Carlo experiment")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--full", action="store_true", help=f"use {FULL_REPLICATES} replicates")
    sp.add_argument("--threads", type=int, help="maximum worker processes")
    sp.add_argument("--scale", type=float, default=1.0, help="multiply MISE columns in the summary")
    sp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
