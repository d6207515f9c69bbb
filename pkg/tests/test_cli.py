import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from snippetfda import cli
from snippetfda.basis import BasisKind, BasisSpec
from snippetfda.covfit import CovFit, select_cov_tuning
from snippetfda.data import estimate_delta, load_csv, raw_covariances
from snippetfda.fpca import eigenpairs
from snippetfda.mean import MeanFit, cv_select_mean
from snippetfda.pilot import pilot_covariance

FEXT = BasisSpec(BasisKind.FOURIER_EXT, 0.1)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["simulate", "--scenario", "gamma1", "--n", "80", "--delta", "0.3", "--seed", "4",
                     "--out", str(d / "data.csv")]) == 0
    assert cli.main(["fit-mean", "--data", str(d / "data.csv"), "--out", str(d / "mean.json")]) == 0
    return d


class TestSimulate:
    def test_rows_and_sigma(self, tmp_path, capsys):
        out = tmp_path / "d.csv"
        assert run("simulate", "--scenario", "gamma1", "--n", 50, "--delta", 0.25, "--seed", 1, "--out", out) == 0
        assert load_csv(out).n == 50
        captured = capsys.readouterr()
        assert captured.out.startswith("sigma2 0.651234")
        assert json.loads(captured.err.strip())["covariance"] == "gamma1"

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for path in (a, b):
            run("simulate", "--scenario", "mu2", "--n", 20, "--delta", 0.5, "--seed", 3, "--out", path)
        assert a.read_bytes() == b.read_bytes()

    @pytest.mark.parametrize("extra", [["--delta", "1.5"], ["--scenario", "gamma9"], ["--bogus", "1"]])
    def test_user_errors(self, tmp_path, extra, capsys):
        args = {"--scenario": "gamma1", "--n": "10", "--delta": "0.25", "--seed": "1", "--out": str(tmp_path / "x.csv")}
        argv = ["simulate"]
        for k, v in args.items():
            if k not in extra:
                argv += [k, v]
        with pytest.raises(SystemExit) as info:
            code = cli.main(argv + extra)
            raise SystemExit(code)
        assert info.value.code == 1

    def test_unwritable(self, tmp_path):
        assert run("simulate", "--scenario", "gamma1", "--n", 5, "--delta", 0.25, "--seed", 1,
                   "--out", tmp_path / "missing" / "x.csv") == 1


class TestFitMean:
    def test_auto_matches_library(self, workdir, capsys):
        doc = json.loads((workdir / "mean.json").read_text())
        cv = cv_select_mean(load_csv(workdir / "data.csv"), FEXT)
        assert (doc["q"], doc["rho"]) == (cv.q, cv.rho)
        assert doc["kind"] == "fourier-ext" and doc["zeta"] == 0.1

    def test_fixed_and_deterministic(self, workdir, tmp_path, capsys):
        outs = [tmp_path / "m1.json", tmp_path / "m2.json"]
        for o in outs:
            assert run("fit-mean", "--data", workdir / "data.csv", "--basis", "legendre", "--q", 5, "--rho", 0.001,
                       "--out", o) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert json.loads(outs[0].read_text())["q"] == 5
        assert "q,rho,cv_error" not in capsys.readouterr().out

    def test_errors(self, workdir, tmp_path):
        assert run("fit-mean", "--data", tmp_path / "nope.csv", "--out", tmp_path / "m.json") == 1
        assert run("fit-mean", "--data", workdir / "data.csv", "--basis", "fourier", "--zeta", 0.2,
                   "--out", tmp_path / "m.json") == 1


class TestFitCov:
    def test_fixed_with_grid(self, workdir, tmp_path, capsys):
        out = tmp_path / "cov.json"
        assert run("fit-cov", "--data", workdir / "data.csv", "--mean-fit", workdir / "mean.json",
                   "--p", 5, "--lambda", 0.001, "--grid", 11, "--out", out) == 0
        fit = CovFit.from_dict(json.loads(out.read_text()))
        assert fit.p == 5 and fit.lam == 0.001
        rows = list(csv.reader((tmp_path / "cov.grid.csv").open()))
        assert rows[0] == ["s", "t", "value"] and len(rows) == 1 + 121
        assert "termination" in capsys.readouterr().out

    def test_auto_matches_library(self, workdir, tmp_path):
        out = tmp_path / "cov.json"
        assert run("fit-cov", "--data", workdir / "data.csv", "--mean-fit", workdir / "mean.json",
                   "--pilot-out", tmp_path / "pilot.csv", "--out", out) == 0
        doc = json.loads(out.read_text())
        data = load_csv(workdir / "data.csv")
        mfit = MeanFit.from_dict(json.loads((workdir / "mean.json").read_text()))
        pilot = pilot_covariance(raw_covariances(data, mfit), 51, "auto", estimate_delta(data))
        res = select_cov_tuning(data, mfit, FEXT, pilot=pilot)
        assert (doc["p"], doc["lambda"]) == (res.p, res.lam)
        np.testing.assert_array_equal(np.reshape(doc["C"], (res.p, res.p)), res.fit.C)
        assert (tmp_path / "pilot.csv").exists()

    def test_invalid_mean_fit(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"type": "mean_fit", "kind": "fourier"}')
        assert run("fit-cov", "--data", workdir / "data.csv", "--mean-fit", bad, "--out", tmp_path / "c.json") == 1
        bad.write_text("not json")
        assert run("fit-cov", "--data", workdir / "data.csv", "--mean-fit", bad, "--out", tmp_path / "c.json") == 1

    def test_stall_exit_code(self, workdir, tmp_path, monkeypatch):
        def stalled(design, lam, opts=None):
            return CovFit(design.spec, np.eye(design.p), lam, {"iterations": 3, "termination": "stalled"})

        monkeypatch.setattr(cli, "newton_fit", stalled)
        out = tmp_path / "c.json"
        assert run("fit-cov", "--data", workdir / "data.csv", "--mean-fit", workdir / "mean.json",
                   "--p", 3, "--lambda", 0.01, "--out", out) == 2
        assert json.loads(out.read_text())["diagnostics"]["termination"] == "stalled"


class TestFpca:
    @pytest.fixture
    def diag_fit(self, tmp_path):
        path = tmp_path / "fit.json"
        path.write_text(CovFit(BasisSpec(BasisKind.FOURIER), np.diag([3.0, 1.0, 0.5]), 0.0).to_json())
        return path

    def test_parity_with_library(self, diag_fit, tmp_path):
        prefix = tmp_path / "pc"
        assert run("fpca", "--cov-fit", diag_fit, "--k", 2, "--grid", 5, "--out-prefix", prefix) == 0
        doc = json.loads((tmp_path / "pc.json").read_text())
        es = eigenpairs(CovFit.from_dict(json.loads(diag_fit.read_text())), 2)
        np.testing.assert_allclose(doc["eigenvalues"], es.eigenvalues)
        assert sum(doc["fractions"]) <= 1.0
        rows = list(csv.reader((tmp_path / "pc_eigenfunctions.csv").open()))
        assert rows[0] == ["t", "psi1", "psi2"] and len(rows) == 6
        np.testing.assert_allclose(np.array(rows[1:], dtype=float)[:, 1:], es.eigenfunctions(np.linspace(0, 1, 5)))

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, diag_fit, tmp_path, k):
        assert run("fpca", "--cov-fit", diag_fit, "--k", k, "--out-prefix", tmp_path / "pc") == 1


class TestExperiment:
    CONFIG = {"target": "mean", "n": [30], "delta": [0.5], "replicates": 1, "q_grid": [3, 5], "rho_grid": [1e-3]}

    def test_smoke(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(self.CONFIG))
        assert run("experiment", "--config", cfg, "--out-dir", tmp_path / "out") == 0
        rows = list(csv.reader((tmp_path / "out" / "summary.csv").open()))
        assert len(rows) == 1 + 2
        echoed = json.loads((tmp_path / "out" / "config.json").read_text())
        assert {k: echoed[k] for k in self.CONFIG} == self.CONFIG

    def test_config_error(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**self.CONFIG, "colour": "red"}))
        assert run("experiment", "--config", cfg, "--out-dir", tmp_path / "out") == 1

    def test_failure_exit(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"target": "cov", "n": [5], "delta": [0.1], "variants": ["NFE"], "replicates": 1,
                                   "p_grid": [11], "lambda_grid": [1e-3], "q_grid": [3], "rho_grid": [1e-2],
                                   "pilot_grid": 11}))
        assert run("experiment", "--config", cfg, "--out-dir", tmp_path / "out") == 2
        assert (tmp_path / "out" / "replicates.csv").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "snippetfda.cli", "simulate", "--scenario", "mu1", "--n", "3",
                           "--delta", "0.5", "--seed", "0", "--out", str(tmp_path / "d.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "sigma2" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "snippetfda.cli", "fpca"], capture_output=True, text=True)
    assert proc.returncode == 1
