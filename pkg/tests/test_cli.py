import csv
import io
import json
import math
import shutil
import subprocess

import numpy as np
import pytest

from mdypl.cli import EXIT_CONFIG, EXIT_FIT, EXIT_IO, EXIT_OK, EXIT_SOLVER, main
from mdypl.estimator import Dataset, write_dataset
from mdypl.simulation import ScenarioSpec, gen_dataset


def read_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def toy_separated(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("y,x\n1,0.7071067811865476\n1,0.7071067811865476\n"
                    "0,-0.7071067811865476\n0,-0.7071067811865476\n")
    return str(path)


@pytest.fixture
def sim_data(tmp_path):
    spec = ScenarioSpec(n=600, kappa=0.1, gamma=math.sqrt(0.9), seed=4)
    path = str(tmp_path / "data.csv")
    write_dataset(path, gen_dataset(spec, 0))
    return path


class TestSolveSe:
    def test_golden_row(self, capsys):
        code = main(["solve-se", "--kappa", "0.2", "--gamma", "0.9486833", "--alpha", "0.8333333"])
        assert code == EXIT_OK
        row = read_rows(capsys.readouterr().out)[0]
        assert abs(float(row["mu"]) - 0.914) <= 5e-3
        assert row["converged"] == "true"
        for col in ("kappa", "gamma_or_upsilon", "alpha", "lambda", "theta0", "mu", "b", "sigma",
                    "iota", "residual_norm", "jac_cond", "converged"):
            assert col in row

    def test_intercept_and_ridge(self, capsys):
        assert main(["solve-se", "--kappa", "0.2", "--gamma", "1.5", "--alpha", "0.8",
                     "--theta0", "0"]) == EXIT_OK
        row = read_rows(capsys.readouterr().out)[0]
        assert abs(float(row["iota"])) <= 1e-6
        assert main(["solve-se", "--kappa", "0.2", "--gamma", "1.5", "--lambda", "0.5"]) == EXIT_OK
        assert read_rows(capsys.readouterr().out)[0]["lambda"] == "0.5"

    def test_bad_kappa(self, capsys):
        assert main(["solve-se", "--kappa", "1.5", "--gamma", "1"]) == EXIT_CONFIG
        assert "error[bad_config]" in capsys.readouterr().err

    def test_missing_signal(self, capsys):
        assert main(["solve-se", "--kappa", "0.2"]) == EXIT_CONFIG

    def test_solver_failure(self, capsys):
        code = main(["solve-se", "--kappa", "0.5", "--upsilon", "0.01", "--alpha", "0.5"])
        assert code == EXIT_SOLVER
        assert "error[solver_nonconvergence]" in capsys.readouterr().err

    def test_metadata_round_trip(self, tmp_path):
        out = str(tmp_path / "se.csv")
        assert main(["solve-se", "--kappa", "0.2", "--gamma", "0.9486833", "--alpha",
                     "0.8333333", "-o", out]) == EXIT_OK
        first = open(out).read()
        meta = out + ".meta.jsonl"
        rec = json.loads(open(meta).read().splitlines()[-1])
        assert rec["config"]["command"] == "solve-se"
        assert rec["wall_time"] >= 0
        out2 = str(tmp_path / "replay.csv")
        assert main(["solve-se", "--config", meta, "-o", out2]) == EXIT_OK
        assert open(out2).read() == first

    def test_flags_override_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"kappa": 0.2, "gamma": 0.9486833, "alpha": 0.5}))
        assert main(["solve-se", "--config", str(cfg), "--alpha", "0.8333333"]) == EXIT_OK
        assert read_rows(capsys.readouterr().out)[0]["alpha"] == "0.8333333"

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"kapa": 0.2}))
        assert main(["solve-se", "--config", str(cfg)]) == EXIT_CONFIG


class TestFit:
    def test_separated_toy_diverges(self, toy_separated, capsys):
        assert main(["fit", "--data", toy_separated, "--alpha", "1.0"]) == EXIT_FIT
        assert "error[fit_divergence]" in capsys.readouterr().err

    def test_toy_mdypl(self, toy_separated, capsys):
        assert main(["fit", "--data", toy_separated, "--alpha", "0.5"]) == EXIT_OK
        rows = read_rows(capsys.readouterr().out)
        coef = [r for r in rows if r["quantity"] == "coef"]
        assert float(coef[0]["value"]) == pytest.approx(math.sqrt(2) * math.log(3), abs=1e-8)
        assert sum(r["quantity"] == "hat" for r in rows) == 4

    def test_missing_file(self, capsys):
        assert main(["fit", "--data", "/nonexistent/data.csv"]) == EXIT_IO
        assert "error[io_error]" in capsys.readouterr().err

    def test_npz(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((50, 3))
        y = (rng.uniform(size=50) < 0.5).astype(float)
        path = str(tmp_path / "d.npz")
        write_dataset(path, Dataset(y, X))
        assert main(["sloe", "--data", path, "--alpha", "0.8"]) == EXIT_OK
        assert float(read_rows(capsys.readouterr().out)[0]["upsilon_hat"]) > 0


class TestInfer:
    def test_estimate_vs_oracle(self, sim_data, tmp_path):
        est, orc = str(tmp_path / "est.csv"), str(tmp_path / "orc.csv")
        base = ["infer", "--data", sim_data, "--alpha", "0.9", "--null-set", "0,1,2"]
        assert main(base + ["-o", est]) == EXIT_OK
        assert main(base + ["--constants", "oracle:gamma=0.9486833", "-o", orc]) == EXIT_OK
        e, o = read_rows(open(est).read()), read_rows(open(orc).read())
        ez = [r for r in e if r["row"] == "coef"]
        oz = [r for r in o if r["row"] == "coef"]
        assert len(ez) == len(oz) == 60
        assert ez[0]["constants"] == "estimate" and oz[0]["constants"] == "oracle"
        ratio = [float(a["z"]) / float(b["z"]) for a, b in zip(ez, oz)]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)
        np.testing.assert_allclose(ratio[0], float(oz[0]["sigma"]) / float(ez[0]["sigma"]),
                                   rtol=1e-9)
        assert [r["row"] for r in e].count("plr") == 1

    def test_explicit_constants(self, sim_data, capsys):
        assert main(["infer", "--data", sim_data, "--alpha", "0.9", "--constants",
                     "oracle:mu=0.9,b=1.2,sigma=2.0"]) == EXIT_OK
        row = read_rows(capsys.readouterr().out)[0]
        assert float(row["mu"]) == 0.9

    def test_bad_constants(self, sim_data):
        assert main(["infer", "--data", sim_data, "--constants", "guess"]) == EXIT_CONFIG


class TestSimulate:
    def test_deterministic_across_threads(self, tmp_path):
        outs = []
        for threads in ("1", "3"):
            out = str(tmp_path / f"t{threads}.csv")
            assert main(["simulate", "--experiment", "table1", "--scenarios", "a", "--n", "200",
                         "--replicates", "5", "--threads", threads, "-o", out]) == EXIT_OK
            outs.append(open(out).read())
        assert outs[0] == outs[1]

    def test_replay_from_metadata(self, tmp_path):
        out = str(tmp_path / "q.csv")
        assert main(["simulate", "--experiment", "qq-plr", "--n", "200", "--kappas", "0.1",
                     "--alphas", "0.8", "--ks", "2", "--replicates", "3", "--threads", "1",
                     "-o", out]) == EXIT_OK
        out2 = str(tmp_path / "q2.csv")
        assert main(["simulate", "--config", out + ".meta.jsonl", "-o", out2]) == EXIT_OK
        assert open(out).read() == open(out2).read()

    def test_scenario_file(self, tmp_path, capsys):
        ini = tmp_path / "s.ini"
        ini.write_text("[small]\nn = 200\nkappa = 0.1\ngamma = 1.0\nreplicates = 2\n")
        assert main(["simulate", "--experiment", "scenario", "--scenario-file", str(ini),
                     "--threads", "1"]) == EXIT_OK
        rows = read_rows(capsys.readouterr().out)
        assert [r["scenario"] for r in rows] == ["small", "small"]

    def test_unknown_experiment(self):
        assert main(["simulate", "--experiment", "nope"]) == EXIT_CONFIG


class TestContours:
    def test_single_point(self, capsys):
        assert main(["contours", "--kappas", "0.2", "--gammas", "0.9486833", "--families",
                     "bias", "--threads", "1"]) == EXIT_OK
        row = read_rows(capsys.readouterr().out)[0]
        assert abs(float(row["mu"]) - 0.914) <= 5e-3

    def test_unknown_family(self):
        assert main(["contours", "--kappas", "0.2", "--gammas", "1", "--families", "x"]) == \
            EXIT_CONFIG


def test_console_script():
    exe = shutil.which("mdypl")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "solve-se", "--kappa", "0.2", "--gamma", "0.9486833", "--alpha",
                          "0.8333333"], capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert abs(float(read_rows(res.stdout)[0]["mu"]) - 0.914) <= 5e-3


def test_usage_error_exit_code():
    assert main(["bogus"]) == EXIT_CONFIG
    assert main(["--version"]) == EXIT_OK
