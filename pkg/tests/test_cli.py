import json

import numpy as np
import pytest

from gsgp import cli
from gsgp.bench import SyntheticSpec, gen_sine
from gsgp.gp import LoglikResult, load_model
from gsgp.io import load_stats, write_csv


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def dataset(tmp_path, capsys):
    path = tmp_path / "d.bin"
    code, _, _ = run(capsys, "synth", "--n", 3000, "--seed", 1, "--out", path)
    assert code == 0
    return path


@pytest.fixture
def points(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("x\n0.1\n0.35\n0.8\n")
    return path


def test_synth_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--n", 50, "--data-format", "csv", "--out", tmp_path / "s.csv")
    assert code == 0 and json.loads(out)["n"] == 50
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x0,y"


def test_stats_then_fit_then_predict(tmp_path, capsys, dataset, points):
    code, out, _ = run(capsys, "stats", "--data", dataset, "--grid", 64, "--probes", 5,
                       "--out", tmp_path / "s.bin")
    assert code == 0
    info = json.loads(out)
    assert info["n"] == 3000 and info["m"] == 64 and info["probes"] == 5
    assert load_stats(tmp_path / "s.bin").n == 3000

    code, out, _ = run(capsys, "fit-mean", "--stats", tmp_path / "s.bin", "--predict", points,
                       "--out", tmp_path / "m.bin")
    assert code == 0
    mean = np.array(json.loads(out)["mean"])
    np.testing.assert_allclose(mean, np.sin(4 * np.pi * np.array([0.1, 0.35, 0.8])), atol=0.15)
    assert load_model(tmp_path / "m.bin").path == "gsgp"


def test_ski_and_gsgp_paths_agree(capsys, dataset, points):
    _, a, _ = run(capsys, "fit-mean", "--data", dataset, "--grid", 64, "--path", "ski", "--tol", 1e-8,
                  "--predict", points)
    _, b, _ = run(capsys, "fit-mean", "--data", dataset, "--grid", 64, "--path", "gsgp", "--tol", 1e-8,
                  "--predict", points)
    np.testing.assert_allclose(json.loads(a)["mean"], json.loads(b)["mean"], rtol=1e-6)


def test_center_adds_mean_back(tmp_path, capsys, points):
    X, y = gen_sine(SyntheticSpec(800, seed=2))
    write_csv(tmp_path / "d.csv", X, y + 5.0)
    _, out, _ = run(capsys, "fit-mean", "--data", tmp_path / "d.csv", "--grid", 32, "--center",
                    "--predict", points)
    info = json.loads(out)
    assert info["mean_offset"] == pytest.approx(5.0 + y.mean())
    assert np.all(np.abs(np.array(info["mean"]) - 5.0) < 1.5)


def test_cov_exact_and_lowrank(tmp_path, capsys, dataset, points):
    run(capsys, "fit-mean", "--data", dataset, "--grid", 32, "--out", tmp_path / "m.bin")
    code, out, _ = run(capsys, "cov", "--model", tmp_path / "m.bin", "--points", points)
    assert code == 0
    C = np.array(json.loads(out)["matrix"])
    assert C.shape == (3, 3) and np.allclose(C, C.T)
    code, out, _ = run(capsys, "cov", "--model", tmp_path / "m.bin", "--points", points,
                       "--method", "lowrank", "--rank", 32, "--save-rank", "--format", "csv")
    assert code == 0
    L = np.loadtxt(out.splitlines(), delimiter=",")
    np.testing.assert_allclose(L, C, atol=1e-4 * np.abs(C).max())
    # Lanczos may stop early on an invariant subspace
    assert 0 < load_model(tmp_path / "m.bin").lowrank.k <= 32


def test_loglik_routes(tmp_path, capsys, dataset):
    run(capsys, "stats", "--data", dataset, "--grid", 32, "--probes", 10, "--out", tmp_path / "s.bin")
    code, out, _ = run(capsys, "loglik", "--stats", tmp_path / "s.bin")
    assert code == 0
    a = LoglikResult.from_json(out)
    assert a.route == "factorized" and a.num_probes == 10
    _, out, _ = run(capsys, "loglik", "--stats", tmp_path / "s.bin", "--logdet", "dense",
                    "--out", tmp_path / "ll.json")
    b = LoglikResult.from_json((tmp_path / "ll.json").read_text())
    assert b.route == "dense"
    assert abs(a.loglik - b.loglik) <= 0.02 * abs(b.loglik)


def test_exact(tmp_path, capsys, points):
    X, y = gen_sine(SyntheticSpec(200, seed=0))
    write_csv(tmp_path / "d.csv", X, y)
    code, out, _ = run(capsys, "exact", "--data", tmp_path / "d.csv", "--points", points)
    assert code == 0
    info = json.loads(out)
    assert info["n"] == 200 and len(info["mean"]) == 3 and all(v > 0 for v in info["var"])


def test_bench(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--n", "1000,2000", "--grid", 32, "--trials", 2, "--loglik",
                       "--probes", 3, "--format", "csv", "--out", tmp_path / "b")
    assert code == 0
    assert out.count("[ok]") == 4
    names = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert names == ["fig3_periter.csv", "fig5_runtime.csv", "reports.csv"]


def test_missing_file_is_input_error(tmp_path, capsys):
    code, _, err = run(capsys, "stats", "--data", tmp_path / "nope.csv", "--grid", 8,
                       "--out", tmp_path / "s.bin")
    assert code == 1 and "input error" in err


def test_malformed_row_reports_line(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("x,y\n0.1,1\n0.2,oops\n")
    code, _, err = run(capsys, "stats", "--data", tmp_path / "bad.csv", "--grid", 8, "--bounds", "0:1",
                       "--out", tmp_path / "s.bin")
    assert code == 1 and "3" in err


def test_point_outside_grid_is_input_error(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("0.5,1\n9.0,2\n")
    code, _, _ = run(capsys, "stats", "--data", tmp_path / "d.csv", "--grid", 8, "--bounds", "0:1",
                     "--out", tmp_path / "s.bin")
    assert code == 1


def test_non_convergence_exit_code(tmp_path, capsys, dataset):
    code, _, err = run(capsys, "fit-mean", "--data", dataset, "--grid", 64, "--tol", 1e-12,
                       "--maxiter", 2)
    assert code == 2 and "solver" in err


def test_usage_error_is_input_error(capsys):
    assert cli.main(["fit-mean", "--scheme", "quintic"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["--help"]) == 0
