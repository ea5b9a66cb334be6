import math

import numpy as np
import pytest

from coalsis import cli
from coalsis import experiments as ex
from coalsis.formats import write_fa_sample, write_model
from coalsis.model import MutationModel, TypedSample, exact_sampling_probability


@pytest.fixture
def fa_files(tmp_path):
    P = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.2, 0.2, 0.6]])
    data, model = tmp_path / "s.txt", tmp_path / "m.txt"
    write_fa_sample(str(data), TypedSample.from_counts([2, 1, 1]), 3, 0.5)
    write_model(str(model), MutationModel(0.5, P))
    return str(data), str(model), P


def test_parse_config_minimal():
    cfg = ex.parse_config("version = 1\nthetas = 0.1 0.2  # grid\nschedules = S1 S2\n")
    assert cfg.thetas == (0.1, 0.2) and cfg.schedules == ("S1", "S2")


@pytest.mark.parametrize(
    "text, match",
    [
        ("thetas = 0.1\n", "missing 'version'"),
        ("version = 2\n", "unsupported"),
        ("version = 1\nfoo = 1\n", "unknown key"),
        ("version = 1\nreplicates = many\n", "bad value"),
        ("version = 1\nthetas = 0.2 0.1\n", "increasing"),
        ("version = 1\nschedules = S9\n", "unknown schedule"),
        ("version = 1\njust text\n", "key = value"),
    ],
)
def test_parse_config_errors(text, match):
    with pytest.raises(ex.ConfigError, match=match):
        ex.parse_config(text)


def test_format_config_round_trip():
    cfg = ex.ExperimentConfig(data="builtin:fa50", thetas=(0.25, 0.5), gamma=10, seed=4)
    assert ex.parse_config(ex.format_config(cfg)) == cfg


def test_resolved_defaults():
    c = ex.ExperimentConfig().resolved(50)
    assert (c.gamma, c.Gamma) == (100, 10_000)
    c = ex.ExperimentConfig(model="ism").resolved(550)
    assert (c.gamma, c.Gamma) == (2_000, 200_000)


def test_load_builtin():
    data, m = ex.load_data(ex.ExperimentConfig(data="builtin:fa50"))
    assert data.size == 50 and m.d == 2**20
    data, theta = ex.load_data(ex.ExperimentConfig(model="ism", data="builtin:ism55"))
    assert data.size == 55 and theta == pytest.approx(3.93, abs=0.01)
    with pytest.raises(ex.ConfigError):
        ex.load_data(ex.ExperimentConfig(data="builtin:nope"))


def test_surface_estimates(fa_files, tmp_path):
    data, model, P = fa_files
    cfg = ex.ExperimentConfig(data=data, model_file=model, thetas=(0.5, 1.0),
                              schedules=("S1", "S2"), gamma=50, Gamma=500,
                              output=str(tmp_path / "out"), seed=3)
    rows = ex.read_csv(ex.cmd_likelihood_surface(cfg))
    assert len(rows) == 4
    for r in rows:
        exact = exact_sampling_probability(TypedSample.from_counts([2, 1, 1]),
                                  MutationModel(r["theta"], P))
        assert abs(r["estimate"] - exact) < 4 * r["standard_error"] + 1e-12
        assert r["draw_count"] == r["predicted_draw_count"]
        assert r["log_estimate"] == pytest.approx(math.log(r["estimate"]))
    assert (tmp_path / "out" / "surface_timing.csv").exists()


def test_csv_identical_across_workers(fa_files, tmp_path):
    data, model, _ = fa_files
    outs = []
    for w in (1, 2):
        cfg = ex.ExperimentConfig(data=data, model_file=model, thetas=(0.5,),
                                  schedules=("S1", "S4"), gamma=20, Gamma=200, workers=w,
                                  output=str(tmp_path / f"w{w}"))
        outs.append(open(ex.cmd_likelihood_surface(cfg), "rb").read())
    assert outs[0] == outs[1]


def test_varcurve_and_costconv(fa_files, tmp_path):
    data, model, _ = fa_files
    cfg = ex.ExperimentConfig(data=data, model_file=model, replicates=300,
                              output=str(tmp_path))
    rows = ex.read_csv(ex.cmd_variance_curve(cfg, ("GT", "SD")))
    assert {r["proposal"] for r in rows} == {"GT", "SD"}
    assert all(r["variance"] >= 0 for r in rows)
    top = [r for r in rows if r["lineages"] == 4]
    assert all(r["zero_variance"] == 1 for r in top)
    cfg = ex.ExperimentConfig(n_values=(20, 40), t=0.5, replicates=200, output=str(tmp_path))
    rows = ex.read_csv(ex.cmd_cost_convergence(cfg, ("GT",)))
    assert [r["n"] for r in rows] == [20, 40]
    assert all(r["predicted"] == 0.5 for r in rows)


def test_make_data(tmp_path):
    paths = ex.cmd_make_data("fa", str(tmp_path), 30, 0.5, 1, sites=6, nested=(10,))
    assert len(paths) == 3
    from coalsis.formats import read_fa_sample

    big, _, _ = read_fa_sample(paths[2])
    small, _, _ = read_fa_sample(paths[1])
    assert big.size == 30 and small.size == 10
    assert set(small.types) <= set(big.types)
    paths = ex.cmd_make_data("ism", str(tmp_path), 12, 2.0, 1, r_target=5)
    from coalsis.formats import read_ism

    assert read_ism(paths[0]).r == 5


def test_cli_surface(fa_files, tmp_path, capsys):
    data, model, _ = fa_files
    out = str(tmp_path / "c")
    rc = cli.main(["surface", "--data", data, "--model-file", model, "--thetas", "0.5",
                   "--replicates", "100", "--output", out, "--plot"])
    assert rc == 0
    assert capsys.readouterr().out.strip().endswith("surface.csv")
    assert (tmp_path / "c" / "surface.svg").exists()


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["surface", "--data", "builtin:nope", "--thetas", "0.5"]) == 2
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("version = 1\nwhat = 3\n")
    assert cli.main(["surface", "--config", str(bad)]) == 2
    assert cli.main(["surface", "--data", str(tmp_path / "missing.txt"),
                     "--model-file", str(bad), "--thetas", "0.5"]) == 2


def test_cli_seed_from_environment(fa_files, tmp_path, monkeypatch):
    data, model, _ = fa_files
    common = ["surface", "--data", data, "--model-file", model, "--thetas", "0.5",
              "--replicates", "50"]
    monkeypatch.setenv("COALSIS_SEED", "11")
    cli.main(common + ["--output", str(tmp_path / "a")])
    monkeypatch.delenv("COALSIS_SEED")
    cli.main(common + ["--output", str(tmp_path / "b"), "--seed", "11"])
    cli.main(common + ["--output", str(tmp_path / "c"), "--seed", "12"])
    read = lambda d: (tmp_path / d / "surface.csv").read_bytes()
    assert read("a") == read("b") != read("c")


def test_cli_huwtable(tmp_path):
    out = str(tmp_path / "t.huw")
    assert cli.main(["huwtable", "--smax", "30", "--theta", "2.0", "--output", out]) == 0
    from coalsis.huw import HuwTable

    assert HuwTable.load(out).covers(30)
