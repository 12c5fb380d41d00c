import csv
import json

import pytest

from linpam.cli import main, parse_beta_grid, parse_taper_grid
from linpam.errors import ConfigError


def test_parse_beta_grid():
    assert parse_beta_grid("1.0:1.2:0.01") == tuple(round(1.0 + 0.01 * i, 12) for i in range(21))
    assert parse_beta_grid("1.05") == (1.05,)
    for bad in ("1.2:1.0:0.01", "1:2:0", "a:b:c", "1:2"):
        with pytest.raises(ConfigError):
            parse_beta_grid(bad)


def test_parse_taper_grid():
    assert parse_taper_grid("2,4,8,16,32,inf") == (2.0, 4.0, 8.0, 16.0, 32.0, None)
    assert parse_taper_grid("none") == (None,)
    with pytest.raises(ConfigError):
        parse_taper_grid("2,wide")


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["synthetic", "--filter", "cons-enkf", "--r", "5", "--cycles", "20",
                 "--spinup", "10", "--beta-grid", "1.0:1.02:0.01", "--taper-grid", "4,inf",
                 "--reps", "2", "--seed", "7", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["filter"] == "cons_enkf" and summary["config"]["seed"] == 7
    assert summary["tuned"]["beta"] in (1.0, 1.01, 1.02)
    assert summary["tuned"]["radius"] in (4.0, "inf")
    with (out / "metrics.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 21
    assert (out / "metrics_rep1.csv").exists()
    assert "rmse_avg=" in capsys.readouterr().out


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LINPAM_SEED", "11")
    main(["synthetic", "--cycles", "4", "--spinup", "2", "--beta-grid", "1.0",
          "--taper-grid", "none", "--out", str(tmp_path)])
    assert json.loads((tmp_path / "summary.json").read_text())["config"]["seed"] == 11


def test_model_param_passthrough(tmp_path):
    main(["synthetic", "--cycles", "4", "--spinup", "2", "--beta-grid", "1.0",
          "--taper-grid", "none", "--param", "sigma_e=0.2", "--r", "3", "--out", str(tmp_path)])
    cfg = json.loads((tmp_path / "summary.json").read_text())["config"]
    assert cfg["model_params"] == {"sigma_e": 0.2, "r": 3}


def test_sweep_command(tmp_path):
    conf = {"model": "synthetic", "filter": "un_enkf", "cycles": 6, "spinup": 3,
            "beta_grid": [1.0], "taper_grid": ["inf"], "sweep": {"M": [20, 30], "r": [2]},
            "out": str(tmp_path / "sw")}
    path = tmp_path / "conf.json"
    path.write_text(json.dumps(conf))
    assert main(["sweep", "--config", str(path)]) == 0
    with (tmp_path / "sw" / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["M"], r["r"]) for r in rows] == [("20", "2"), ("30", "2")]


@pytest.mark.parametrize("extra", [{"sweep": {"N": [1]}}, {"colour": "red"}])
def test_sweep_rejects_unknown_keys(tmp_path, extra):
    conf = {"model": "synthetic", "cycles": 6, "spinup": 3}
    conf.update(extra)
    path = tmp_path / "conf.json"
    path.write_text(json.dumps(conf))
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--config", str(path), "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_invalid_arguments_exit_with_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synthetic", "--cycles", "5", "--spinup", "5", "--out", str(tmp_path)])
    assert exc.value.code == 2
