import json
from pathlib import Path

import numpy as np
import pytest

from fbporosity.cli import main
from fbporosity.config import ConfigError, load_config, parse_config
from fbporosity.export import write_grid_csv
from fbporosity.pipeline import build_problem

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[domain]
n = 2
rho = 0.5
l = 1
center = 0.5
grid_shape = 33, 33

[coefficients]
a = identity
h = {h}
lambda = 1
Lambda = 2
h_lower = 1
h_upper = 1
p = 4
alpha = 0.5

[boundary]
g = pos(0.6 - x2)

[output]
dir = out
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_validate_good_config(tmp_path, capsys):
    assert main(["validate", str(CONFIGS / "dam2d.cfg"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "validation.json").exists()
    assert "h_monotone" in capsys.readouterr().out


def test_validate_bad_h_exits_2(capsys):
    assert main(["validate", str(CONFIGS / "bad_h.cfg")]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_unknown_flag_exits_4(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve", str(CONFIGS / "dam2d.cfg"), "--bogus"])
    assert exc.value.code == 4


def test_missing_config_exits_4(tmp_path):
    assert main(["validate", str(tmp_path / "nope.cfg")]) == 4


def test_solve_column_then_report(tmp_path, capsys):
    out = tmp_path / "col"
    assert main(["solve", str(CONFIGS / "column1d.cfg"), "--out", str(out)]) == 0
    rep = json.loads((out / "run_report.json").read_text())
    assert rep["solver"]["analytic_sup_error"] <= 1 / 127
    assert (out / "solution.csv").exists() and (out / "timings.json").exists()
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "== solver ==" in text and "analytic_sup_error" in text


def test_report_missing_dir_exits_4(tmp_path):
    assert main(["report", str(tmp_path)]) == 4


def test_out_flag_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path, SMALL.format(h="1"))
    alt = tmp_path / "elsewhere"
    assert main(["solve", str(cfg), "--out", str(alt)]) == 0
    assert (alt / "run_report.json").exists()
    assert not (tmp_path / "out").exists()


def test_config_out_dir_relative_to_file(tmp_path):
    cfg = load_config(write_cfg(tmp_path, SMALL.format(h="1")))
    assert cfg.out_dir == tmp_path / "out"


def test_config_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        parse_config(SMALL.format(h="1") + "\n[solver]\ncolour = red\n", tmp_path, "x.cfg")
    with pytest.raises(ConfigError):
        parse_config(SMALL.format(h="1") + "\n[extras]\nk = 1\n", tmp_path, "x.cfg")


def test_config_rejects_small_p(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(SMALL.format(h="1").replace("p = 4", "p = 2"), tmp_path, "x.cfg")


def test_csv_coefficient_field(tmp_path):
    z = np.linspace(0, 1, 33)
    values = np.tile(1 + z / 2, (33, 1))
    write_grid_csv(tmp_path / "h.csv", values)
    text = SMALL.format(h="csv:h.csv").replace("h_upper = 1", "h_upper = 1.5")
    cf = build_problem(load_config(write_cfg(tmp_path, text))).cf
    assert np.array_equal(cf.h, values)


def test_csv_wrong_shape_exits_4(tmp_path):
    write_grid_csv(tmp_path / "h.csv", np.ones((5, 5)))
    cfg = write_cfg(tmp_path, SMALL.format(h="csv:h.csv"))
    assert main(["validate", str(cfg)]) == 4


def test_barrier_subcommand(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL.format(h="1"))
    code = main(["barrier", str(cfg), "--x0", "0.5,0.7", "--r", "0.05", "--eps", "0.1", "--cells-per-r", "8",
                 "--out", str(tmp_path / "b")])
    assert code == 0
    res = json.loads((tmp_path / "b" / "barrier.json").read_text())[0]
    assert res["bounds"]["within_bounds"]
    assert "trace bound" in capsys.readouterr().out


def test_validate_force_flag_accepted():
    assert main(["validate", str(CONFIGS / "bad_h.cfg"), "--force"]) == 2


def test_divergence_exits_3(tmp_path, monkeypatch):
    import fbporosity.solver as solver_mod
    monkeypatch.setattr(solver_mod, "_local_update", lambda u, chi, R, d, hc, om: (2 * u + 1, chi))
    cfg = write_cfg(tmp_path, SMALL.format(h="1") + "\n[solver]\ncheck_every = 1\n")
    assert main(["solve", str(cfg)]) == 3
    assert (tmp_path / "out" / "run_report.json").exists()
