import csv

import numpy as np
import pytest

from thermistor.cli import (EXIT_BASIN, EXIT_INVALID, EXIT_IO, EXIT_OK, ConfigError, main,
                            parse_config, parse_config_text, run_scenario)

SMALL_GRID = "[grid]\nn_cells = 16\nn_steps = 32\n"


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _report(out):
    header, row = _read(out / "report.csv")
    return dict(zip(header, row))


# --- parsing --------------------------------------------------------------------

def test_empty_file_needs_scenario(tmp_path):
    with pytest.raises(ConfigError, match="missing scenario"):
        parse_config(_write(tmp_path, ""))


def test_defaults_fill_absent_keys():
    cfg = parse_config_text("[run]\nscenario = simulate\n")
    assert cfg["grid.n_cells"] == 128 and cfg["grid.n_steps"] == 256
    assert cfg["weights.lambda"] == 0.2 and cfg["large_time.threshold"] == 1e-3


def test_rejects_too_few_cells():
    with pytest.raises(ConfigError, match=r"n_cells.*>= 4"):
        parse_config_text("[run]\nscenario = simulate\n[grid]\nn_cells = 2\n")


def test_tau_star_echoed():
    cfg = parse_config_text("[run]\nscenario = simulate\n[weights]\ntau1 = 3\ntau2 = 3\n")
    assert cfg.echo()["weights.tau_star"] == 18


@pytest.mark.parametrize("text, pattern", [
    ("[run]\nscenario = simulate\nbogus = 1\n", r"line 3: run\.bogus: unknown key"),
    ("[run]\nscenario = simulate\n[nope]\n", r"line 3: unknown section"),
    ("scenario = simulate\n", r"line 1"),
    ("[run]\nscenario = simulate\n[grid]\nn_cells = many\n", r"line 4.*integer"),
    ("[run]\nscenario = fly\n", r"admissible: one of"),
    ("[run]\nscenario = simulate\n[problem]\nT = nan\n", r"finite"),
    ("[run]\nscenario = simulate\n[weights]\ntau1 = 3\ntau2 = 5\n", r"tau"),
    ("[run]\nscenario = simulate\n[problem]\nx_lo = 2\n", r"x_hi"),
    ("[run]\nscenario = simulate\n[problem]\nkappa_amp = 3\n", r"kappa"),
    ("[run]\nscenario = simulate\n[run]\nseed = 1\n", r"line 3"),
])
def test_parse_errors_locate_problem(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config_text(text)


# --- scenarios --------------------------------------------------------------------

def test_simulate_zero_data_writes_zeros(tmp_path):
    cfg = parse_config_text("[run]\nscenario = simulate\n[problem]\nscale = 0\nzstar = zero\n"
                            + SMALL_GRID)
    report = run_scenario(cfg, tmp_path)
    assert report.exit_code == EXIT_OK
    rows = _read(tmp_path / "trajectory.csv")
    assert rows[0] == ["t [time]", "x [length]", "y [temperature]", "p [potential]"]
    body = np.array(rows[1:], dtype=float)
    assert body.shape == (33 * 15, 4) and not body[:, 2:].any()


def test_stability_reports_positive_rate(tmp_path):
    cfg = parse_config_text("[run]\nscenario = stability\n[grid]\nn_cells = 32\nn_steps = 64\n")
    report = run_scenario(cfg, tmp_path)
    assert report.exit_code == EXIT_OK
    assert float(_report(tmp_path)["rho_hat [1/time]"]) > 0
    header = _read(tmp_path / "energy.csv")[0]
    assert any(col.startswith("S ") for col in header)


def test_linear_control_outputs(tmp_path):
    cfg = parse_config_text("[run]\nscenario = linear-control\n" + SMALL_GRID)
    report = run_scenario(cfg, tmp_path)
    assert report.exit_code == EXIT_OK
    for name in ("control.csv", "control_summary.csv", "trajectory.csv", "weights.csv"):
        assert (tmp_path / name).exists()
    assert float(_report(tmp_path)["terminal_relative [-]"]) < 1e-3


def test_observability_uses_seed(tmp_path):
    text = "[run]\nscenario = observability\n[solver]\nn_random_terminals = 20\n" + SMALL_GRID
    cfg = parse_config_text(text)
    a, b = tmp_path / "a", tmp_path / "b"
    run_scenario(cfg, a, seed=1)
    run_scenario(cfg, b, seed=2)
    assert (a / "observability.csv").read_bytes() != (b / "observability.csv").read_bytes()
    assert len(_read(a / "observability.csv")) == 21


def test_nonlinear_large_data_exits_outside_basin(tmp_path):
    cfg = parse_config_text("[run]\nscenario = nonlinear-control\n[problem]\nscale = 10\n"
                            "[grid]\nn_cells = 32\nn_steps = 64\n")
    report = run_scenario(cfg, tmp_path)
    assert report.exit_code == EXIT_BASIN
    history = _read(tmp_path / "residual_history.csv")
    assert len(history) > 2
    rep = _report(tmp_path)
    assert rep["status [-]"] == "failed" and rep["exit_code [-]"] == "4"
    assert not any(k.startswith("terminal") for k in rep)


def test_outputs_are_deterministic(tmp_path):
    text = "[run]\nscenario = linear-control\n" + SMALL_GRID
    a, b = tmp_path / "a", tmp_path / "b"
    run_scenario(parse_config_text(text), a)
    run_scenario(parse_config_text(text), b)
    for path in sorted(a.iterdir()):
        assert path.read_bytes() == (b / path.name).read_bytes(), path.name


def test_numbers_keep_seventeen_digits(tmp_path):
    cfg = parse_config_text("[run]\nscenario = simulate\n" + SMALL_GRID)
    run_scenario(cfg, tmp_path)
    rows = _read(tmp_path / "trajectory.csv")
    for row in (tmp_path / "report.csv", tmp_path / "trajectory.csv"):
        header = _read(row)[0]
        assert all("[" in col and col.endswith("]") for col in header)
    values = [float(v) for v in rows[1:][40]]
    assert all(float(s) == v for s, v in zip(rows[1:][40], values))
    y = rows[1:][40][2]
    assert len(y.replace("-", "").replace(".", "").split("e")[0].lstrip("0")) >= 16


# --- entry point ---------------------------------------------------------------------

def test_main_run_and_exit_code(tmp_path, capsys):
    path = _write(tmp_path, "[run]\nscenario = simulate\n" + SMALL_GRID)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert "simulate: ok" in capsys.readouterr().out


def test_main_validate_reports_hypotheses(tmp_path, capsys):
    good = _write(tmp_path, "[run]\nscenario = simulate\n[problem]\nzstar = zero\n", "good.ini")
    assert main(["validate", "--config", str(good)]) == EXIT_INVALID   # no boundary gradient
    default = _write(tmp_path, "[run]\nscenario = simulate\n", "default.ini")
    assert main(["validate", "--config", str(default)]) == EXIT_INVALID
    assert "H10" in capsys.readouterr().out


def test_main_invalid_config(tmp_path):
    path = _write(tmp_path, "[run]\nscenario = simulate\n[grid]\nn_cells = 2\n")
    assert main(["validate", "--config", str(path)]) == EXIT_INVALID


def test_main_missing_config_is_io_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.ini")]) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = _write(tmp_path, "[run]\nscenario = simulate\n" + SMALL_GRID)
    assert main(["run", "--config", str(path), "--out", str(blocker / "sub")]) == EXIT_IO


def test_main_rejects_bad_seed(tmp_path):
    path = _write(tmp_path, "[run]\nscenario = simulate\n" + SMALL_GRID)
    assert main(["run", "--config", str(path), "--seed", "-1"]) == EXIT_INVALID
