"""Config parsing, CSV/summary output, and CLI subcommands."""

import csv
import math

import numpy as np
import pytest

from pcbf.cli import (
    main,
    parse_config,
    serialize_config,
    summarize,
    write_csv,
)
from pcbf.core import ConfigurationError
from pcbf.scenarios import default_config
from pcbf.simulate import run_closed_loop


class TestParseConfig:
    def test_minimal(self):
        cfg = parse_config("scenario = intersection_cross\n")
        assert cfg == default_config("intersection_cross")

    def test_overrides_and_comments(self):
        cfg = parse_config(
            "# a comment\n"
            "scenario = satellite\n"
            "controller = ecbf\n"
            "T = 100  # inline comment\n"
            "N = 300\n"
            "two_level = false\n"
            "params.rho = 2.5\n")
        assert cfg.scenario == "satellite"
        assert cfg.controller == "ecbf"
        assert cfg.T == 100.0
        assert cfg.N == 300
        assert cfg.two_level is False
        assert cfg.params["rho"] == 2.5

    def test_missing_scenario(self):
        with pytest.raises(ConfigurationError, match="scenario"):
            parse_config("T = 10\n")

    def test_unknown_scenario_lists_choices(self):
        with pytest.raises(ConfigurationError, match="intersection_cross"):
            parse_config("scenario = bogus\n")

    def test_unknown_controller_lists_choices(self):
        with pytest.raises(ConfigurationError, match="pcbf"):
            parse_config("scenario = satellite\ncontroller = bogus\n")

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigurationError, match="line 2.*'horizon'"):
            parse_config("scenario = satellite\nhorizon = 10\n")

    def test_unknown_param_names_line_and_choices(self):
        with pytest.raises(ConfigurationError, match="line 2.*'params.k'.*rho"):
            parse_config("scenario = satellite\nparams.k = 1\n")

    def test_bad_value_names_key_and_line(self):
        with pytest.raises(ConfigurationError, match="line 2.*'T'.*'fast'"):
            parse_config("scenario = satellite\nT = fast\n")
        with pytest.raises(ConfigurationError, match="line 2.*'N'"):
            parse_config("scenario = satellite\nN = 3.7\n")
        with pytest.raises(ConfigurationError, match="line 2.*'two_level'"):
            parse_config("scenario = satellite\ntwo_level = maybe\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigurationError, match="line 3.*duplicate"):
            parse_config("scenario = satellite\nT = 10\nT = 20\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigurationError, match="line 2"):
            parse_config("scenario = satellite\nnot a key value pair\n")

    @pytest.mark.parametrize("scenario", ["intersection_cross",
                                          "intersection_left_turn", "satellite"])
    @pytest.mark.parametrize("controller", ["pcbf", "ecbf", "none", "nominal"])
    def test_round_trip(self, scenario, controller):
        cfg = default_config(scenario, controller)
        cfg.gamma = 1.0 / 3.0  # exercise full-precision float round-trip
        assert parse_config(serialize_config(cfg)) == cfg


@pytest.fixture(scope="module")
def short_log():
    cfg = default_config("intersection_cross", "pcbf")
    cfg.duration = 2.0
    return run_closed_loop(cfg)


def test_write_csv_round_trips_values(tmp_path, short_log):
    path = tmp_path / "run.csv"
    write_csv(short_log, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(short_log.t)
    head = rows[0]
    for col in ("t", "x0", "x3", "u0", "u1", "mu0", "h", "Hstar", "case",
                "feasible", "slack0", "step_ms"):
        assert col in head
    k = len(rows) // 2
    assert float(rows[k]["t"]) == short_log.t[k]
    for i in range(4):
        assert float(rows[k][f"x{i}"]) == short_log.x[k, i]
    for i in range(2):
        assert float(rows[k][f"u{i}"]) == short_log.u[k, i]
    assert float(rows[k]["h"]) == short_log.h[k]
    assert float(rows[k]["Hstar"]) == short_log.h_star[k]
    assert rows[k]["case"] == short_log.case[k]


def test_summarize_fields(short_log):
    s = summarize(short_log)
    assert s["steps"] == len(short_log.t)
    assert s["max_h"] == float(np.max(short_log.h))
    assert s["safe"] == (s["max_h"] <= 0.0)
    assert s["total_deviation"] >= 0.0
    assert "car1_crossed" in s and "car2_crossed" in s
    assert "max_Hstar" in s
    if math.isfinite(s["first_intervention_t"]):
        assert s["first_intervention_t"] >= 0.0


def _write_cfg(tmp_path, text):
    p = tmp_path / "cfg.txt"
    p.write_text(text)
    return str(p)


def test_main_run(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "scenario = intersection_cross\nduration = 2\n")
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "run.csv").exists()
    assert (out / "summary.txt").exists()
    assert (out / "config.txt").exists()
    # the archived config reproduces the run configuration exactly
    archived = parse_config((out / "config.txt").read_text())
    assert archived.duration == 2.0
    assert "max_h" in capsys.readouterr().out


def test_main_compare(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "scenario = intersection_cross\nduration = 2\n")
    out = tmp_path / "cmp"
    rc = main(["compare", "--config", cfg, "--out", str(out),
               "--controllers", "pcbf,none"])
    assert rc == 0
    assert (out / "pcbf" / "run.csv").exists()
    assert (out / "none" / "run.csv").exists()
    report = (out / "compare.txt").read_text()
    assert report.splitlines()[0].startswith("controller")
    assert "pcbf" in report and "none" in report


def test_main_compare_rejects_unknown_controller(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "scenario = intersection_cross\nduration = 2\n")
    rc = main(["compare", "--config", cfg, "--out", str(tmp_path / "x"),
               "--controllers", "pcbf,bogus"])
    assert rc == 2
    assert "bogus" in capsys.readouterr().err


def test_main_bad_config_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "T = 10\n")
    rc = main(["run", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "scenario" in capsys.readouterr().err


def test_verbose_env_var_reports_progress(tmp_path, capsys, monkeypatch):
    cfg = _write_cfg(tmp_path, "scenario = intersection_cross\nduration = 2\n")
    out = tmp_path / "out"
    monkeypatch.setenv("PCBF_VERBOSE", "1")
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    err = capsys.readouterr().err
    assert "run.csv" in err
    monkeypatch.setenv("PCBF_VERBOSE", "0")
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert capsys.readouterr().err == ""


def test_main_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "0 failure(s)" in out
    assert "FAIL" not in out
