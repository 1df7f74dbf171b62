import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blowup_lab import cli, dynamics


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(cli.fmt(x)) == x


def test_fmt_integers_and_flags():
    assert cli.fmt(True) == "1" and cli.fmt(False) == "0"
    assert cli.fmt(np.int64(7)) == "7"


def test_parse_config_sections_and_overrides():
    text = """frame = box3d_selfsim
seed = 3
[grid]
n = 32
box = 12.5
[model]
k = 3
mu0 = 1e-3
[delta]
d1 = 0.02
g = measured
"""
    cfg = cli.parse_config(text, ["sim.dt=0.02", "shoot.enabled = yes"])
    assert (cfg.frame, cfg.seed, cfg.n, cfg.box, cfg.k, cfg.mu0) == ("box3d_selfsim", 3, 32, 12.5, 3, 1e-3)
    assert cfg.dt == 0.02 and cfg.shoot_enabled is True
    assert cfg.deltas.d1 == 0.02 and cfg.delta_g is None


@pytest.mark.parametrize(
    "text, extra",
    [("grid.n = 32\nbogus = 1\n", []), ("[grid]\nn = many\n", []), ("frame = cube\n", []), ("", ["no-equals"]), ("[shoot]\nenabled = maybe\n", [])],
)
def test_parse_config_errors(text, extra):
    with pytest.raises(cli.UsageError):
        cli.parse_config(text, extra)


def test_config_hash_is_deterministic():
    assert cli.config_hash("a = 1\n") == cli.config_hash("a = 1\n")
    assert cli.config_hash("a = 1\n") != cli.config_hash("a = 2\n")


def test_usage_errors_exit_2(capsys):
    assert cli.dispatch([]) == 2
    assert cli.dispatch(["frobnicate"]) == 2
    assert cli.dispatch(["profile", "check", "--n", "4"]) == 2
    assert cli.dispatch(["simulate", "--config", "/nonexistent/file.ini"]) == 2
    assert cli.dispatch(["reproduce", "profile", "--set", "grid.n=abc"]) == 2
    assert cli.dispatch(["--help"]) == 0


def test_profile_check_exit_0(capsys):
    assert cli.dispatch(["profile", "check"]) == 0
    out = capsys.readouterr().out
    assert "stationarity residual" in out and "FAIL" not in out


def test_linop_check_exit_0(capsys):
    assert cli.dispatch(["linop", "check", "--ell", "1", "--n", "64", "--k", "2"]) == 0


def test_tolerance_failure_exit_1(capsys):
    # ten nodes cannot resolve the profile to 1e-8
    assert cli.dispatch(["profile", "check", "--n", "10"]) == 1


def test_spectrum_csv_header(tmp_path, capsys):
    out = tmp_path / "spectrum.csv"
    assert cli.dispatch(["spectrum", "--ell-max", "2", "--n", "96", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "ell,re_lambda,im_lambda,refinement_stable,unstable"
    rows = list(csv.DictReader(lines))
    unstable = [(int(r["ell"]), float(r["re_lambda"])) for r in rows if r["unstable"] == "1"]
    assert len(unstable) == 2
    assert {e for e, _ in unstable} == {0, 1}


def test_spectrum_modified(capsys):
    assert cli.dispatch(["spectrum", "modified", "--n", "96", "--R", "5", "--R", "10"]) == 0
    assert "cond(M_R)" in capsys.readouterr().out


def test_simulate_radial_writes_outputs(tmp_path, capsys):
    conf = tmp_path / "run.ini"
    conf.write_text("frame = radial_selfsim\n[grid]\nn = 64\n[model]\nmu0 = 0.01\n[sim]\ndt = 0.1\ntau_end = 0.5\nsnapshot_every = 5\n[init]\nstable_amp = 1e-4\n")
    out = tmp_path / "out"
    assert cli.dispatch(["simulate", "--config", str(conf), "--out-dir", str(out)]) == 0
    lines = (out / "diagnostics.csv").read_text().splitlines()
    assert lines[0] == ",".join(dynamics.DIAGNOSTIC_COLUMNS)
    assert len(lines) == 1 + 6
    manifest = (out / "manifest").read_text()
    assert f"config_sha256 = {cli.config_hash(conf.read_text())}" in manifest
    assert (out / "snapshot_000005.bin").exists()


def test_shoot_subcommand_appends_report(tmp_path, capsys):
    conf = tmp_path / "run.ini"
    conf.write_text("frame = radial_selfsim\n[grid]\nn = 64\n[model]\nmu0 = 0.01\n[sim]\ndt = 0.1\ntau_end = 2\n[init]\nstable_amp = 1e-4\n[shoot]\ntol = 1e-8\n")
    out = tmp_path / "o"
    assert cli.dispatch(["shoot", "--config", str(conf), "--out-dir", str(out)]) == 0
    first = (out / "shoot_report.csv").read_text().splitlines()
    assert first[0] == "iteration,bracket_lo,bracket_hi,exit_side"
    assert cli.dispatch(["shoot", "--config", str(conf), "--out-dir", str(out)]) == 0
    second = (out / "shoot_report.csv").read_text().splitlines()
    assert len(second) == 2 * len(first) - 1


def test_shoot_physical_frame_is_usage_error(tmp_path, capsys):
    conf = tmp_path / "run.ini"
    conf.write_text("frame = box3d_physical\n[grid]\nn = 16\nbox = 10\n")
    assert cli.dispatch(["shoot", "--config", str(conf), "--out-dir", str(tmp_path)]) == 2


def test_reproduce_profile_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.dispatch(["reproduce", "profile", "--out-dir", str(a)]) == 0
    assert cli.dispatch(["reproduce", "profile", "--out-dir", str(b)]) == 0
    assert (a / "diagnostics.csv").read_bytes() == (b / "diagnostics.csv").read_bytes()
    assert "check.stationarity residual = pass" in (a / "manifest").read_text()


def test_leray_origin_value_close_to_closed_form():
    assert cli.leray_origin_value(64, 16.0) == pytest.approx(4.0, rel=0.02)
    assert math.isfinite(cli.leray_origin_value(32, 40.0))
