import csv
import hashlib
import json

import numpy as np
import pytest
import yaml

from blochtorrey.cli import _Loader, load_spec, log_slope, main, resolve_spec_path, set_path
from blochtorrey.core import ConfigError

SMALL = """\
kind: forward
seed: 1
grid:
  shape: [16]
  extent: [0.1]
sequence:
  tau_p: 1.0e-6
  tau1: 0.3
  tau2: 0.7
readout:
  t_start: 0.71
  prephase: 0.01
  duration: 0.1
"""


def _write(tmp_path, text, name="s.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_loader_reads_exponent_floats():
    assert yaml.load("a: 2.6752218744e8\nb: 1e-3\nc: 5", Loader=_Loader) == {"a": 2.6752218744e8, "b": 1e-3, "c": 5}


def test_missing_field_exits_2(tmp_path, capsys):
    spec = _write(tmp_path, SMALL.replace("grid:\n  shape: [16]\n  extent: [0.1]\n", ""))
    assert main(["run", spec, "--out", str(tmp_path / "o")]) == 2
    assert "grid: missing field" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="readout.duration: missing field"):
        load_spec(_write(tmp_path, SMALL.replace("  duration: 0.1\n", ""), "b.yaml"))


def test_bad_yaml_reports_line(tmp_path, capsys):
    spec = _write(tmp_path, SMALL + "noise: [1, 2\n")
    assert main(["run", spec]) == 2
    assert "line" in capsys.readouterr().err


def test_unknown_kind_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="kind"):
        load_spec(_write(tmp_path, SMALL.replace("kind: forward", "kind: nope")))
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2


def test_runtime_error_exits_3_with_error_json(tmp_path):
    # readout starts before the last pulse of the second inversion sequence
    spec = _write(tmp_path, SMALL.replace("t_start: 0.71", "t_start: 0.5"))
    out = tmp_path / "o"
    assert main(["run", spec, "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "PreconditionError" and "last pulse" in err["message"]


def test_run_writes_manifest_with_hashes(tmp_path):
    out = tmp_path / "o"
    assert main(["run", _write(tmp_path, SMALL), "--out", str(out), "--seed", "7"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 7
    meas = {f"measurement_{n}.csv{ext}" for n in ("ninety", "ir_tau1", "ir_tau2") for ext in ("", ".json")}
    assert set(man["outputs"]) == meas | {"report.json"}
    for name, h in man["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == h
    assert json.loads((out / "report.json").read_text())["metric"] == "data_norm"


def test_sweep_csv_and_slope(tmp_path):
    spec = _write(tmp_path, SMALL + "noise:\n  sigma: 0.0\n")
    out = tmp_path / "sw"
    assert main(["sweep", spec, "--out", str(out), "--param", "grid.extent.0", "--values", "0.1,0.2,0.4"]) == 0
    rows = list(csv.reader((out / "sweep.csv").open()))
    assert rows[0] == ["grid.extent.0", "metric", "slope"]
    assert len(rows) == 4 and len({r[2] for r in rows[1:]}) == 1
    summary = json.loads((out / "sweep.json").read_text())
    v, m = np.log(summary["values"]), np.log(summary["metrics"])
    assert np.isclose(summary["slope"], np.polyfit(v, m, 1)[0])
    assert (out / "point_002" / "report.json").is_file()

    one = tmp_path / "one"
    assert main(["sweep", spec, "--out", str(one), "--param", "grid.extent.0", "--values", "0.1"]) == 0
    rows = list(csv.reader((one / "sweep.csv").open()))
    assert rows[1][2] == ""


def test_sweep_requires_param(tmp_path):
    assert main(["sweep", _write(tmp_path, SMALL), "--out", str(tmp_path / "o")]) == 2


def test_log_slope_and_set_path():
    assert np.isclose(log_slope([1, 2, 4], [3, 12, 48]), 2.0)
    assert log_slope([1], [2]) is None
    s = {"grid": {"shape": [16]}}
    set_path(s, "N", 32)
    set_path(s, "noise.sigma", 0.1)
    assert s == {"grid": {"shape": [32]}, "noise": {"sigma": 0.1}}


def test_spectral_certificate(tmp_path):
    spec = _write(tmp_path, "kind: spectral\nspectral:\n  N: 24\n  L: 1.0\n  D0: 0.01\n  R10: 1.0\n"
                            "  R2: [3.0, 0.0]\n  tau1: 0.3\n  tau2: 0.7\n  nt: 60\n")
    out = tmp_path / "sp"
    assert main(["run", spec, "--out", str(out)]) == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["conditions"]["injective"] is True
    assert json.loads((out / "report.json").read_text())["sigma_min"] > 1e-8


def test_bundled_example_resolves():
    spec = load_spec(resolve_spec_path("examples/phantom1d_recon.yaml"))
    assert spec["kind"] == "recon" and spec["gamma"] == 2.6752218744e8
