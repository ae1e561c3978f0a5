import csv
import json

import pytest

from goaliga.cli import ConfigError, main, parse_goal, read_config

STATIC = """\
[problem]
geometry = rectangle
degree = 2
level = 2
thickness = 0.01
E = 1e6
nu = 0.3
constraints = u0:clamp; u1:clamp; v0:clamp; v1:clamp
surface_load = 0, 0, 1
linear = true

[analysis]
type = static

[goal]
spec = displacement:component:2

[adapt]
enabled = true
rho_r = 0.5
tol_r = 0
tol_c = 0
imax = 2
max_level = 4

[output]
seed = 1
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.cfg")]) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["bench"], ["bench", "cantilever"], ["bench", "roof", "--degree", "x"], ["frobnicate"]])
def test_bad_command_lines(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    p = write(tmp_path, STATIC.replace("thickness", "thicknes"))
    with pytest.raises(ConfigError, match="unknown key"):
        read_config(p)
    assert main(["run", str(p)]) == 2


def test_unknown_section_and_enum(tmp_path):
    with pytest.raises(ConfigError):
        read_config(write(tmp_path, STATIC + "\n[solver]\nx = 1\n"))
    with pytest.raises(ConfigError):
        read_config(write(tmp_path, STATIC.replace("type = static", "type = dynamic")))


def test_bad_band_is_usage_error(tmp_path):
    p = write(tmp_path, STATIC.replace("tol_r = 0", "tol_r = 1"))
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2


def test_goal_specs():
    g = parse_goal("stretch:component:0")
    assert (g.quantity, g.form, g.component) == ("stretch", "component", 0)
    g = parse_goal("displacement@points=1,1;0.5,0.5")
    assert g.region == "points" and g.points == ((1.0, 1.0), (0.5, 0.5))
    assert parse_goal("strain@boundary=u1").side == "u1"
    with pytest.raises(ConfigError):
        parse_goal("pressure")
    with pytest.raises(ConfigError):
        parse_goal("strain:component:0:1")


def test_run_static_adaptive(tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(write(tmp_path, STATIC)), "--out", str(out)]) == 0
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert int(rows[1]["dofs"]) > int(rows[0]["dofs"])
    assert (out / "mesh.csv").is_file()
    # identical inputs give identical bytes
    again = tmp_path / "o2"
    assert main(["run", str(write(tmp_path, STATIC)), "--out", str(again)]) == 0
    assert (out / "history.csv").read_bytes() == (again / "history.csv").read_bytes()


def test_run_modal(tmp_path):
    text = STATIC.replace("type = static", "type = modal\nnev = 3").replace("nu = 0.3", "nu = 0.3\nrho = 1")
    out = tmp_path / "o"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == 0
    with open(out / "eigen.csv") as fh:
        mu = [float(r["mu"]) for r in csv.DictReader(fh)]
    assert len(mu) == 3 and mu == sorted(mu) and mu[0] > 0


def test_numerical_failure_writes_stub(tmp_path):
    # no constraints: the stiffness is singular
    text = STATIC.replace("constraints = u0:clamp; u1:clamp; v0:clamp; v1:clamp\n", "")
    out = tmp_path / "o"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == 3
    stub = json.loads((out / "failure.json").read_text())
    assert stub["error"] and stub["message"]


def test_bench_plate_buckling(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["bench", "plate-buckling", "--degree", "3", "--levels", "2", "--out", str(out)]) == 0
    with open(out / "plate-buckling.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [round(float(r["load_an"]), 3) for r in rows] == [1.808, 4.519, 7.230, 9.038]
    assert "plate-buckling" in capsys.readouterr().out


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8 and all(line.startswith("[PASS]") for line in lines)
