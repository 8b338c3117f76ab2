import csv
import json
import subprocess
import sys

import pytest

from lcskit import cli
from lcskit.config import Tolerances
from lcskit.runner import run
from lcskit.scenario import ScenarioError, bundled_names, load_scenario, parse_scenario, scaled

MINIMAL = """
name = "mini"
pipeline = "check-lcs"
dimension = 2

[forms.omega]
degree = 2
"1,2" = "{coeff}"

[forms.theta]
degree = 1

[sampling]
seeds = 8
"""


def write(tmp_path, text, name="mini.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def main_json(capsys, argv):
    code = cli.main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out), out


def test_bundled_scenario_loads():
    sc = load_scenario("darboux-point-2d")
    assert sc.dimension == 2 and sc.pipeline == "darboux"
    assert "darboux-point-2d" in bundled_names()


def test_out_of_range_variable_names_field():
    with pytest.raises(ScenarioError) as info:
        parse_scenario(MINIMAL.format(coeff="x3"))
    assert info.value.field == "forms.omega.1,2"
    assert "x3" in str(info.value)


def test_bad_toml_reports_position():
    with pytest.raises(ScenarioError, match="line"):
        parse_scenario('name = "x"\npipeline = = 3\n')


def test_default_tolerances_echoed():
    sc = parse_scenario(MINIMAL.format(coeff="1"))
    assert sc.tolerances == Tolerances()
    echoed = run(sc).to_dict()["config"]["tolerances"]
    assert echoed == Tolerances().as_dict()


def test_partial_tolerances_override():
    sc = parse_scenario(MINIMAL.format(coeff="1") + "\n[tolerances]\nlcs = 1e-6\n")
    assert sc.tolerances.lcs == 1e-6 and sc.tolerances.ad == Tolerances().ad
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL.format(coeff="1") + "\n[tolerances]\nbogus = 1.0\n")
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL.format(coeff="1") + "\n[tolerances]\nlcs = -1.0\n")


def test_exit_codes(tmp_path, capsys):
    good = write(tmp_path, MINIMAL.format(coeff="1 + x1^2"))
    code, rep, _ = main_json(capsys, ["check-lcs", str(good)])
    assert code == 0 and rep["pass"] is True
    degenerate = write(tmp_path, MINIMAL.format(coeff="x1 - x1"), "zero.toml")
    code, rep, _ = main_json(capsys, ["check-lcs", str(degenerate)])
    assert code == 1 and rep["failed_checks"] == ["nondegenerate"]
    bad = write(tmp_path, MINIMAL.format(coeff="x3"), "bad.toml")
    code, rep, _ = main_json(capsys, ["check-lcs", str(bad)])
    assert code == 2 and rep["error"]["stage"] == "config"
    code, rep, _ = main_json(capsys, ["check-lcs", str(tmp_path / "missing.toml")])
    assert code == 2


def test_pipeline_mismatch_is_config_error(capsys):
    code, rep, _ = main_json(capsys, ["cotangent", "darboux-point-2d"])
    assert code == 2 and "pipeline" in rep["error"]["message"]


def test_flag_validation(capsys):
    code, _, _ = main_json(capsys, ["run", "hr-check-4d", "--tolerance-scale", "0"])
    assert code == 2
    code, _, _ = main_json(capsys, ["run", "darboux-point-2d", "--steps", "12"])
    assert code == 2  # convergence check needs a multiple of 8
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "hr-check-4d", "--steps", "many"])
    assert info.value.code == 2
    capsys.readouterr()


def test_tolerance_scale_applies():
    sc = scaled(load_scenario("hr-check-4d"), tolerance_scale=10.0)
    assert sc.tolerances.lcs == pytest.approx(10 * load_scenario("hr-check-4d").tolerances.lcs)
    assert sc.tolerances.convergence_ratio == Tolerances().convergence_ratio


@pytest.mark.parametrize("argv", [
    ["run", "cotangent-exact-lee"],
    ["darboux", "darboux-point-2d", "--steps", "8"],
])
def test_reports_are_byte_identical(capsys, argv):
    _, _, first = main_json(capsys, argv)
    _, _, second = main_json(capsys, argv)
    assert first == second
    assert "timing" not in json.loads(first)


def test_timing_is_opt_in(capsys):
    _, rep, _ = main_json(capsys, ["run", "hr-check-4d", "--timing"])
    assert rep["timing"]["seconds"] >= 0


def test_emit_data_writes_csv_and_records(tmp_path, capsys):
    code, rep, _ = main_json(capsys, ["moser-flow", "darboux-point-2d", "--steps", "8", "--emit-data", str(tmp_path)])
    assert code == 0 and rep["pass"]
    with (tmp_path / "darboux-point-2d.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2", "residual_max", "conformal_factor"]
    assert len(rows) == 1 + rep["diagnostics"]["tube_samples"]
    lines = (tmp_path / "darboux-point-2d.flow.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert {"seed", "image", "jacobian", "factor", "invariance", "patch"} <= set(first)


def test_list_scenarios(capsys):
    code, rep, _ = main_json(capsys, ["list-scenarios"])
    names = [r["name"] for r in rep["scenarios"]]
    assert code == 0 and names == sorted(names) and "annulus-gluing" in names


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "lcskit.cli", "check-lcs", "broken-lee-form"],
                         capture_output=True, text=True, check=False)
    assert out.returncode == 1
    assert json.loads(out.stdout)["failed_checks"] == ["lee-form-closed"]
