import csv
import json
import math
import os
import subprocess
import sys

import pytest

from pacrit.cli import (
    ConfigError,
    apply_overrides,
    emit_report,
    main,
    parse_scenario,
    report_json,
    run_scenario,
)

EIGEN = {"name": "unit interval", "problem": {"p": 2, "domain": {"lower": [0], "upper": [1]}, "grid": {"nodes": [512]}}}
PLANE = {"problem": {"p": 2, "domain": {"lower": [-6, -6], "upper": [6, 6]}, "grid": {"spacing": 0.25}},
         "exhaustion": {"scheme": "extents", "half_widths": [1.5, 3, 6]}}
GREEN = {"problem": {"p": 1.5, "domain": {"lower": [-2, -2], "upper": [2, 2]}, "grid": {"spacing": 0.0625}},
         "exhaustion": {"scheme": "margin", "count": 4}, "params": {"x0": [0, 0], "x1": [0.75, 0]}}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


# ---------------------------------------------------------------- scenarios


def test_eigen_report_schema_and_value(tmp_path, capsys):
    assert main(["eigen", "--config", _write(tmp_path, EIGEN)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert {"lambda1", "normalization", "iterations", "converged", "tolerance"} <= set(out)
    assert out["lambda1"] == pytest.approx(math.pi**2, rel=5e-3)
    assert out["provenance"]["seed"] == 0 and len(out["provenance"]["config_hash"]) == 64
    assert out["scenario"]["analysis"] == "eigen"


def test_malformed_expression_names_the_field(tmp_path, capsys):
    bad = json.loads(json.dumps(EIGEN))
    bad["problem"]["V"] = "1 + * x"
    assert main(["eigen", "--config", _write(tmp_path, bad)]) == 1
    assert "problem.V" in capsys.readouterr().err
    bad = {"problem": {"p": 2, "domain": {"lower": [0, 0], "upper": [1, 1]}, "grid": {"nodes": [5, 5]},
                       "A": "[[1, 0], [0, -1]]"}}
    assert main(["eigen", "--config", _write(tmp_path, bad)]) == 1
    assert "problem.A" in capsys.readouterr().err


@pytest.mark.parametrize("patch, field", [
    ({"p": 1}, "problem.p"),
    ({"grid": {}}, "problem.grid"),
    ({"domain": {"lower": [0], "upper": [0]}}, "problem.domain"),
])
def test_validation_errors_carry_paths(patch, field):
    data = json.loads(json.dumps(EIGEN))
    data["problem"].update(patch)
    with pytest.raises(ConfigError) as err:
        parse_scenario(data, "eigen")
    assert field in str(err.value)


def test_missing_required_parameter():
    data = json.loads(json.dumps(EIGEN))
    with pytest.raises(ConfigError) as err:
        parse_scenario(data, "capacity")
    assert "params.radius" in str(err.value)
    with pytest.raises(ConfigError):
        parse_scenario(data, "classify")  # needs an exhaustion


def test_unknown_analysis_and_bad_json(tmp_path, capsys):
    with pytest.raises(SystemExit) as ex:
        main(["spectrum", "--config", "x"])
    assert ex.value.code == 1
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["eigen", "--config", str(path)]) == 1
    assert main(["eigen", "--config", str(tmp_path / "absent.json")]) == 1


def test_round_trip():
    s = parse_scenario(GREEN, "green", seed=7)
    again = parse_scenario(json.loads(s.to_json()))
    assert again == s and again.digest == s.digest


def test_same_config_and_seed_give_identical_bytes(tmp_path):
    cfg = _write(tmp_path, {"problem": {"p": 2, "domain": {"lower": [-1, -1], "upper": [1, 1]},
                                        "grid": {"spacing": 0.25}}, "params": {"count": 20}})
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["verify-identities", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["passed"] is True


def test_overrides():
    data = apply_overrides(EIGEN, ["problem.p=3", "problem.V=2", 'problem.domain.upper=[2]'])
    assert data["problem"]["p"] == 3 and data["problem"]["domain"]["upper"] == [2]
    assert EIGEN["problem"]["p"] == 2
    s = parse_scenario(data, "eigen")
    assert s.problem["V"] == "2"
    with pytest.raises(ConfigError):
        apply_overrides(EIGEN, ["problem.p"])


def test_override_flag_changes_result(tmp_path, capsys):
    cfg = _write(tmp_path, EIGEN)
    assert main(["eigen", "--config", cfg, "--set", "problem.V=4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["lambda1"] == pytest.approx(math.pi**2 + 4, rel=5e-3)


# ---------------------------------------------------------------- analyses and emission


def test_classify_csv_schema(tmp_path):
    out = tmp_path / "seq.csv"
    code = main(["classify", "--config", _write(tmp_path, PLANE), "--format", "csv", "--out", str(out)])
    assert code in (0, 3)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["member-index", "lambda1", "capacity", "tN"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]


def test_green_writes_profile_and_summary(tmp_path):
    out = tmp_path / "green.csv"
    main(["green", "--config", _write(tmp_path, GREEN), "--format", "csv", "--out", str(out)])
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["radius", "value"] and len(rows) > 5
    summary = json.loads((tmp_path / "green.json").read_text())
    assert {"exponent", "classification", "r2", "tolerance"} <= set(summary)


def test_inconclusive_exit_code(tmp_path):
    data = json.loads(json.dumps(GREEN))
    data["params"]["tol"] = 1e-12
    out = tmp_path / "g.json"
    assert main(["green", "--config", _write(tmp_path, data), "--out", str(out)]) == 3
    assert json.loads(out.read_text())["converged"] is False


def test_analysis_error_exit_code(tmp_path, capsys):
    data = {"problem": {"p": 2, "domain": {"lower": [-4, -4], "upper": [4, 4]}, "grid": {"spacing": 0.5},
                        "V": "-10"}, "params": {"V0": "-1"}}
    assert main(["tau-scan", "--config", _write(tmp_path, data)]) == 2
    assert "tau-scan failed" in capsys.readouterr().err


def test_tau_scan_infinite_marker(tmp_path):
    data = {"problem": {"p": 2, "domain": {"lower": [-2, -2], "upper": [2, 2]}, "grid": {"spacing": 0.5}},
            "params": {"V0": "max(0, 1 - r^2)"}}
    report = run_scenario(json.dumps(data), "tau-scan")
    assert json.loads(report_json(report))["tau_plus"] == "+inf"


def test_liouville_scenario(tmp_path, capsys):
    data = {"problem": {"p": 3, "domain": {"lower": [-1, -1], "upper": [1, 1]}, "grid": {"spacing": 0.125},
                        "A": "[[2 + x^2, 0.5], [0.5, 1]]"},
            "params": {"psi": "1", "phi": "1", "M": 2.0, "N": 1.0}}
    assert main(["liouville", "--config", _write(tmp_path, data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert all(c["passed"] for c in out["conditions"].values())
    data["params"]["M"] = 0.5
    assert main(["liouville", "--config", _write(tmp_path, data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["conclusion"] == "not certified" and out["conditions"]["iii"]["witness"]


@pytest.mark.parametrize("analysis, params", [
    ("dirichlet", {"f": "1"}),
    ("capacity", {"radius": 0.5}),
])
def test_single_problem_analyses(tmp_path, capsys, analysis, params):
    data = {"problem": {"p": 3, "domain": {"lower": [-1, -1], "upper": [1, 1]}, "grid": {"spacing": 0.125}},
            "params": params}
    assert main([analysis, "--config", _write(tmp_path, data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "tolerance" in out


def test_emit_leaves_no_temporary_files(tmp_path):
    report = run_scenario(json.dumps(EIGEN), "eigen")
    paths = emit_report(report, "csv", str(tmp_path / "e.csv"))
    assert paths == [str(tmp_path / "e.csv")]
    assert sorted(os.listdir(tmp_path)) == ["e.csv"]
    assert (tmp_path / "e.csv").read_text().startswith("x,phi\n")


def test_stdin_config_and_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pacrit", "eigen", "--config", "-"],
                          input=json.dumps(EIGEN), capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["converged"] is True
