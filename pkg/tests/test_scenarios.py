import csv
import json
from importlib import resources

import pytest

from profiledecomp.cli import OUT_DIR_ENV, main
from profiledecomp.report import TRACE_COLUMNS, emit_report, validate_report
from profiledecomp.scenarios import (
    ConfigError,
    build_scenario,
    config_hash,
    dump_scenario,
    load_scenario,
    parse_scenario,
    run_decomposition,
    scenario_schema,
)

from .conftest import SCENARIO_DIR
from .gluing_cases import lattice_gluing, perturbed_inverse
from .test_infinity import _flat

SHIPPED = sorted(SCENARIO_DIR.glob("*.json"))

MINIMAL = """{
  "name": "minimal",
  "manifold": {"kind": "euclidean"},
  "sequence": {"kind": "fixed", "bumps": [{"center": [0.0, 0.0], "radius": 1.0}]},
  "params": {
    "p": 3.0
  }
}
"""


@pytest.fixture(scope="module")
def fixed_run():
    return run_decomposition(load_scenario(SCENARIO_DIR / "fixed_euclidean.json"))


def test_minimal_config_defaults():
    cfg = parse_scenario(MINIMAL)
    assert (cfg.params.i_max, cfg.params.grid_res, cfg.params.k_max) == (12, 64, 48)
    assert (cfg.net.rho, cfg.net.rho_hat, cfg.net.policy) == (0.8, 0.72, "lattice")
    assert cfg.manifold.dimension == 2 and cfg.seed == 0


def test_p_at_endpoint_rejected_with_line():
    with pytest.raises(ConfigError, match=r"\(2, ∞\)") as info:
        parse_scenario(MINIMAL.replace('"p": 3.0', '"p": 2.0'))
    assert info.value.line == 6


def test_unknown_key_rejected():
    text = MINIMAL.replace('"name": "minimal",', '"name": "minimal",\n  "colour": "red",')
    with pytest.raises(ConfigError) as info:
        parse_scenario(text)
    assert info.value.line == 3


def test_invalid_json_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_scenario(MINIMAL.replace('"p": 3.0', '"p": 3.0,'))
    assert info.value.line is not None


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
def test_roundtrip_is_identical(path):
    cfg = load_scenario(path)
    text = dump_scenario(cfg)
    again = parse_scenario(text)
    assert again == cfg
    assert dump_scenario(again) == text
    assert config_hash(again) == config_hash(cfg)


def test_shipped_schema_matches_model():
    text = resources.files("profiledecomp").joinpath("schemas/scenario.schema.json").read_text()
    assert json.loads(text) == scenario_schema()


def test_hyperbolic_needs_fixed_sequence():
    doc = json.loads(MINIMAL)
    doc["manifold"]["kind"] = "hyperbolic"
    doc["sequence"] = {"kind": "runaway-bump", "bumps": [{"center": [0, 0], "radius": 1, "velocity": [1.44, 0]}]}
    with pytest.raises(ConfigError, match="euclidean-type"):
        build_scenario(parse_scenario(json.dumps(doc)))


def test_velocity_must_be_lattice_vector():
    doc = json.loads(MINIMAL)
    doc["sequence"] = {"kind": "runaway-bump", "bumps": [{"center": [0, 0], "radius": 1, "velocity": [1.0, 0]}]}
    with pytest.raises(ConfigError, match="lattice vectors"):
        build_scenario(parse_scenario(json.dumps(doc)))


def test_perturbation_only_on_perturbed_manifold():
    doc = json.loads(MINIMAL)
    doc["manifold"]["perturbation"] = {"radius": 1.0, "amplitude": 0.1}
    with pytest.raises(ConfigError, match="no perturbation"):
        parse_scenario(json.dumps(doc))


def test_report_validates_and_is_deterministic(fixed_run, tmp_path):
    doc = fixed_run.to_dict()
    validate_report(doc)
    assert fixed_run.status == "pass"
    again = run_decomposition(load_scenario(SCENARIO_DIR / "fixed_euclidean.json"))
    assert again.deterministic_bytes() == fixed_run.deterministic_bytes()
    paths = emit_report(fixed_run, tmp_path)
    validate_report(json.loads(paths["report"].read_text()))


def test_trace_csv_has_one_row_per_index_and_stage(fixed_run, tmp_path):
    paths = emit_report(fixed_run, tmp_path)
    with open(paths["traces"]) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRACE_COLUMNS
    K = fixed_run.payload["k_max"]
    stages = len(fixed_run.payload["bubbles"]) + 1
    assert len(rows) - 1 == K * stages


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
def test_cli_validate_shipped(path, capsys):
    assert main(["validate", str(path)]) == 0
    assert "valid" in capsys.readouterr().out


def test_cli_run_writes_report(tmp_path, capsys):
    code = main(["run", str(SCENARIO_DIR / "fixed_euclidean.json"), "--out", str(tmp_path), "--kmax", "8"])
    assert code == 0
    assert "status: pass" in capsys.readouterr().out
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["config"]["params"]["k_max"] == 8
    validate_report(doc)


def test_cli_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env"))
    assert main(["run", str(SCENARIO_DIR / "fixed_euclidean.json"), "--kmax", "8"]) == 0
    assert (tmp_path / "env" / "report.json").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(MINIMAL.replace('"p": 3.0', '"p": 2.0'))
    assert main(["validate", str(bad)]) == 2
    assert main(["run", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 6" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.json")]) == 2


def test_cli_gluing_check(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_flat(lattice_gluing(2)).to_json()))
    assert main(["gluing-check", str(good)]) == 0
    assert "gluing data valid" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_flat(perturbed_inverse()).to_json()))
    assert main(["gluing-check", str(bad)]) == 1
    assert "(3b)" in capsys.readouterr().err

    junk = tmp_path / "junk.json"
    junk.write_text("{not json")
    assert main(["gluing-check", str(junk)]) == 2

