import json
from pathlib import Path

import pytest
import yaml

from superatom_lab import cli
from superatom_lab.config import (SHIPPED_SCENARIOS, load_scenario, parse_scenario, sanity_warnings,
                                  scenario_path)
from superatom_lab.errors import ConfigurationError

CHAIN_STAGES = ["chain-sim", "image-sim", "detect", "analyze"]


def _small(n_shots=60):
    return load_scenario("chain_126um").with_overrides(chain={"n_shots": n_shots})


def _write(tmp_path, sc, name="s.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(sc.model_dump(mode="json"), sort_keys=False))
    return p


def _data_hashes(out: Path) -> dict:
    hashes = {}
    for m in sorted(out.glob("manifest_*.json")):
        hashes.update(json.loads(m.read_text())["outputs"])
    return hashes


@pytest.mark.parametrize("name", SHIPPED_SCENARIOS)
def test_shipped_scenarios_valid_without_warnings(name, capsys):
    assert cli.main(["validate", "--scenario", name]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["valid"] and rep["warnings"] == []


def test_unknown_key_named(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("name: x\nchain:\n  n_atom: 5\n")
    assert cli.main(["validate", "--scenario", str(p)]) == 2
    assert "n_atom" in capsys.readouterr().err


def test_yaml_error_reports_line_and_column():
    with pytest.raises(ConfigurationError, match=r"line 3, column 8"):
        parse_scenario("name: x\nseed: 1\n  chain: 2\n")


def test_schema_violation_exit_code(tmp_path):
    p = tmp_path / "neg.yaml"
    p.write_text("name: x\ncloud:\n  sigma_r: -1\n")
    assert cli.main(["validate", "--scenario", str(p)]) == 2


def test_feasibility_warning():
    sc = _small().with_overrides(chain={"r_block": 30.0})
    warns = sanity_warnings(sc)
    assert any("chainmc" in w and "a_x/N" in w for w in warns)


def test_scenario_round_trip(tmp_path):
    sc = load_scenario("spectroscopy_350um")
    assert load_scenario(_write(tmp_path, sc)) == sc
    with pytest.raises(ConfigurationError):
        scenario_path("no_such_scenario")


def test_analyze_before_detect_is_dependency_error(tmp_path):
    p = _write(tmp_path, _small())
    assert cli.main(["analyze", "--scenario", str(p), "--out-dir", str(tmp_path / "o")]) == 3
    assert cli.main(["image-sim", "--scenario", str(p), "--out-dir", str(tmp_path / "o")]) == 3


def test_infeasible_chain_exit_code(tmp_path):
    p = _write(tmp_path, _small().with_overrides(chain={"r_block": 30.0}))
    assert cli.main(["chain-sim", "--scenario", str(p), "--out-dir", str(tmp_path / "o")]) == 4


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        cli.run_pipeline(_small(), ["render"], tmp_path)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    sc = _small()
    cli.run_pipeline(sc, CHAIN_STAGES, root / "a", workers=1)
    cli.run_pipeline(sc, CHAIN_STAGES, root / "b", workers=1)
    cli.run_pipeline(sc, CHAIN_STAGES, root / "c", workers=4)
    return root


def test_pipeline_outputs(small_run):
    out = small_run / "a"
    for f in ["chain.csv", "detections.csv", "g2.csv", "fft.csv", "hist1d.csv", "summary.json"]:
        assert (out / f).exists(), f
    assert len(list((out / "frames").glob("shot_*.saf"))) == 60
    rows = cli.read_csv(out / "detections.csv")
    assert set(cli.DETECTION_HEADER) <= set(rows[0])


def test_pipeline_deterministic_across_runs_and_workers(small_run):
    a, b, c = (_data_hashes(small_run / k) for k in "abc")
    assert a and a == b == c


def test_every_output_in_exactly_one_manifest(small_run):
    out = small_run / "a"
    listed = []
    for m in out.glob("manifest_*.json"):
        body = json.loads(m.read_text())
        listed += list(body["outputs"])
        assert {"inputs", "seed", "versions", "wall_time_s", "scenario_sha256"} <= set(body)
    assert len(listed) == len(set(listed))
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest_")}
    assert on_disk == set(listed)


def test_seed_override_changes_chain(tmp_path):
    sc = _small(20)
    cli.run_pipeline(sc, ["chain-sim"], tmp_path / "x", seed=1)
    cli.run_pipeline(sc, ["chain-sim"], tmp_path / "y", seed=2)
    assert (tmp_path / "x" / "chain.csv").read_bytes() != (tmp_path / "y" / "chain.csv").read_bytes()


def test_detect_flags_via_cli(tmp_path):
    p = _write(tmp_path, _small(10).with_overrides(detection={"fit": False}))
    o = str(tmp_path / "o")
    assert cli.main(["chain-sim", "--scenario", str(p), "--out-dir", o]) == 0
    assert cli.main(["image-sim", "--scenario", str(p), "--out-dir", o]) == 0
    assert cli.main(["detect", "--scenario", str(p), "--out-dir", o, "--a-thld", "0.5", "--filter-px", "2"]) == 0
    rows = cli.read_csv(Path(o) / "detections.csv")
    assert rows and not any(r["above_threshold"] in ("1", "True", "true") for r in rows)
