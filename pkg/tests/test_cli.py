import json
from importlib import resources

import pytest

from dynqkd.cli import main

DATA = resources.files("dynqkd").joinpath("data")


def test_topology_validate_ok(capsys):
    assert main(["topology", "validate", str(DATA.joinpath("testbed_topology.json"))]) == 0
    assert "ok: 4 nodes, 6 spans" in capsys.readouterr().out


def test_topology_validate_bad(tmp_path):
    bad = tmp_path / "t.json"
    bad.write_text(json.dumps({"nodes": [{"id": "N1"}], "spans": [{"a": "N1", "b": "N9", "length_km": 1}]}))
    assert main(["topology", "validate", str(bad)]) == 1


def test_topology_missing_file(tmp_path):
    assert main(["topology", "validate", str(tmp_path / "nope.json")]) == 2


def test_calibrate_then_preset(tmp_path):
    params = tmp_path / "params.json"
    rc = main(["calibrate", "--table3", str(DATA.joinpath("table3.csv")),
               "--anchors", str(DATA.joinpath("anchors.json")), "--out", str(params)])
    assert rc == 0 and params.exists()
    assert main(["preset", "table3", "--params", str(params), "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "table3.csv").read_text().startswith("link,budget_db,qber_pct,skr_bps\n")


def test_calibrate_failure_exit_code(tmp_path):
    anchors = json.loads(DATA.joinpath("anchors.json").read_text())
    for a in anchors["anchors"]:
        if a["route"] == "L1+L2":
            a["kind"] = {"qber_min": "qber_max", "qber_max": "qber_min"}[a["kind"]]
    path = tmp_path / "anchors.json"
    path.write_text(json.dumps(anchors))
    rc = main(["calibrate", "--table3", str(DATA.joinpath("table3.csv")), "--anchors", str(path),
               "--out", str(tmp_path / "p.json")])
    assert rc == 1


def test_run_deterministic(tmp_path):
    scen = str(DATA.joinpath("scenarios", "reroute.json"))
    for d in ("a", "b"):
        assert main(["run", "--scenario", scen, "--seed", "5", "--out", str(tmp_path / d)]) == 0
    for name in ("events.csv", "controller_log.csv", "kms_audit.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_missing_scenario(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "x.json"), "--out", str(tmp_path)]) == 2


def test_run_bad_seed(tmp_path):
    scen = str(DATA.joinpath("scenarios", "reroute.json"))
    assert main(["run", "--scenario", scen, "--seed", "-1", "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize("name", ["fig4a", "fig4b", "fig4cd", "fig5"])
def test_figure_presets(tmp_path, name):
    assert main(["preset", name, "--out", str(tmp_path)]) == 0
    assert (tmp_path / f"{name}.csv").exists()
