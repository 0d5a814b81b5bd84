import json
import shutil

import httpx
import pytest

from conftest import FIXTURES
from relaygeom import cli, onionoo

CONFIG = """
[paths]
store = store
[training]
start = 2026-01-01
end = 2026-01-08
seed = 0
[baseline]
start = 2026-01-01
end = 2026-01-15
[sweep]
start = 2026-01-16
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic stable store with trained models and baselines."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "pipeline.ini"
    cfg.write_text(CONFIG)
    assert run("synth", "--config", cfg, "--relays", 2000, "--windows", 24, "--seed", 0) == 0
    assert run("train", "--config", cfg) == 0
    assert run("baseline", "--config", cfg) == 0
    return root, cfg


def test_sweep_over_stable_range_is_all_normal(workspace, capsys):
    root, cfg = workspace
    out = root / "sweep.ndjson"
    assert run("sweep", "--config", cfg, "--out", out) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 9
    assert recs[0]["date"] == "2026-01-16"
    assert {r["label"] for r in recs} == {"NORMAL"}


def test_sweep_table_round_trips_through_report(workspace, capsys):
    root, cfg = workspace
    table = root / "sweep.csv"
    assert run("sweep", "--config", cfg, "--format", "table", "--out", table) == 0
    report = root / "report.md"
    assert run("report", "--config", cfg, "--records", table, "--format", "table", "--out", report) == 0
    assert "0 of 9 windows non-NORMAL" in report.read_text()


def test_train_twice_is_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    models = tmp_path / "again"
    assert run("train", "--config", cfg, "--models", models) == 0
    for name in ("encoder.rgm", "grbm.rgm"):
        assert (models / name).read_bytes() == (root / "models" / name).read_bytes()


def test_frozen_files_are_not_replaced_without_force(workspace, capsys):
    root, cfg = workspace
    before = (root / "models" / "encoder.rgm").read_bytes()
    assert run("train", "--config", cfg) == cli.EXIT_DATA
    assert "--force" in capsys.readouterr().err
    assert run("baseline", "--config", cfg) == cli.EXIT_DATA
    assert (root / "models" / "encoder.rgm").read_bytes() == before


def test_classify_feb20_fixture(capsys):
    assert run("classify", "--records", FIXTURES / "feb20_record.ndjson") == 0
    out = capsys.readouterr().out
    assert out.startswith("2026-02-20 REGIME_E")
    assert "fired: CH6_GLOBAL_EJT, CH1_ROTATION" in out


def test_classify_missing_date(capsys):
    code = run("classify", "--records", FIXTURES / "feb20_record.ndjson", "--date", "2026-02-21")
    assert code == cli.EXIT_DATA


def test_report_lists_non_normal_windows(tmp_path):
    out = tmp_path / "r.md"
    assert run("report", "--records", FIXTURES / "feb20_record.ndjson", "--out", out) == 0
    text = out.read_text()
    assert "| 2026-02-20 | REGIME_E | CH6_GLOBAL_EJT, CH1_ROTATION |" in text
    assert "1 of 1 windows non-NORMAL" in text


def test_null_command(workspace, capsys):
    root, cfg = workspace
    assert run("null", "--config", cfg, "--iterations", 3, "--seed", 1) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["iterations"] == 3 and res["empirical_date"] == "2026-01-24"
    assert res["empirical_rho1"] > res["null_max"]


@pytest.mark.parametrize("argv", [(), ("explode",), ("sweep", "--bogus"), ("sweep", "--from", "yesterday")])
def test_usage_errors(argv, capsys):
    assert run(*argv) == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[nope]\n")
    assert run("sweep", "--config", cfg) == cli.EXIT_USAGE


def test_sweep_start_inside_training_window_refused(workspace):
    _, cfg = workspace
    assert run("sweep", "--config", cfg, "--from", "2026-01-05") == cli.EXIT_USAGE


def test_missing_store_data_is_data_error(tmp_path):
    cfg = tmp_path / "p.ini"
    cfg.write_text(CONFIG)
    assert run("train", "--config", cfg) == cli.EXIT_DATA


def test_schema_mismatch_is_model_error(workspace, tmp_path):
    root, cfg = workspace
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    manifest = copy / "store" / "manifest.ini"
    manifest.write_text(manifest.read_text().replace("latitude", "latitude_renamed"))
    assert run("sweep", "--config", copy / "pipeline.ini") == cli.EXIT_MODEL


def test_fetch_network_failure(monkeypatch, tmp_path):
    def failing(config):
        fast = onionoo.EndpointConfig(max_retries=1, backoff_base=0.0, min_interval=0.0)
        return onionoo.OnionooClient(fast, httpx.MockTransport(lambda r: httpx.Response(503)))

    monkeypatch.setattr(cli, "OnionooClient", failing)
    assert run("fetch", "--out", tmp_path / "store") == cli.EXIT_NETWORK


def test_fetch_from_recorded_response(monkeypatch, tmp_path, capsys):
    body = (FIXTURES / "onionoo_details_100.json").read_text()

    def recorded(config):
        return onionoo.OnionooClient(config, httpx.MockTransport(
            lambda r: httpx.Response(200, text=body)), sleep=lambda s: None)

    monkeypatch.setattr(cli, "OnionooClient", recorded)
    assert run("fetch", "--out", tmp_path / "store") == 0
    assert json.loads(capsys.readouterr().out) == {"date": "2026-02-20", "relays": 100, "skipped": 0,
                                                    "written": True}
    assert run("fetch", "--out", tmp_path / "store", "--from", "2026-03-01") == cli.EXIT_DATA


def test_synth_with_scenario_file(tmp_path, capsys):
    scen = tmp_path / "s.ini"
    scen.write_text("[event.one]\nkind = FRACTURE\nstart = 2\n")
    assert run("synth", "--relays", 50, "--windows", 4, "--scenario", scen, "--out", tmp_path / "st") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["events"] == [{"kind": "FRACTURE", "start": 2, "duration": 1}]
    scen.write_text("[event.one]\nkind = FRACTURE\nstart = 9\n")
    assert run("synth", "--relays", 50, "--windows", 4, "--scenario", scen, "--out", tmp_path / "s2") == cli.EXIT_DATA
