import hashlib
import json
from pathlib import Path

import pytest

from cogsim.cli import load_config, main
from cogsim.errors import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"


def write_config(tmp_path, body, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return path


def minimal_market_config(out_dir, trials=1, **extra):
    body = {
        "runner": "run",
        "environment": {"kind": "market", "agents": 3, "days": 1},
        "agents": {"memory": {"kind": "buffer", "capacity": 3}},
        "backend": {"kind": "scripted", "default_content": json.dumps({"orders": []})},
        "trials": trials,
        "out": str(out_dir),
    }
    body.update(extra)
    return body


# --- load_config ------------------------------------------------------------------


def test_load_config_market_roster(tmp_path):
    path = write_config(tmp_path, {"environment": {"kind": "market", "agents": 50, "days": 10}})
    config = load_config(path)
    assert config.environment["agents"] == 50
    assert config.environment["days"] == 10
    assert config.seed == 0  # documented default
    assert config.trials == 1


def test_unknown_top_level_key_rejected(tmp_path):
    path = write_config(tmp_path, {"environment": {"kind": "market"}, "foo": 1})
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "foo" in str(err.value)


def test_unknown_section_key_names_dotted_path(tmp_path):
    path = write_config(
        tmp_path, {"environment": {"kind": "market"}, "agents": {"persona_text": "x", "oops": 1}}
    )
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "agents.oops"


def test_missing_environment_rejected(tmp_path):
    path = write_config(tmp_path, {"seed": 3})
    with pytest.raises(ConfigError):
        load_config(path)


def test_invalid_json_is_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


# --- main -------------------------------------------------------------------------


def test_run_happy_path_writes_bundle(tmp_path):
    out = tmp_path / "out"
    config = write_config(tmp_path, minimal_market_config(out))
    assert main(["run", "--config", str(config)]) == 0
    for name in ("events.jsonl", "metrics.csv", "summary.txt", "manifest.json"):
        assert (out / name).exists()


def test_missing_config_flag_exits_one(capsys):
    assert main(["run"]) == 1
    captured = capsys.readouterr()
    assert "usage" in captured.err.lower()


def test_unknown_subcommand_exits_one():
    assert main(["frobnicate", "--config", "x.json"]) == 1


def test_config_error_exits_one(tmp_path, capsys):
    config = write_config(tmp_path, {"environment": {"kind": "market"}, "foo": 1})
    assert main(["run", "--config", str(config)]) == 1
    assert "foo" in capsys.readouterr().err


def test_runtime_failure_exits_two(tmp_path, capsys):
    # valid config shape, but the scripted backend emits junk the schema rejects
    out = tmp_path / "out"
    body = minimal_market_config(out)
    body["backend"] = {"kind": "scripted", "default_content": "not json at all"}
    config = write_config(tmp_path, body)
    assert main(["run", "--config", str(config)]) == 2
    assert "failure" in capsys.readouterr().err


def test_default_seed_recorded_in_manifest(tmp_path):
    out = tmp_path / "out"
    config = write_config(tmp_path, minimal_market_config(out))
    main(["run", "--config", str(config)])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert manifest["code_version"]


def test_seed_flag_overrides_config(tmp_path):
    out = tmp_path / "out"
    config = write_config(tmp_path, minimal_market_config(out))
    main(["run", "--config", str(config), "--seed", "9"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9


def test_manifest_inventories_every_file_with_matching_hash(tmp_path):
    out = tmp_path / "out"
    config = write_config(tmp_path, minimal_market_config(out))
    main(["run", "--config", str(config)])
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {entry["name"]: entry["sha256"] for entry in manifest["files"]}
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(listed) == on_disk
    for name, digest in listed.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_rerun_byte_identical_events_and_metrics(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    config_a = write_config(tmp_path, minimal_market_config(out_a), name="a.json")
    config_b = write_config(tmp_path, minimal_market_config(out_b), name="b.json")
    main(["run", "--config", str(config_a)])
    main(["run", "--config", str(config_b)])
    assert (out_a / "events.jsonl").read_bytes() == (out_b / "events.jsonl").read_bytes()
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()


def test_trials_csv_mean_stddev_rows(tmp_path):
    out = tmp_path / "out"
    body = minimal_market_config(out, trials=3)
    body["runner"] = "trials"
    config = write_config(tmp_path, body)
    assert main(["trials", "--config", str(config)]) == 0
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[-2].startswith("mean,")
    assert lines[-1].startswith("stddev,")
    assert len(lines) == 1 + 3 + 2


def test_trials_flag_overrides(tmp_path):
    out = tmp_path / "out"
    body = minimal_market_config(out, trials=1)
    config = write_config(tmp_path, body)
    main(["trials", "--config", str(config), "--trials", "2"])
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2 + 2


def test_score_recomputes_metrics_from_events(tmp_path):
    out = tmp_path / "out"
    config = write_config(tmp_path, minimal_market_config(out))
    main(["run", "--config", str(config)])
    original_metrics = (out / "metrics.csv").read_bytes()
    (out / "metrics.csv").write_bytes(b"tampered\n")
    assert main(["score", "--config", str(config)]) == 0
    assert (out / "metrics.csv").read_bytes() == original_metrics


def test_backend_flag_rejects_unknown_choice(tmp_path, capsys):
    config = write_config(tmp_path, minimal_market_config(tmp_path / "o"))
    assert main(["run", "--config", str(config), "--backend", "psychic"]) == 1


# --- shipped demo configs ------------------------------------------------------------


@pytest.mark.parametrize(
    "name,command",
    [
        ("market_small.json", "run"),
        ("trials_market.json", "trials"),
        ("multiworld_market_social.json", "multiworld"),
        ("transfer_market_bias.json", "transfer"),
    ],
)
def test_shipped_configs_run_clean(name, command, tmp_path, monkeypatch):
    monkeypatch.chdir(CONFIGS.parent)
    out = tmp_path / name.replace(".json", "")
    assert main([command, "--config", str(CONFIGS / name), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()


def test_shipped_ablation_config_runs_clean(tmp_path, monkeypatch):
    monkeypatch.chdir(CONFIGS.parent)
    out = tmp_path / "ablation"
    code = main(["ablation", "--config", str(CONFIGS / "ablation_tariff.json"), "--out", str(out), "--trials", "1"])
    assert code == 0
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "setting,stock_A,stock_B,delta_A,delta_B"
    assert len(lines) == 5
