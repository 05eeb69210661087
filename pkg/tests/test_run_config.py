import json
from pathlib import Path

import pytest
import yaml

from run_config import (
    WORKERS_ENV,
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    dump_config,
    load_config,
    parse_override,
    resolve_workers,
    run_directory,
)


def test_defaults():
    cfg = load_config()
    assert cfg.schema_version == 1
    assert cfg.synth.seeds == [1, 2]
    assert cfg.preprocess.fwhm_mm == [0.0, 4.0, 8.0]
    assert cfg.fd.method == "box-count"
    assert cfg.fd.q == 0.75
    assert (cfg.fd.box_schedule, cfg.fd.box_frame) == ("bracket", "principal")
    assert cfg.ica.p == ["auto"]
    assert cfg.ica.p_real == [10, 25, 50, 100]


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("fd:\n  q: 0.5\n  method: pair-count\nica:\n  p: [4, auto]\n")
    cfg = load_config(path, ["fd.q=0.9"])
    assert cfg.fd.q == 0.9
    assert cfg.fd.method == "pair-count"
    assert cfg.ica.p == [4, "auto"]


def test_json_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"synth": {"seeds": [3, 5], "noise_level": 0.2}}))
    cfg = load_config(path)
    assert cfg.synth.seeds == [3, 5]
    assert cfg.synth.noise_level == 0.2


def test_later_overrides_win():
    cfg = load_config(overrides=["ica.seed=1", "ica.seed=7"])
    assert cfg.ica.seed == 7


def test_override_parsing():
    assert parse_override("fd.strides=[1, 2]") == (["fd", "strides"], [1, 2])
    assert parse_override("report.title=FD run") == (["report", "title"], "FD run")
    assert parse_override("run.workers=") == (["run", "workers"], None)
    with pytest.raises(ConfigError):
        parse_override("fd.q")
    with pytest.raises(ConfigError):
        parse_override("fd.q=[1")


def test_apply_overrides_creates_sections_and_keeps_input():
    data = {"fd": {"q": 0.5}}
    out = apply_overrides(data, ["synth.constants.tr_s=3.0"])
    assert out["synth"]["constants"]["tr_s"] == 3.0
    assert out["fd"] == {"q": 0.5}
    assert "synth" not in data


@pytest.mark.parametrize("overrides", [
    ["fd.unknown=1"],
    ["fd.q=1.5"],
    ["fd.method=grid"],
    ["synth.seeds=[1, 1]"],
    ["synth.seeds=[-1]"],
    ["preprocess.fwhm_mm=[-4]"],
    ["fd.strides=[0]"],
    ["ica.p=[0]"],
    ["ica.p_real=[]"],
    ["fd.box_schedule=extent"],
    ["schema_version=2"],
])
def test_invalid_values_raise_config_error(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("fd: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError):
        load_config(scalar)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(path) == RunConfig()


def test_hash_ignores_run_section():
    base = load_config()
    moved = load_config(overrides=["run.output_root=/elsewhere", "run.workers=4"])
    changed = load_config(overrides=["fd.q=0.5"])
    assert config_hash(base) == config_hash(moved)
    assert config_hash(base) != config_hash(changed)
    assert len(config_hash(base)) == 64


def test_run_directory_name(tmp_path):
    cfg = load_config(overrides=[f"run.output_root={json.dumps(str(tmp_path))}"])
    directory = run_directory(cfg)
    assert directory.parent == tmp_path
    assert directory.name == f"run-{config_hash(cfg)[:12]}"


def test_dump_round_trip():
    cfg = load_config(overrides=["ica.p=[2, auto]", "fd.radii=[1.0, 0.5]"])
    assert RunConfig.model_validate(yaml.safe_load(dump_config(cfg))) == cfg


def test_workers_resolution(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    cfg = load_config()
    assert resolve_workers(cfg) == 1
    assert resolve_workers(cfg, 3) == 3
    with pytest.raises(ConfigError):
        resolve_workers(cfg, 0)

    monkeypatch.setenv(WORKERS_ENV, "4")
    assert resolve_workers(cfg) == 4
    assert resolve_workers(load_config(overrides=["run.workers=2"])) == 2
    assert resolve_workers(cfg, 5) == 5

    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(ConfigError):
        resolve_workers(cfg)
    monkeypatch.setenv(WORKERS_ENV, "0")
    with pytest.raises(ConfigError):
        resolve_workers(cfg)


def test_example_config_is_valid():
    cfg = load_config(Path(__file__).resolve().parent.parent / "example_config.yaml")
    assert cfg.synth.seeds == [1, 2, 3, 4, 5]
    assert cfg.ica.p == [4, 8, "auto"]
    assert cfg.ica.p_real == [10, 25, 50, 100]
    assert cfg.run.workers == 4
