#!/usr/bin/env python3
"""
Tests for configuration parsing, presets and run-cell expansion
"""

import json

import pytest

from conftest import TINY_CONFIG_DOC
from core.config_manager import ConfigManager, parse_config, preset_names, resolve_preset
from core.errors import ConfigParseError, ConfigurationError


def test_defaults():
    config = parse_config()
    distill = config.distill_config("kdp")
    assert (distill.alpha, distill.lam, distill.tau, distill.kd_prompt_length) == (0.5, 1.0, 2.0, 6)
    assert distill.class_scope == "current"
    assert config.get("seeds") == [0]


def test_single_override_leaves_the_rest():
    config = parse_config({"distill": {"tau": 4}})
    distill = config.distill_config("kd")
    assert distill.tau == 4.0
    assert distill.alpha == 0.5
    assert config.get("tasks") == parse_config().get("tasks")


def test_misspelled_key_names_the_key():
    with pytest.raises(ConfigParseError) as info:
        parse_config({"distill": {"alhpa": 0.3}})
    assert info.value.key == "distill.alhpa"
    with pytest.raises(ConfigParseError) as info:
        parse_config({"epoch": 3})
    assert info.value.key == "epoch"


@pytest.mark.parametrize("document, key", [
    ({"distill": {"tau": 0}}, "distill.tau"),
    ({"distill": {"alpha": 2}}, "distill.alpha"),
    ({"distill": {"kd_prompt_length": 3}}, "distill.kd_prompt_length"),
    ({"distills": ["kd", "bogus"]}, "distills"),
    ({"seeds": []}, "seeds"),
    ({"distill": 5}, "distill"),
    ({"student": {"image_size": 10}}, "student"),
])
def test_invalid_values(document, key):
    with pytest.raises(ConfigParseError) as info:
        parse_config(document)
    assert info.value.key == key


def test_json_text_and_file_sources(tmp_path):
    text = json.dumps(TINY_CONFIG_DOC)
    path = tmp_path / "tiny.json"
    path.write_text(text)
    assert parse_config(text) == parse_config(str(path)) == parse_config(TINY_CONFIG_DOC)
    with pytest.raises(ConfigParseError):
        parse_config("{not json")
    with pytest.raises(ConfigParseError):
        parse_config("[1, 2]")


def test_export_round_trip(tmp_path):
    config = parse_config(TINY_CONFIG_DOC)
    path = tmp_path / "resolved.json"
    config.export_config(str(path))
    assert parse_config(str(path)) == config


def test_cells_cross_methods_and_seeds():
    config = parse_config({"distills": ["kd", "kdp"], "seeds": [0, 1, 2]})
    cells = config.cells()
    assert len(cells) == 6
    assert len({c.run_id for c in cells}) == 6
    assert cells[0].run_id == "coda-kd-base-s0"
    assert cells[0].run_config.distill.method == "kd"
    assert [c.seed for c in config.cells([7])] == [7, 7]


def test_presets():
    assert "coda-kdp" in preset_names() and "l2p-kdp-noclassifier" in preset_names()
    assert resolve_preset("coda-kdp-noclassifier") == ("coda", "kdp", {"kd_classifier": False})
    with pytest.raises(ConfigParseError):
        resolve_preset("coda-kd-noclassifier")
    config = parse_config({"presets": ["l2p-none", "coda-kdp-noclassifier"]})
    cells = config.cells()
    assert [c.run_id for c in cells] == ["l2p-none-base-s0", "coda-kdp-noclassifier-s0"]
    assert cells[1].run_config.distill.kd_classifier is False
    with pytest.raises(ConfigParseError):
        parse_config({"presets": ["coda-magic"]})


def test_sweep_variants():
    config = parse_config({
        "distills": ["kdp"],
        "sweep": {"kd_prompt_lengths": [2, 4], "kd_prompt_depths": [0], "ablation_grid": True,
                  "unfreeze": True, "prompt_placement": True},
    })
    cells = {c.variant: c for c in config.cells()}
    assert set(cells) == {"base", "len2", "len4", "depth0", "grid-p0c0", "grid-p0c1", "grid-p1c0", "grid-p1c1",
                          "placement-pool", "unfreeze"}
    assert cells["len4"].run_config.distill.kd_prompt_length == 4
    assert cells["depth0"].run_config.distill.kd_prompt_depth == 0
    assert cells["grid-p0c1"].distill == "deit"
    assert cells["placement-pool"].run_config.distill.extra_pool_length == 6
    assert cells["unfreeze"].run_config.unfreeze_last_block is True
    assert cells["base"].run_config.unfreeze_last_block is False


def test_no_runs_selected():
    with pytest.raises(ConfigurationError):
        parse_config({"distills": []}).cells()


def test_pool_overrides_and_full_scale():
    config = parse_config(TINY_CONFIG_DOC)
    pool = config.pool_config("coda")
    assert pool.prompt_length == 2 and pool.layers == (0, 1) and pool.components_per_task == 2
    full = parse_config({"full_scale": True}).pool_config("l2p")
    assert full.size >= parse_config().pool_config("l2p").size


def test_manager_defaults_are_not_shared():
    manager = ConfigManager()
    manager.parse({"seeds": [3]})
    assert manager.default_config["seeds"] == [0]
