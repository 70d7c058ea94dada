import json

import pytest

from sider.config import DEFAULTS, ConfigError, PipelineConfig, load_config


def test_defaults_fill_in(tmp_path):
    cfg = PipelineConfig({"schema_version": 1, "workdir": "w"}, base_dir=tmp_path)
    a = cfg["attack"]
    assert (a["alpha"], a["mu"], a["strength"], a["s"], a["lambda_s"], a["N"]) == (0.01, 0.6, 0.75, 1.0, 3.0, 30)
    assert cfg["diffusion"]["T"] == 20
    assert cfg["eval"]["far_target"] == 0.01
    assert cfg.workdir == tmp_path / "w"


def test_partial_block_override_keeps_other_defaults():
    cfg = PipelineConfig({"schema_version": 1, "workdir": "w", "attack": {"mu": 0.0}})
    assert cfg["attack"]["mu"] == 0.0 and cfg["attack"]["alpha"] == DEFAULTS["attack"]["alpha"]


@pytest.mark.parametrize("doc,needle", [
    ({"workdir": "w"}, "schema_version"),
    ({"schema_version": 1}, "workdir"),
    ({"schema_version": 2, "workdir": "w"}, "schema_version"),
    ({"schema_version": 1, "workdir": "w", "attack": {"alpah": 0.1}}, "alpah"),
    ({"schema_version": 1, "workdir": "w", "attack": {"alpha": -1}}, "attack.alpha"),
    ({"schema_version": 1, "workdir": "w", "attack": {"seeds": [3, 3]}}, "seeds"),
    ({"schema_version": 1, "workdir": "w", "diffusion": {"beta_min": 0.3, "beta_max": 0.2}}, "beta_min"),
    ({"schema_version": 1, "workdir": "w", "embedders": {"heldout": 9}}, "heldout"),
])
def test_violations_name_the_key(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        PipelineConfig(doc)


def test_json_and_toml_agree(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"schema_version": 1, "workdir": "w", "attack": {"N": 5}}))
    (tmp_path / "c.toml").write_text('schema_version = 1\nworkdir = "w"\n[attack]\nN = 5\nmask_path = ""\n')
    a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.toml")
    assert a.doc == b.doc and a.config_hash() == b.config_hash()


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "list.json")


def test_hashes_track_content():
    a = PipelineConfig({"schema_version": 1, "workdir": "x"})
    b = PipelineConfig({"schema_version": 1, "workdir": "y"})
    c = PipelineConfig({"schema_version": 1, "workdir": "x", "crm": {"epochs": 1}})
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert a.block_hash("attack") == c.block_hash("attack")
    assert a.block_hash("crm") != c.block_hash("crm")


def test_crop_must_divide_resolution():
    with pytest.raises(ConfigError, match="crm.crop"):
        PipelineConfig({"schema_version": 1, "workdir": "w", "data": {"resolution": 48}})
    assert PipelineConfig({"schema_version": 1, "workdir": "w", "data": {"resolution": 48},
                           "crm": {"crop": 16}})["crm"]["crop"] == 16
    assert PipelineConfig({"schema_version": 1, "workdir": "w", "crm": {"crop": None}})["crm"]["crop"] is None
