import json

import pytest

from bottlevc.config import PRESETS, RunConfig, apply_override, load_config, preset_dict


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load(name):
    cfg = load_config(preset=name)
    assert cfg.preset == name
    assert cfg.generator.hop == cfg.melfront.hop


def test_table_rows_differ_where_expected():
    assert load_config(preset="adv-speaker").stage1.adversarial_weight == 0.1
    assert load_config(preset="learnable-mel").stage2.learnable_mel is True
    assert load_config(preset="e2e").stage2.learnable_mel is False
    assert load_config(preset="latent-10hz").model.freq < load_config(preset="vcc20").model.freq


def test_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"preset": "smoke", "model": {"freq": 8}, "seed": 3}))
    cfg = load_config(tmp_path / "c.json", overrides=["model.freq=4", "stage2.learnable_mel=true"])
    assert cfg.model.freq == 4 and cfg.seed == 3 and cfg.stage2.learnable_mel is True
    assert cfg.model.dim_neck == preset_dict("smoke")["model"]["dim_neck"]


def test_round_trip_dict():
    cfg = load_config(preset="smoke")
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_errors():
    with pytest.raises(ValueError, match="unknown preset"):
        preset_dict("nope")
    with pytest.raises(ValueError, match="unknown keys"):
        RunConfig.from_dict({"model": {"width": 3}})
    with pytest.raises(ValueError, match="hop"):
        load_config(overrides=["melfront.hop=128"])
    with pytest.raises(ValueError):
        apply_override({}, "no-equals-sign")
