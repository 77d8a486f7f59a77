import pytest

from hqvae.config import ConfigError, LayerSpec, ModelConfig, RunConfig, dump_config, load_config, preset_layers


def test_defaults_validate_and_groups():
    cfg = RunConfig().validate()
    assert cfg.model.resolutions == [8, 16]
    assert cfg.model.groups == [[0], [1]]
    hyb = ModelConfig(variant="hybrid", layers=[LayerSpec("first", 8, 4), LayerSpec("residual", 8, 4),
                                                LayerSpec("injected", 16, 4), LayerSpec("residual", 16, 4)])
    assert hyb.validate().groups == [[0, 1], [2, 3]]


@pytest.mark.parametrize("kw", [
    {"variant": "nope"},
    {"layers": []},
    {"layers": [LayerSpec("residual", 8, 4)]},
    {"layers": [LayerSpec("first", 8, 4), LayerSpec("first", 8, 4)]},
    {"variant": "rsqvae"},
    {"variant": "vqvae"},
    {"beta": 0.0},
    {"ema_decay": 1.0},
    {"s2_init": -1.0},
    {"objective": "naive"},
    {"layers": [LayerSpec("first", 6, 4)]},
    {"shared_codebook": True, "layers": [LayerSpec("first", 8, 4), LayerSpec("injected", 16, 8)]},
])
def test_invalid_model_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw).validate()


def test_presets():
    assert [(l.kind, l.resolution) for l in preset_layers("sqvae2", 3, 8, 4)] == \
        [("first", 4), ("injected", 8), ("injected", 16)]
    assert {l.resolution for l in preset_layers("rqvae", 4, 8)} == {8}
    with pytest.raises(ConfigError):
        preset_layers("hybrid", 2, 8)


def test_yaml_roundtrip_and_hash(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.content_hash() == cfg.content_hash()
    back.train.seed = 1
    assert back.content_hash() != cfg.content_hash()


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.yaml"):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("model:\n  d_b: 3\n  layers: [\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(p)
    p.write_text("model:\n  nonsense: 1\n")
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(p)
    p.write_text("- 1\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p)


def test_train_config_validation():
    cfg = RunConfig.from_dict({"train": {"patience": 0}})
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = RunConfig.from_dict({"data": {"image_size": 64}})
    with pytest.raises(ConfigError):
        cfg.validate()
