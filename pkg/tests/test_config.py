import pytest

from denodepth.config import (
    AugmentationConfig,
    ConfigError,
    ExperimentConfig,
    dump_config,
    load_config,
)

SAMPLE_INI = """
[scene]
height = 32
width = 64
depth_min = 1.5
depth_max = 6.0

[model]
latent_dim = 8
cond_dim = 16
channel_plan = 8, 16, 16, 16

[train]
steps = 12
batch_size = 1
t_train = 100
k_infer = 10
diffusion_target = gt
supervision = sparse

[augment]
crop_h = 32
crop_w = 64
flip_prob = 0.0
rotation_deg = 0.0
scale_max = 1.0

[data]
sparse_density = 0.04
sparse_pattern = scanline
"""


def test_load_config_from_text():
    cfg = load_config(text=SAMPLE_INI)
    assert cfg.scene.height == 32 and cfg.scene.depth_max == 6.0
    assert cfg.model.latent_dim == 8
    assert cfg.model.channel_plan == (8, 16, 16, 16)
    assert cfg.train.steps == 12 and cfg.train.diffusion_target == "gt"
    assert cfg.augment.crop_h == 32
    assert cfg.sparse_density == 0.04 and cfg.sparse_pattern == "scanline"
    assert cfg.raw_text == SAMPLE_INI
    cfg.validate()


def test_load_config_from_file(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(SAMPLE_INI)
    cfg = load_config(path)
    assert cfg.train.k_infer == 10


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError):
        load_config(text="[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(text="[train]\nlearning = fast\n")
    with pytest.raises(ConfigError):
        load_config(text="[data]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(text="not ini at all [")


def test_validation_catches_cross_field_problems():
    cfg = ExperimentConfig()
    cfg.train.k_infer = 2000
    with pytest.raises(ConfigError, match="k_infer"):
        cfg.validate()

    cfg = ExperimentConfig()
    cfg.augment.crop_h = 999
    with pytest.raises(ConfigError, match="crop"):
        cfg.validate()

    cfg = ExperimentConfig()
    cfg.train.base_lr = 1e-9
    with pytest.raises(ConfigError, match="base_lr"):
        cfg.validate()

    cfg = ExperimentConfig()
    cfg.train.diffusion_target = "both"
    with pytest.raises(ConfigError, match="diffusion_target"):
        cfg.validate()

    cfg = ExperimentConfig()
    cfg.sparse_density = 0.0
    with pytest.raises(ConfigError, match="sparse_density"):
        cfg.validate()


def test_defaults_validate():
    ExperimentConfig().validate()


def test_backbone_preset_resolves_channel_plan():
    cfg = ExperimentConfig()
    cfg.model.backbone_preset = "mid"
    cfg.validate()
    assert cfg.model.channel_plan == (64, 128, 256, 512)

    cfg = ExperimentConfig()
    cfg.model.backbone_preset = "enormous"
    with pytest.raises(ConfigError, match="backbone_preset"):
        cfg.validate()


def test_attn_window_validated():
    cfg = ExperimentConfig()
    cfg.model.attn_window = -1
    with pytest.raises(ConfigError, match="attn_window"):
        cfg.validate()


def test_dump_and_reload_roundtrip():
    cfg = load_config(text=SAMPLE_INI)
    text = dump_config(cfg)
    again = load_config(text=text)
    assert again.scene == cfg.scene
    assert again.model == cfg.model
    assert again.train == cfg.train
    assert again.augment == cfg.augment
    assert again.sparse_density == cfg.sparse_density


def test_identity_augmentation_factory():
    a = AugmentationConfig.identity(48, 96)
    assert a.crop_h == 48 and a.crop_w == 96
    assert a.flip_prob == 0.0 and a.scale_max == 1.0 and a.rotation_deg == 0.0
