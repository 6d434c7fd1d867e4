import pytest

from amieod.config import RunConfig, TrainConfig, apply_overrides, config_from_dict, load_config


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert cfg.stage1.lr == 0.01 and cfg.stage1.batch_size == 8
    assert cfg.stage2.lr == 0.001 and cfg.stage2.batch_size == 1
    assert cfg.stage1.alpha == 0.2
    assert cfg.stage1.momentum == 0.937 and cfg.stage1.weight_decay == 0.0005
    assert cfg.stage1.epochs == 20 and cfg.stage2.epochs == 10
    assert cfg.stage1.input_size == 128


def test_paper_scale_factories():
    s1 = TrainConfig.stage1_defaults()
    s2 = TrainConfig.stage2_defaults()
    assert (s1.lr, s1.epochs, s1.batch_size, s1.input_size) == (0.01, 100, 8, 640)
    assert (s2.lr, s2.epochs, s2.batch_size) == (0.001, 30, 1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage=3, lr=0.01, epochs=1, batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(stage=1, lr=0.0, epochs=1, batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(stage=1, lr=0.01, epochs=1, batch_size=1, alpha=1.5)


def test_toml_round_trip(tmp_path):
    text = """
seed = 42

[data]
root = "data/example"

[detector]
num_classes = 5
anchors = [[8, 8], [16, 16]]

[stage1]
lr = 0.02
epochs = 3
batch_size = 4
input_size = 64
"""
    path = tmp_path / "run.toml"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.seed == 42
    assert cfg.stage1.seed == 42
    assert cfg.data.root == "data/example"
    assert cfg.detector.num_classes == 5
    assert cfg.detector.anchors == ((8, 8), (16, 16))
    assert cfg.stage1.lr == 0.02 and cfg.stage1.epochs == 3

    # dict snapshot reproduces the same config
    again = config_from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_unknown_section_and_key_rejected():
    with pytest.raises(ValueError, match="unknown config section"):
        config_from_dict({"nonsense": {}})
    with pytest.raises(ValueError, match="unknown key"):
        config_from_dict({"stage1": {"learning_rate": 0.1}})


def test_overrides():
    cfg = RunConfig()
    apply_overrides(cfg, ["stage1.lr=0.5", "detector.num_classes=7", "seed=9",
                          "data.root=elsewhere"])
    assert cfg.stage1.lr == 0.5
    assert cfg.detector.num_classes == 7
    assert cfg.seed == 9 and cfg.stage1.seed == 9
    assert cfg.data.root == "elsewhere"


def test_override_unknown_key_rejected():
    cfg = RunConfig()
    with pytest.raises(ValueError, match="unknown config key"):
        apply_overrides(cfg, ["stage1.wrong=1"])
    with pytest.raises(ValueError, match="unknown config key"):
        apply_overrides(cfg, ["nope.lr=1"])
    with pytest.raises(ValueError, match="section.key=value"):
        apply_overrides(cfg, ["stage1.lr"])
