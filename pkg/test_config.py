from pathlib import Path

import pytest

from utils.config import RunConfig, build_config, dump_config, load_config, parse_bindings
from utils.validation import ConfigError

DEFAULT_CFG = Path(__file__).parent / "configs" / "default.cfg"


def _load_text(tmp_path, text, **kwargs):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return load_config(path, **kwargs)


def test_default_config_loads():
    config = load_config(DEFAULT_CFG)
    assert config.seed == 20240601
    assert config.sim.grid_nx == 160
    assert config.data.train_series == (1, 2, 6, 7, 9, 10)
    assert config.data.test_series == (3, 8)
    assert config.model.backbone(64).coord_channels is True
    assert config.train.stage_lrs == (0.001, 0.0001, 0.0001)
    assert config.augment.enabled is True
    assert config.select_r() == 16.0
    spec = config.sim.plate_spec()
    assert spec.probe_pos == (40.0, 0.0)
    assert config.train.schedule().total_epochs == 40
    assert config.train.schedule().stages[0].trainable == "all"


def test_comments_and_blank_lines_are_skipped():
    assert parse_bindings("# comment\n\nseed=3\n  \nworkers=2 # trailing\n") == [("seed", "3", 3), ("workers", "2", 5)]


def test_unknown_key_names_key_and_line(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load_text(tmp_path, "seed=1\nsim.bogus=3\n")
    assert (info.value.key, info.value.line) == ("sim.bogus", 2)
    with pytest.raises(ConfigError) as info:
        _load_text(tmp_path, "seed=1\n\nplate.grid_nx=3\n")
    assert (info.value.key, info.value.line) == ("plate.grid_nx", 3)


def test_missing_value(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load_text(tmp_path, "seed=1\nsim.grid_nx\n")
    assert info.value.key == "sim.grid_nx"
    assert info.value.line == 2


def test_invalid_value_names_key_and_line(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load_text(tmp_path, "seed=1\nworkers=1\nsim.grid_nx=abc\n")
    assert (info.value.key, info.value.line) == ("sim.grid_nx", 3)
    with pytest.raises(ConfigError) as info:
        _load_text(tmp_path, "seed=1\nbench.reps=5\n")
    assert info.value.key == "bench.reps"


def test_duplicate_key_rejected(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load_text(tmp_path, "seed=1\nseed=2\n")
    assert info.value.line == 2


def test_overrides_win(tmp_path):
    config = _load_text(tmp_path, "seed=1\ntrain.batch_size=16\n", overrides=["train.batch_size=4"], seed=9)
    assert config.train.batch_size == 4
    assert config.seed == 9
    with pytest.raises(ConfigError) as info:
        load_config(DEFAULT_CFG, overrides=["no-equals-sign"])
    assert info.value.line == "--set"
    with pytest.raises(ConfigError) as info:
        load_config(DEFAULT_CFG, overrides=["model.depth=3"])
    assert info.value.line == "--set"


def test_seed_is_required():
    with pytest.raises(ConfigError) as info:
        build_config([("workers", "1", 1)])
    assert info.value.key == "seed"
    assert load_config(None, seed=5).seed == 5


def test_list_values(tmp_path):
    config = _load_text(tmp_path, "seed=1\ndata.train_series=1, 2,3\ndata.val_series=4\ndata.test_series=5\n"
                                  "model.widths=8,16\n")
    assert config.data.train_series == (1, 2, 3)
    assert config.data.val_series == (4,)
    assert config.model.backbone(32).widths == (8, 16)


def test_overlapping_split_rejected(tmp_path):
    with pytest.raises(ConfigError):
        _load_text(tmp_path, "seed=1\ndata.train_series=1,2\ndata.val_series=2\ndata.test_series=3\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        load_config(tmp_path / "nope.cfg")


def test_dump_round_trip(tmp_path):
    config = load_config(DEFAULT_CFG, overrides=["eval.r_grid=0,4,8", "model.preset=tiny"])
    again = _load_text(tmp_path, dump_config(config))
    assert again == config
    assert isinstance(again, RunConfig)


def test_train_settings_follow_sections():
    config = load_config(DEFAULT_CFG, overrides=["augment.enabled=false", "eval.select_r=5"])
    settings = config.train_settings()
    assert settings.augment is None
    assert settings.select_r == 5.0
    assert settings.seed == config.seed
