import pytest

from src.config import (
    DEFAULT_LEARNING_RATE, LR_PRESETS, DecoderConfig, EncoderConfig, TrainConfig,
    parse_key_value_text
)
from src.utils import ConfigError


def test_defaults_follow_toy_setting():
    config = TrainConfig()
    assert config.temperature == 0.8
    assert config.views == 4
    assert config.candidates_per_record == 5
    assert config.learning_rate == DEFAULT_LEARNING_RATE
    assert config.epochs == 20


def test_preset_sets_learning_rate():
    assert TrainConfig(preset="t5-3b").learning_rate == LR_PRESETS["t5-3b"]
    with pytest.raises(ConfigError):
        TrainConfig(preset="gpt")


def test_from_file_reads_key_values(tmp_path):
    path = tmp_path / "train.conf"
    path.write_text("# toy\nviews = 2\n\nepochs = 0\nview_token_mode = lexical\n")
    config = TrainConfig.from_file(str(path))
    assert (config.views, config.epochs, config.view_token_mode) == (2, 0, "lexical")


def test_to_text_round_trips(tmp_path):
    config = TrainConfig(views=3, orthogonal_weight=0.0, seed=7)
    path = tmp_path / "train.conf"
    path.write_text(config.to_text())
    assert TrainConfig.from_file(str(path)) == config


@pytest.mark.parametrize("text, fragment", [
    ("views\n", "expected 'key = value'"),
    ("views = 2\nviews = 3\n", "already set on line 1"),
    ("colour = red\n", "unknown key 'colour'"),
    ("views = two\n", "bad value for 'views'"),
])
def test_file_errors_name_the_line(tmp_path, text, fragment):
    path = tmp_path / "bad.conf"
    path.write_text(text)
    with pytest.raises(ConfigError) as e:
        TrainConfig.from_file(str(path))
    assert fragment in str(e.value)


def test_parse_skips_comments_and_blanks():
    assert parse_key_value_text("# c\n\n a = 1 \n") == [(3, "a", "1")]


@pytest.mark.parametrize("overrides", [
    {"views": 0},
    {"views": 9},
    {"d": 10, "encoder_heads": 4},
    {"max_length": 3, "views": 2},
    {"view_token_mode": "random"},
    {"candidates_per_record": 1},
    {"temperature": 0.0},
    {"beta2": 1.0},
    {"warmup_ratio": 1.0},
    {"orthogonal_weight": -1.0},
    {"lr_decay": "cosine"},
    {"epochs": -1},
    {"decoder_layers": 0},
])
def test_invalid_values_are_rejected(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_unknown_keyword_is_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(colour="red")


def test_replace_keeps_other_keys():
    config = TrainConfig(views=2, seed=3).replace(views=1)
    assert (config.views, config.seed) == (1, 3)


def test_sub_configs_share_width():
    config = TrainConfig(d=16, encoder_heads=2, decoder_heads=4)
    assert isinstance(config.encoder_config(), EncoderConfig)
    assert config.encoder_config().head_dim == 8
    assert isinstance(config.decoder_config(), DecoderConfig)
    assert config.decoder_config().head_dim == 4
