"""Shared pytest fixtures and options."""

import pytest

from src.config import TrainConfig
from src.data import CorpusSpec, generate_corpus
from src.numerics import set_checked_mode
from src.params import ModelParams


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the full training runs marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full training runs, skipped without --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def checked_numerics():
    set_checked_mode(True)
    yield
    set_checked_mode(False)


@pytest.fixture
def tiny_config():
    return TrainConfig(d=8, encoder_layers=1, encoder_heads=2, decoder_heads=2, max_length=24,
                       views=2, vocab_size=32, mlp_ratio=2, epochs=1, batch_size=2,
                       candidates_per_record=3)


@pytest.fixture
def tiny_params(tiny_config):
    return ModelParams.from_train_config(tiny_config.replace(init_std=0.2))


@pytest.fixture
def records():
    spec = CorpusSpec(vocab_size=32, aspects=2, tokens_per_aspect=8, query_length=4,
                      passage_length=8, candidates_per_record=4, record_count=8, seed=5)
    return generate_corpus(spec)
