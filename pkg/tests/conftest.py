"""Shared fixtures: a tiny model, a toy whitespace tokenizer, and one
small simulated world reused by the data-dependent tests."""

import sys

import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance-criterion verdict lines after capture ends."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)

from tworank.model import TowerConfig, init_params
from tworank.synth import SynthConfig, generate_world, simulate_logs


@pytest.fixture
def tiny_config():
    return TowerConfig(d=8, user_layers=1, user_heads=2, user_ffn_hidden=16,
                       item_layers=1, max_history=4, vocab_size=32,
                       n_surfaces=3, n_devices=2)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def word_tokenizer():
    """Deterministic toy tokenizer: each word hashes to a fixed small id."""

    def tok(text):
        return [3 + (sum(map(ord, w)) % 29) for w in text.lower().split()]

    return tok


@pytest.fixture(scope="session")
def small_world():
    cfg = SynthConfig(n_items=60, n_users=20, n_categories=4, days=10,
                      organic_rate=0.8, impressions_per_day=0.5,
                      query_rate=0.4, seed=0)
    return generate_world(cfg)


@pytest.fixture(scope="session")
def small_logs(small_world):
    return simulate_logs(small_world)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
