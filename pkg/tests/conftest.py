import sys

import numpy as np
import pytest

from flat.model import ModelConfig, random_model


@pytest.fixture
def gqa_config():
    return ModelConfig(d_hid=32, d_head=8, n_q_heads=4, n_kv_heads=2, d_int=48, n_layers=3)


@pytest.fixture
def mha_config():
    return ModelConfig(d_hid=24, d_head=6, n_q_heads=4, n_kv_heads=4, d_int=40, n_layers=2)


@pytest.fixture
def gqa_model(gqa_config):
    return random_model(gqa_config, 11)


def make_batches(seed, m, n, d):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, d)) for _ in range(m)]


def rel(a, b):
    nb = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (nb if nb > 0 else 1.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
