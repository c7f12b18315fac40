import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modalshift.data import TaskSpec, World, generate_corpus  # noqa: E402
from modalshift.model import ModelConfig, init_model  # noqa: E402

TINY = ModelConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=12, feature_dim=8, seed=3)

# lines printed at the end of the session by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return init_model(TINY)


@pytest.fixture(scope="session")
def tiny_world():
    return World.build(TINY.vocab_size, TINY.feature_dim, 0)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_world):
    return generate_corpus(TaskSpec("toy-qa", TINY.vocab_size, 96, 24, 3, 0.1, TINY.feature_dim), tiny_world)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
