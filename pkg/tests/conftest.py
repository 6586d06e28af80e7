import numpy as np
import pytest
from hypothesis import settings

from fmm.data import TaskConfig, generate
from fmm.model import ModelConfig, TransformerModel
from fmm.training import Hyperparams, train

settings.register_profile("fmm", deadline=None)
settings.load_profile("fmm")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(vocab_size=20, max_seq_len=8, num_layers=2, hidden_dim=8, num_heads=2)


@pytest.fixture(scope="session")
def small_model(small_config):
    return TransformerModel.initialize(small_config, np.random.default_rng(7))


def random_batch(config, rng, n=4, min_len=3):
    T = config.max_seq_len
    lengths = rng.integers(min_len, T + 1, size=n)
    tokens = np.full((n, T), config.pad_token_id, dtype=np.int64)
    for i, L in enumerate(lengths):
        tokens[i, 0] = config.cls_token_id
        tokens[i, 1:L] = rng.integers(3, config.vocab_size, size=L - 1)
    maskable = (np.arange(T)[None, :] < lengths[:, None]) & (np.arange(T)[None, :] > 0)
    return tokens, lengths.astype(np.int64), maskable


@pytest.fixture(scope="session")
def keyword_splits():
    return generate(TaskConfig(n_train=1200, n_val=400, n_test=300, seed=3))


@pytest.fixture(scope="session")
def trained(keyword_splits):
    """A masked-fine-tuned desk model shared by the slower unit tests."""
    tr, va, _ = keyword_splits
    rep = train(ModelConfig(), (tr, va), "use_5050", "use_both", Hyperparams(max_epochs=6), seed=0)
    return rep.model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
