import numpy as np
import pytest

from rnnfv.rnn import EmbeddingTable, FeatureSequence, RnnArchitecture, SymbolSequence, rnn_init

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def perturbed(model, rng, scale=0.3):
    """Random model away from the init's zero biases."""
    return model.with_flat(model.flat() + rng.normal(scale=scale, size=model.num_params))


@pytest.fixture
def small_regression(rng):
    arch = RnnArchitecture(input_dim=5, lstm_units=8, output_dim=5, fc1_units=8)
    return perturbed(rnn_init(arch, 3), rng)


@pytest.fixture
def embeddings(rng):
    return EmbeddingTable([f"w{i}" for i in range(7)], rng.normal(size=(7, 5)))


@pytest.fixture
def small_classifier(rng):
    arch = RnnArchitecture(input_dim=5, lstm_units=8, output_dim=7, fc1_units=8, mode="classification")
    return perturbed(rnn_init(arch, 4), rng)


def random_sequence(rng, n=4, d=5):
    return FeatureSequence(rng.normal(size=(n, d)))


def random_symbols(rng, table, n=4):
    return SymbolSequence(rng.integers(0, table.size, n), table)
