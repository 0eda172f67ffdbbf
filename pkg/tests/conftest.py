import pytest

from proact.model import Model, ModelConfig
from proact.synthetic import synthetic_tokenizer


@pytest.fixture(scope="session")
def tok():
    return synthetic_tokenizer()


@pytest.fixture(scope="session")
def model(tok):
    return Model(ModelConfig(vocab_size=len(tok), max_window=512), seed=0)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
