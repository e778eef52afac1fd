import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from repdit.model import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def minimal_config():
    return ModelConfig(L=2, d=8, H=2, F=2, G=4, patch=2, S=2, m=2, T=10, vocab=8)


@pytest.fixture
def small_config():
    return ModelConfig(L=4, d=16, H=2, F=3, G=8, patch=2, S=2, m=2, T=12, vocab=8)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
