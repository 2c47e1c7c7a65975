import numpy as np
import pytest

from stalab.renderer import default_object
from stalab.siamese import VictimConfig, build_victim


@pytest.fixture(scope="session")
def sym_victim():
    return build_victim(VictimConfig(head="symmetric", seed=0))


@pytest.fixture(scope="session")
def rpn_victim():
    return build_victim(VictimConfig(head="rpn", seed=0))


@pytest.fixture
def target():
    return default_object()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
