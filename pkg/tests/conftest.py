import sys
import numpy as np
import pytest

import synthetic


@pytest.fixture(scope="session")
def corpora(tmp_path_factory):
    """Synthetic MNIST / FSDD / SCD trees shared by the whole session."""
    root = tmp_path_factory.mktemp("corpora")
    return {
        "mnist": synthetic.write_mnist(root / "mnist"),
        "fsdd": synthetic.write_fsdd(root / "fsdd"),
        "scd": synthetic.write_scd(root / "scd"),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def pairs(corpora):
    """(train, test) pair sets: 200 and 60 pairs over 60 synthetic clips."""
    return synthetic.pairsets(corpora)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
