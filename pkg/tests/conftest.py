import numpy as np
import pytest

from grouppoison.synth_data import default_spec, generate_dataset, split


@pytest.fixture(scope="session")
def small_data():
    """A 3000-sample default dataset split 50/20/30."""
    ds = generate_dataset(default_spec(), 3000, seed=11)
    return split(ds, (0.5, 0.2, 0.3), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
