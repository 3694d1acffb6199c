import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randn(rng, *shape, scale=1.0):
    return (scale * rng.standard_normal(shape)).astype(np.float32)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from lcanet.data import gen_synthetic

    return gen_synthetic(tmp_path_factory.mktemp("data") / "train", 6, size=64, seed=3)


# One line per acceptance criterion, filled in by test_acceptance.py and
# printed once at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
