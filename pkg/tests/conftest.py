import numpy as np
import pytest

from linguine.phantom import PhantomConfig, generate_study

IDENTITY = {"R": [1, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 0]}


@pytest.fixture(scope="session")
def identity_study():
    """Four time points with no body motion, no noise and a constant tumour."""
    cfg = PhantomConfig(body_transforms=[IDENTITY] * 4, noise_sigma=0.0, seed=1)
    return generate_study(cfg)


@pytest.fixture(scope="session")
def default_study():
    return generate_study(PhantomConfig(seed=7))


@pytest.fixture(scope="session")
def trained_forest():
    from _suite import training_forest

    return training_forest()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
