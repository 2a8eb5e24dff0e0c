import numpy as np
import pytest

from spectra.channel import Channel
from spectra.oracle import random_instance


def small_channel(seed=0, N=3, K=4, gain_range=(-3.0, -0.5), noise_range=(-4.0, -2.0), mask=1.0, budget=None):
    rng = np.random.default_rng(seed)
    G = 10 ** rng.uniform(*gain_range, (K, N, N))
    G[:, np.arange(N), np.arange(N)] = 0.0
    z = 10 ** rng.uniform(*noise_range, (K, N))
    budget = mask * K if budget is None else budget
    return Channel(G, z, mask, budget, rng.uniform(0.5, 1.5, N))


@pytest.fixture
def channel():
    return small_channel()


@pytest.fixture
def instances():
    return [random_instance(11, i) for i in range(40)]


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
