import numpy as np
import pytest
from hypothesis import settings

from masksparsity.model import build_plain_cnn, build_resnet_cifar

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def plain():
    return build_plain_cnn([4, 6], num_classes=3, in_channels=2, seed=3)


@pytest.fixture
def resnet8():
    return build_resnet_cifar(1, num_classes=4, in_channels=3, base_width=4, seed=5)


def randomize_bn(graph, rng, low=0.05, high=1.5):
    """Give every BN non-trivial gamma/beta/running stats so eval outputs are informative."""
    for s in graph.bn.values():
        n = s.gamma.size
        s.gamma[:] = rng.uniform(low, high, n) * rng.choice([-1, 1], n)
        s.beta[:] = rng.normal(0, 0.5, n)
        s.running_mean[:] = rng.normal(0, 0.3, n)
        s.running_var[:] = rng.uniform(0.5, 2.0, n)
    return graph


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
