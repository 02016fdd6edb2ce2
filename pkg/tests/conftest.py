import numpy as np
import pytest

from fedmarket.federation import FederationConfig, run_training
from fedmarket.learner import Dataset, Hyperparams
from fedmarket.scenarios import ScenarioSpec, SyntheticSource, build


def random_dataset(n=40, d=3, c=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, c, n), c)


@pytest.fixture
def tiny_federation():
    """Four clients, three rounds, small separable data; returns (config, clients, test, log)."""
    spec = ScenarioSpec("S2", num_clients=4, ratios=(3, 2, 2, 1),
                        synthetic=SyntheticSource(n_samples=400, n_features=6, n_classes=3, cluster_std=0.6))
    clients, test, _ = build(spec)
    config = FederationConfig(4, 4, 3, Hyperparams(learning_rate=0.05, batch_size=8))
    _, log = run_training(config, clients, test)
    return config, clients, test, log


# one line per acceptance criterion, echoed in the terminal summary so it
# shows up even when output capture is on
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
