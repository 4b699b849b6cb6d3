import numpy as np
import pytest

from cadlab.data import default_specs, gen_dataset
from cadlab.diffusion import Architecture, DenoiserModel, TrainConfig, build_schedule, train


@pytest.fixture(scope="session")
def specs():
    return default_specs()


@pytest.fixture(scope="session")
def small_arch():
    return Architecture(hidden=16, emb=8, n_concepts=4, T=20)


@pytest.fixture(scope="session")
def small_model(specs, small_arch):
    """A quickly trained narrow model; good enough for mechanics, not for accuracy."""
    schedule = build_schedule(small_arch.T, 1e-3, 0.3)
    ds = gen_dataset(specs, 100, seed=1)
    init = DenoiserModel.initialize(small_arch, seed=2, schedule=schedule)
    model, _ = train(init, ds.X, ds.y, schedule, TrainConfig(epochs=5, batch_size=64, seed=3))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
