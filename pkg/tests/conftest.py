import numpy as np
import pytest

from shira.linalg import SeededRng
from shira.nn import init_mlp
from shira.tasks import TaskSpec, make_base_task, make_style_task
from shira.train import TrainConfig, train_full

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def spec():
    return TaskSpec()


@pytest.fixture(scope="session")
def base_model(spec):
    """Toy MLP pretrained on the base task; shared read-only across tests."""
    model = init_mlp(SeededRng(0), [spec.input_dim, 128, 128, 128, spec.n_classes])
    trained, _ = train_full(model, make_base_task(spec), TrainConfig(steps=1000, lr=3e-3))
    return trained


@pytest.fixture(scope="session")
def style_task(spec):
    return make_style_task(spec, 1)


@pytest.fixture
def tiny_model():
    return init_mlp(SeededRng(7), [6, 8, 5, 3], activation="tanh")


def bits(a):
    return np.ascontiguousarray(a, dtype=np.float64).view(np.uint64)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
