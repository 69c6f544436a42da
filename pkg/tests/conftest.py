import numpy as np
import pytest

from trimlottery import model as M
from trimlottery.tasks import Dataset, Split, TaskSpec


def make_toy_dataset(n=160, seed=0, classes=4):
    """Four noisy clusters on a short 2-channel signal."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    protos = rng.standard_normal((classes, 2, 12))
    x = (protos[y] + 0.5 * rng.standard_normal((n, 2, 12))).astype(np.float32)
    a, b = n // 2, 3 * n // 4
    return Dataset("toy", seed, Split(x[:a], y[:a]), Split(x[a:b], y[a:b]), Split(x[b:], y[b:]), loss="ce")


TOY_LAYERS = (
    M.conv1d(12, 3), M.batchnorm(), M.relu(), M.maxpool(2),
    M.conv1d(10, 3), M.batchnorm(), M.relu(),
    M.flatten(),
    M.dense(16), M.batchnorm(), M.relu(),
    M.output_dense(4),
)


@pytest.fixture
def toy_task():
    return TaskSpec("toy", (2, 12), 4, TOY_LAYERS, "ce", 4)


@pytest.fixture
def toy_dataset():
    return make_toy_dataset()


_REPORT = []


def report_line(criterion, passed, detail):
    _REPORT.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
